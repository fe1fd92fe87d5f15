use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::NUM_CLASSES;
use crate::error::Result;
use crate::model::{Batch, ModelConfig, ModelState, Mode};
use crate::objectives::{combined_graph, TextBank, LAMBDA, TAU};
use crate::tensor::{grad_check, DropoutStream, GradCheckConfig, GradCheckReport};

/// Finite-difference check of every parameter of `model` under the full
/// training loss (cross-entropy plus contrastive term) in 64-bit mode, on a
/// seeded two-sample ragged batch with dropout active.
pub fn combined_loss_grad_check(model: &ModelConfig, seed: u64, check: GradCheckConfig) -> Result<GradCheckReport> {
    model.validate()?;
    let state = ModelState::<f64>::init(model.clone(), seed)?;
    let net = state.network().clone();
    let mut params = state.params().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut uniform = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect() };
    let bank = TextBank::new(uniform(NUM_CLASSES * model.text_dim), model.text_dim)?;
    let (v_lens, a_lens) = (vec![4, 3], vec![6, 5]);
    let visual = uniform(7 * model.d_model);
    let audio = uniform(11 * model.d_audio_in);
    let batch = Batch::from_raw(model.d_model, visual, v_lens, model.d_audio_in, audio, a_lens, vec![2, 5], vec![0, 1])?;
    let weights = [1.0, 1.0, 0.5, 1.0, 1.0, 2.0, 1.0, 1.0];
    let mode = Mode::Train(DropoutStream::new(seed, 1));
    let which: Vec<_> = params.ids().collect();
    grad_check(
        &mut params,
        &which,
        |g| {
            let fw = net.forward_graph(g, &batch, &mode)?;
            Ok(combined_graph(g, fw.logits, fw.v, &batch.labels, &bank, &weights, LAMBDA, TAU)?.total)
        },
        check,
    )
}
