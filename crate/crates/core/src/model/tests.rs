use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{FeatureSequence, Modality};
use crate::error::FormatError;
use crate::tensor::{grad_check, GradCheckConfig};

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn sample(t_v: usize, t_a: usize, seed: u64) -> WindowSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    WindowSample::new(
        "s",
        FeatureSequence::new(Modality::Visual, t_v, randn(&mut rng, t_v * VISUAL_DIM)).unwrap(),
        FeatureSequence::new(Modality::Audio, t_a, randn(&mut rng, t_a * AUDIO_DIM)).unwrap(),
        3,
    )
    .unwrap()
}

fn tiny_batch(lens: &[(usize, usize)], seed: u64) -> Batch {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tv: usize = lens.iter().map(|l| l.0).sum();
    let ta: usize = lens.iter().map(|l| l.1).sum();
    Batch::from_raw(
        cfg.d_model,
        randn(&mut rng, tv * cfg.d_model),
        lens.iter().map(|l| l.0).collect(),
        cfg.d_audio_in,
        randn(&mut rng, ta * cfg.d_audio_in),
        lens.iter().map(|l| l.1).collect(),
        (0..lens.len()).map(|i| i % NUM_CLASSES).collect(),
        (0..lens.len() as u64).collect(),
    )
    .unwrap()
}

fn set(state: &mut ModelState<f32>, id: ParamId, f: impl Fn(usize) -> f32) {
    for (i, x) in state.params_mut().get_mut(id).data_mut().iter_mut().enumerate() {
        *x = f(i);
    }
}

fn eye(d: usize) -> impl Fn(usize) -> f32 {
    move |i| if i / d == i % d { 1.0 } else { 0.0 }
}

/// Runs the visual TCN alone in eval mode on one `T x d_model` sequence.
fn tcn_out(state: &ModelState<f32>, x: &[f32], t: usize) -> Vec<f32> {
    let d = state.config().d_model;
    let layout = SeqLayout::single(t).unwrap();
    let keys = RowKeys::per_frame(&[0], &[t]);
    let mut g = state.graph();
    let xv = g.constant(&[t, d], x.to_vec()).unwrap();
    let out = state.network().visual_tcn(&mut g, xv, &layout, &keys, &Mode::Eval).unwrap();
    g.value(out).to_vec()
}

#[test]
fn default_param_count_matches_hand_count() {
    // tcn 12*(3*512*512 + 512), adapter 768*512 + 512 + 2*512,
    // attention 2*(4*512*512 + 2*512), mlp 1024*512+512 + 512*256+256 + 256*8+8,
    // projection 512*512 + 512
    let hand = 9_443_328 + 394_752 + 2_099_200 + 658_184 + 262_656;
    assert_eq!(hand, 12_858_120);
    let cfg = ModelConfig::default();
    assert_eq!(cfg.param_count(), hand);
    let state = ModelState::<f32>::init(cfg, 1).unwrap();
    assert_eq!(state.param_count(), hand);
    assert_eq!(ModelState::<f32>::init(ModelConfig::tiny(), 1).unwrap().param_count(), ModelConfig::tiny().param_count());
}

#[test]
fn receptive_field_formula() {
    assert_eq!(ModelConfig::default().receptive_field(), 253);
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::default();
    c.heads = 7;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = ModelConfig::default();
    c.tcn_dilations = vec![1, 2, 4, 8, 16, 24];
    assert!(c.validate().is_err());
    let mut c = ModelConfig::default();
    c.tcn_dilations = vec![1, 2, 4];
    assert!(c.validate().is_err());
    let err = serde_json::from_str::<ModelConfig>(r#"{"d_modle": 4}"#).unwrap_err();
    assert!(err.to_string().contains("d_modle"));
    let partial: ModelConfig = serde_json::from_str(r#"{"dropout_p": 0.2}"#).unwrap();
    assert_eq!(partial.d_model, 512);
}

#[test]
fn zero_kernels_leave_only_the_residual() {
    let mut state = ModelState::<f32>::init(ModelConfig::tiny(), 3).unwrap();
    let ids = state.ids().tcn.clone();
    for b in &ids {
        for id in [b.conv1_w, b.conv1_b, b.conv2_w, b.conv2_b] {
            set(&mut state, id, |_| 0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, 7 * 16);
    assert_eq!(tcn_out(&state, &x, 7), x);
}

#[test]
fn receptive_field_is_exactly_253_frames() {
    let state = ModelState::<f32>::init(ModelConfig::default(), 42).unwrap();
    let t = 300;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&mut rng, t * 512);
    let base = tcn_out(&state, &x, t);
    let mut x2 = x.clone();
    for v in &mut x2[..512] {
        *v += 1.0;
    }
    let pert = tcn_out(&state, &x2, t);
    let changed: Vec<usize> = (0..t).filter(|&r| base[r * 512..(r + 1) * 512] != pert[r * 512..(r + 1) * 512]).collect();
    let reach = changed.iter().max().unwrap() + 1;
    assert_eq!(reach, 253);
    assert!(changed.contains(&0));
}

#[test]
fn last_frame_perturbation_changes_only_last_output() {
    let state = ModelState::<f32>::init(ModelConfig::default(), 42).unwrap();
    let t = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = randn(&mut rng, t * 512);
    let base = tcn_out(&state, &x, t);
    let mut x2 = x.clone();
    x2[(t - 1) * 512] += 0.5;
    let pert = tcn_out(&state, &x2, t);
    assert_eq!(base[..(t - 1) * 512], pert[..(t - 1) * 512]);
    assert_ne!(base[(t - 1) * 512..], pert[(t - 1) * 512..]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn visual_path_is_causal(t in 2usize..20, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let state = ModelState::<f32>::init(ModelConfig::tiny(), seed).unwrap();
        let tp = ((t as f64) * frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = randn(&mut rng, t * 16);
        let mut x2 = x.clone();
        for v in &mut x2[tp * 16..(tp + 1) * 16] {
            *v -= 2.0;
        }
        let (a, b) = (tcn_out(&state, &x, t), tcn_out(&state, &x2, t));
        prop_assert_eq!(&a[..tp * 16], &b[..tp * 16]);
    }
}

#[test]
fn audio_adapter_examples() {
    let mut state = ModelState::<f32>::init(ModelConfig::tiny(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = 5;
    let x = randn(&mut rng, t * 12);
    let run = |state: &ModelState<f32>, x: &[f32], mode: Mode| {
        let mut g = state.graph();
        let xa = g.constant(&[t, 12], x.to_vec()).unwrap();
        let keys = RowKeys::per_frame(&[0], &[t]);
        let out = state.network().audio_adapter(&mut g, xa, &keys, &mode).unwrap();
        g.value(out).to_vec()
    };
    let a = run(&state, &x, Mode::Eval);
    assert_eq!(a, run(&state, &x, Mode::Eval));
    assert_eq!(a.len(), t * 16);

    // per-timestep map
    let mut x2 = x.clone();
    x2[2 * 12] += 1.0;
    let b = run(&state, &x2, Mode::Eval);
    for r in 0..t {
        assert_eq!(a[r * 16..(r + 1) * 16] == b[r * 16..(r + 1) * 16], r != 2);
    }

    let ids = state.ids().clone();
    set(&mut state, ids.adapter.w, |_| 0.0);
    set(&mut state, ids.adapter.b, |_| 0.0);
    assert!(run(&state, &x, Mode::Eval).iter().all(|&v| v == 0.0));

    let mut g = state.graph();
    let bad = g.constant(&[t, 16], vec![0.0; t * 16]).unwrap();
    let keys = RowKeys::per_frame(&[0], &[t]);
    assert!(matches!(
        state.network().audio_adapter(&mut g, bad, &keys, &Mode::Eval),
        Err(Error::Shape { .. })
    ));
}

fn block(state: &ModelState<f32>, q: &[f32], tq: usize, kv: &[f32], tk: usize) -> (Vec<f32>, Vec<f32>) {
    let d = state.config().d_model;
    let (ql, kl) = (SeqLayout::single(tq).unwrap(), SeqLayout::single(tk).unwrap());
    let mut g = state.graph();
    let qv = g.constant(&[tq, d], q.to_vec()).unwrap();
    let kvv = g.constant(&[tk, d], kv.to_vec()).unwrap();
    let keys = RowKeys::per_frame(&[0], &[tq]);
    let (out, _) = state
        .network()
        .cross_attention_block(&mut g, qv, kvv, Direction::VisualToAudio, &ql, &kl, &keys, &Mode::Eval)
        .unwrap();
    let (_, mha) = state.network().mha(&mut g, qv, kvv, Direction::VisualToAudio, &ql, &kl).unwrap();
    (g.value(out).to_vec(), g.value(mha).to_vec())
}

#[test]
fn zero_output_projection_collapses_to_layer_norm() {
    let mut state = ModelState::<f32>::init(ModelConfig::tiny(), 6).unwrap();
    let wo = state.ids().v2a.wo;
    set(&mut state, wo, |_| 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (q, kv) = (randn(&mut rng, 3 * 16), randn(&mut rng, 5 * 16));
    let (out, _) = block(&state, &q, 3, &kv, 5);
    for r in 0..3 {
        let row = &q[r * 16..(r + 1) * 16];
        let mean = row.iter().sum::<f32>() / 16.0;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f32>() / 16.0;
        for c in 0..16 {
            let expect = (row[c] - mean) / (var + 1e-5).sqrt();
            assert!((out[r * 16 + c] - expect).abs() < 1e-5);
        }
    }
}

#[test]
fn single_key_gives_identical_attention_rows() {
    let state = ModelState::<f32>::init(ModelConfig::tiny(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (q, kv) = (randn(&mut rng, 4 * 16), randn(&mut rng, 16));
    let (_, mha) = block(&state, &q, 4, &kv, 1);
    for r in 1..4 {
        assert_eq!(mha[r * 16..(r + 1) * 16], mha[..16]);
    }
}

#[test]
fn single_head_uniform_attention_is_the_key_mean() {
    let cfg = ModelConfig {
        d_model: 4,
        heads: 1,
        ..ModelConfig::tiny()
    };
    let mut state = ModelState::<f32>::init(cfg, 8).unwrap();
    let ids = state.ids().v2a.clone();
    set(&mut state, ids.wq, |_| 0.0);
    set(&mut state, ids.wk, |_| 0.0);
    set(&mut state, ids.wv, eye(4));
    set(&mut state, ids.wo, eye(4));
    let kv: Vec<f32> = (1..=12).map(|x| x as f32).collect();
    let q = vec![0.3, -1.0, 2.0, 0.0, 5.0, 1.0, 1.0, 1.0];
    let (_, mha) = block(&state, &q, 2, &kv, 3);
    let expect = [5.0, 6.0, 7.0, 8.0, 5.0, 6.0, 7.0, 8.0];
    for (a, b) in mha.iter().zip(expect) {
        assert!((a - b).abs() < 1e-5, "{mha:?}");
    }
}

#[test]
fn forward_shapes_and_unit_projection() {
    let state = ModelState::<f32>::init(ModelConfig::default(), 42).unwrap();
    let s = sample(30, 50, 1);
    let (logits, rep) = state.forward(&s, &Mode::Eval).unwrap();
    assert_eq!(logits.len(), 8);
    assert_eq!(rep.h_v2a.len(), 30 * 512);
    assert_eq!(rep.h_a2v.len(), 50 * 512);
    assert_eq!(rep.z.len(), 1024);
    assert_eq!(rep.v.len(), 512);
    let n = rep.v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    assert!((n - 1.0).abs() < 1e-6);
    let (logits2, rep2) = state.forward(&s, &Mode::Eval).unwrap();
    assert_eq!(logits, logits2);
    assert_eq!(rep, rep2);
}

#[test]
fn attention_rows_sum_to_one_in_both_directions() {
    let state = ModelState::<f32>::init(ModelConfig::tiny(), 10).unwrap();
    let batch = tiny_batch(&[(5, 7), (3, 2)], 10);
    let mut g = state.graph();
    let fw = state.network().forward_graph(&mut g, &batch, &Mode::Eval).unwrap();
    assert_eq!(g.shape(fw.h_v2a), &[8, 16]);
    assert_eq!(g.shape(fw.h_a2v), &[9, 16]);
    // v2a: per head, each query row spans that sample's audio keys
    let p = g.attention_probs(fw.attn_v2a).unwrap();
    let mut off = 0;
    for (tq, tk) in [(5, 7), (3, 2)] {
        for _ in 0..8 * tq {
            let s: f64 = p[off..off + tk].iter().map(|&x| x as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            off += tk;
        }
    }
    assert_eq!(off, p.len());
    let p = g.attention_probs(fw.attn_a2v).unwrap();
    let mut off = 0;
    for (tq, tk) in [(7, 5), (2, 3)] {
        for _ in 0..8 * tq {
            let s: f64 = p[off..off + tk].iter().map(|&x| x as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            off += tk;
        }
    }
}

fn classify(state: &ModelState<f32>, hv: &[f32], tv: usize, ha: &[f32], ta: usize) -> (Vec<f32>, Vec<f32>) {
    let d = state.config().d_model;
    let (vl, al) = (SeqLayout::single(tv).unwrap(), SeqLayout::single(ta).unwrap());
    let mut g = state.graph();
    let a = g.constant(&[tv, d], hv.to_vec()).unwrap();
    let b = g.constant(&[ta, d], ha.to_vec()).unwrap();
    let (z, logits) = state
        .network()
        .pool_concat_classify(&mut g, a, b, &vl, &al, &RowKeys::per_sample(&[0]), &Mode::Eval)
        .unwrap();
    (g.value(z).to_vec(), g.value(logits).to_vec())
}

#[test]
fn pooling_and_classifier_examples() {
    let mut state = ModelState::<f32>::init(ModelConfig::tiny(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (hv, ha) = (randn(&mut rng, 16), randn(&mut rng, 16));
    let (z, _) = classify(&state, &hv, 1, &ha, 1);
    assert_eq!(z, [hv.clone(), ha.clone()].concat());

    let (hv, ha) = (randn(&mut rng, 4 * 16), randn(&mut rng, 3 * 16));
    let (_, base) = classify(&state, &hv, 4, &ha, 3);
    let mut rev = Vec::new();
    for r in (0..4).rev() {
        rev.extend_from_slice(&hv[r * 16..(r + 1) * 16]);
    }
    let (_, permuted) = classify(&state, &rev, 4, &ha, 3);
    for (a, b) in base.iter().zip(&permuted) {
        assert!((a - b).abs() < 1e-5);
    }

    let mlp = state.ids().mlp.clone();
    for l in &mlp {
        set(&mut state, l.w, |_| 0.0);
    }
    let b3 = state.params().get(mlp[2].b).data().to_vec();
    let (_, logits) = classify(&state, &hv, 4, &ha, 3);
    assert_eq!(logits, b3);
}

fn project(state: &ModelState<f32>, h: &[f32], t: usize) -> Result<Vec<f32>> {
    let d = state.config().d_model;
    let mut g = state.graph();
    let x = g.constant(&[t, d], h.to_vec())?;
    let v = state.network().project_visual(&mut g, x, &SeqLayout::single(t)?)?;
    Ok(g.value(v).to_vec())
}

#[test]
fn projection_examples() {
    let mut state = ModelState::<f32>::init(ModelConfig::tiny(), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h = randn(&mut rng, 3 * 16);
    let v = project(&state, &h, 3).unwrap();
    let n: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    assert!((n - 1.0).abs() < 1e-6);

    let ids = state.ids().proj.clone();
    set(&mut state, ids.w, eye(16));
    set(&mut state, ids.b, |_| 0.0);
    let e1: Vec<f32> = (0..3 * 16).map(|i| if i % 16 == 0 { 1.0 } else { 0.0 }).collect();
    assert_eq!(project(&state, &e1, 3).unwrap(), e1[..16].to_vec());
    let scaled: Vec<f32> = h.iter().map(|x| 10.0 * x).collect();
    let (a, b) = (project(&state, &h, 3).unwrap(), project(&state, &scaled, 3).unwrap());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-6);
    }
    set(&mut state, ids.w, |_| 0.0);
    assert!(matches!(project(&state, &h, 3), Err(Error::Degenerate { .. })));
}

#[test]
fn every_parameter_passes_grad_check() {
    let state = ModelState::<f64>::init(ModelConfig::tiny(), 13).unwrap();
    let net = state.network().clone();
    let mut params = state.params().clone();
    let batch = tiny_batch(&[(4, 6), (4, 6)], 13);
    let mode = Mode::Train(DropoutStream::new(42, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cl: Vec<f64> = (0..2 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cv: Vec<f64> = (0..2 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let which: Vec<ParamId> = params.ids().collect();
    let report = grad_check(
        &mut params,
        &which,
        |g| {
            let fw = net.forward_graph(g, &batch, &mode)?;
            let a = g.dot_const(fw.logits, cl.clone())?;
            let b = g.dot_const(fw.v, cv.clone())?;
            g.add(a, b)
        },
        GradCheckConfig::default(),
    )
    .unwrap();
    for p in &report.params {
        assert!(p.max_rel_error <= 1e-4, "{} {}", p.name, p.max_rel_error);
    }
    assert_eq!(report.params.len(), which.len());
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let state = ModelState::<f32>::init(ModelConfig::tiny(), 15).unwrap();
    let bytes = state.to_bytes();
    let back = ModelState::from_bytes(&bytes).unwrap();
    assert_eq!(back.config(), state.config());
    assert_eq!(back.params(), state.params());
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    state.save(&p).unwrap();
    assert_eq!(ModelState::load(&p).unwrap().to_bytes(), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        ModelState::from_bytes(&bad),
        Err(Error::Format { source: FormatError::BadMagic { .. }, .. })
    ));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(ModelState::from_bytes(&extra), Err(Error::Data(_))));
    assert!(matches!(
        ModelState::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Format { source: FormatError::Truncated { .. }, .. })
    ));
}

#[test]
fn train_mode_dropout_is_replayable() {
    let state = ModelState::<f32>::init(ModelConfig::tiny(), 16).unwrap();
    let batch = tiny_batch(&[(5, 4), (3, 3)], 16);
    let run = |step| {
        let mut g = state.graph();
        let fw = state
            .network()
            .forward_graph(&mut g, &batch, &Mode::Train(DropoutStream::new(1, step)))
            .unwrap();
        g.value(fw.logits).to_vec()
    };
    assert_eq!(run(0), run(0));
    assert_ne!(run(0), run(1));
}
