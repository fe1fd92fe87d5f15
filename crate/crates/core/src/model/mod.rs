//! The fusion head: visual TCN, audio adapter, bi-directional cross-attention,
//! pooled MLP classifier and the contrastive projection.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{WindowSample, AUDIO_DIM, NUM_CLASSES, TEXT_DIM, VISUAL_DIM};
use crate::error::{Error, Result};
use crate::tensor::{DropoutStream, Graph, ParamId, ParamStore, Real, RowKeys, SeqLayout, Tensor, Var};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const LN_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-8;

/// Architecture constants. The visual input width equals `d_model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_audio_in: usize,
    pub tcn_blocks: usize,
    pub tcn_kernel: usize,
    pub tcn_dilations: Vec<usize>,
    pub heads: usize,
    pub mlp_hidden: Vec<usize>,
    pub n_classes: usize,
    pub dropout_p: f64,
    pub text_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: VISUAL_DIM,
            d_audio_in: AUDIO_DIM,
            tcn_blocks: 6,
            tcn_kernel: 3,
            tcn_dilations: vec![1, 2, 4, 8, 16, 32],
            heads: 8,
            mlp_hidden: vec![512, 256],
            n_classes: NUM_CLASSES,
            dropout_p: 0.1,
            text_dim: TEXT_DIM,
        }
    }
}

impl ModelConfig {
    /// Small surrogate with the same topology, used for finite-difference
    /// checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            d_audio_in: 12,
            mlp_hidden: vec![16, 8],
            text_dim: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model < 2 || self.d_audio_in == 0 || self.text_dim == 0 {
            return bad("d_model must be >= 2 and input/text widths positive".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.tcn_kernel == 0 {
            return bad("tcn_kernel must be >= 1".into());
        }
        if self.tcn_dilations.len() != self.tcn_blocks {
            return bad(format!(
                "{} dilations given for {} TCN blocks",
                self.tcn_dilations.len(),
                self.tcn_blocks
            ));
        }
        let pow2 = self.tcn_dilations.iter().all(|d| d.is_power_of_two());
        let increasing = self.tcn_dilations.windows(2).all(|w| w[0] < w[1]);
        if !pow2 || !increasing {
            return bad(format!(
                "tcn_dilations {:?} must be strictly increasing powers of two",
                self.tcn_dilations
            ));
        }
        if self.mlp_hidden.contains(&0) {
            return bad("mlp_hidden widths must be positive".into());
        }
        if self.n_classes < 2 {
            return bad("n_classes must be >= 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }

    /// Frames of visual history that can reach one TCN output frame.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * (self.tcn_kernel - 1) * self.tcn_dilations.iter().sum::<usize>()
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let conv = self.tcn_kernel * d * d + d;
        let tcn = 2 * self.tcn_blocks * conv;
        let adapter = self.d_audio_in * d + 3 * d;
        let attention = 2 * (4 * d * d + 2 * d);
        let mut mlp = 0;
        let mut fan_in = 2 * d;
        for &w in self.mlp_hidden.iter().chain(std::iter::once(&self.n_classes)) {
            mlp += fan_in * w + w;
            fan_in = w;
        }
        let proj = d * self.text_dim + self.text_dim;
        tcn + adapter + attention + mlp + proj
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcnBlockIds {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

/// Handles to every parameter, in declaration (and checkpoint) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamIds {
    pub tcn: Vec<TcnBlockIds>,
    pub adapter: LinearIds,
    pub adapter_gamma: ParamId,
    pub adapter_beta: ParamId,
    pub v2a: AttentionIds,
    pub a2v: AttentionIds,
    pub mlp: Vec<LinearIds>,
    pub proj: LinearIds,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Ones,
    Zeros,
}

#[derive(Default)]
struct Layout {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        self.entries.push((name, shape, init));
        ParamId(self.entries.len() - 1)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        let bound = 1.0 / (fan_in as f64).sqrt();
        LinearIds {
            w: self.push(format!("{name}.weight"), vec![fan_in, fan_out], Init::Uniform(bound)),
            b: self.push(format!("{name}.bias"), vec![fan_out], Init::Uniform(bound)),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> AttentionIds {
        let xavier = (6.0 / (2 * d) as f64).sqrt();
        let mut w = |p: &str| self.push(format!("{name}.{p}"), vec![d, d], Init::Uniform(xavier));
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        AttentionIds {
            wq,
            wk,
            wv,
            wo,
            ln_gamma: self.push(format!("{name}.ln.gamma"), vec![d], Init::Ones),
            ln_beta: self.push(format!("{name}.ln.beta"), vec![d], Init::Zeros),
        }
    }
}

fn plan(cfg: &ModelConfig) -> (ParamIds, Layout) {
    let d = cfg.d_model;
    let k = cfg.tcn_kernel;
    let mut l = Layout::default();
    let conv_bound = 1.0 / ((k * d) as f64).sqrt();
    let tcn = (0..cfg.tcn_blocks)
        .map(|i| {
            let mut conv = |j: usize| {
                (
                    l.push(format!("tcn.{i}.conv{j}.weight"), vec![k, d, d], Init::Uniform(conv_bound)),
                    l.push(format!("tcn.{i}.conv{j}.bias"), vec![d], Init::Uniform(conv_bound)),
                )
            };
            let (conv1_w, conv1_b) = conv(1);
            let (conv2_w, conv2_b) = conv(2);
            TcnBlockIds {
                conv1_w,
                conv1_b,
                conv2_w,
                conv2_b,
            }
        })
        .collect();
    let adapter = l.linear("adapter", cfg.d_audio_in, d);
    let adapter_gamma = l.push("adapter.ln.gamma".into(), vec![d], Init::Ones);
    let adapter_beta = l.push("adapter.ln.beta".into(), vec![d], Init::Zeros);
    let v2a = l.attention("v2a", d);
    let a2v = l.attention("a2v", d);
    let mut mlp = Vec::new();
    let mut fan_in = 2 * d;
    for (j, &w) in cfg.mlp_hidden.iter().chain(std::iter::once(&cfg.n_classes)).enumerate() {
        mlp.push(l.linear(&format!("mlp.{j}"), fan_in, w));
        fan_in = w;
    }
    let proj = l.linear("proj", d, cfg.text_dim);
    let ids = ParamIds {
        tcn,
        adapter,
        adapter_gamma,
        adapter_beta,
        v2a,
        a2v,
        mlp,
        proj,
    };
    (ids, l)
}

/// Train mode carries the run's dropout stream; eval mode disables dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train(DropoutStream),
}

impl Mode {
    fn stream(&self) -> Option<&DropoutStream> {
        match self {
            Mode::Eval => None,
            Mode::Train(s) => Some(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Visual queries attend to audio keys.
    VisualToAudio,
    /// Audio queries attend to visual keys.
    AudioToVisual,
}

const SITE_TCN: u64 = 0x100;
const SITE_ADAPTER: u64 = 0x200;
const SITE_V2A: u64 = 0x300;
const SITE_A2V: u64 = 0x301;
const SITE_MLP: u64 = 0x400;

/// A ragged batch of windows stacked row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub visual: Vec<f32>,
    pub audio: Vec<f32>,
    pub v_dim: usize,
    pub a_dim: usize,
    pub v_layout: SeqLayout,
    pub a_layout: SeqLayout,
    pub labels: Vec<usize>,
    /// Stable per-sample identifiers keying the dropout masks.
    pub uids: Vec<u64>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = (u64, &'a WindowSample)>) -> Result<Self> {
        let (mut visual, mut audio) = (Vec::new(), Vec::new());
        let (mut v_lens, mut a_lens, mut labels, mut uids) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (uid, s) in samples {
            visual.extend_from_slice(s.visual.data());
            audio.extend_from_slice(s.audio.data());
            v_lens.push(s.visual.len());
            a_lens.push(s.audio.len());
            labels.push(s.label);
            uids.push(uid);
        }
        Self::from_raw(VISUAL_DIM, visual, v_lens, AUDIO_DIM, audio, a_lens, labels, uids)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_raw(
        v_dim: usize,
        visual: Vec<f32>,
        v_lens: Vec<usize>,
        a_dim: usize,
        audio: Vec<f32>,
        a_lens: Vec<usize>,
        labels: Vec<usize>,
        uids: Vec<u64>,
    ) -> Result<Self> {
        let v_layout = SeqLayout::new(v_lens)?;
        let a_layout = SeqLayout::new(a_lens)?;
        let b = v_layout.num_seqs();
        if a_layout.num_seqs() != b || labels.len() != b || uids.len() != b {
            return Err(Error::Shape {
                op: "batch",
                lhs: vec![b, a_layout.num_seqs()],
                rhs: vec![labels.len(), uids.len()],
            });
        }
        if visual.len() != v_layout.total_rows() * v_dim || audio.len() != a_layout.total_rows() * a_dim {
            return Err(Error::Shape {
                op: "batch",
                lhs: vec![visual.len(), audio.len()],
                rhs: vec![v_layout.total_rows() * v_dim, a_layout.total_rows() * a_dim],
            });
        }
        Ok(Self {
            visual,
            audio,
            v_dim,
            a_dim,
            v_layout,
            a_layout,
            labels,
            uids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn visual_keys(&self) -> RowKeys {
        RowKeys::per_frame(&self.uids, self.v_layout.lens())
    }

    pub fn audio_keys(&self) -> RowKeys {
        RowKeys::per_frame(&self.uids, self.a_layout.lens())
    }

    pub fn sample_keys(&self) -> RowKeys {
        RowKeys::per_sample(&self.uids)
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub f_v: Var,
    pub f_a: Var,
    pub h_v2a: Var,
    pub h_a2v: Var,
    /// Attention nodes; their probabilities are available through
    /// [`Graph::attention_probs`].
    pub attn_v2a: Var,
    pub attn_a2v: Var,
    pub z: Var,
    pub logits: Var,
    /// Unit-norm contrastive projection, `B x text_dim`.
    pub v: Var,
}

/// Output of [`ModelState::forward`] on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepresentation<F> {
    pub t_v: usize,
    pub t_a: usize,
    pub h_v2a: Vec<F>,
    pub h_a2v: Vec<F>,
    pub z: Vec<F>,
    pub v: Vec<F>,
}

/// Architecture without weights: builds forward graphs over any parameter
/// store laid out by [`ModelState::init`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: ModelConfig,
    ids: ParamIds,
}

fn check_width<F: Real>(g: &Graph<'_, F>, x: Var, want: usize, op: &'static str) -> Result<()> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[1] != want {
        return Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![want],
        });
    }
    Ok(())
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (ids, _) = plan(&config);
        Ok(Self { config, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ids(&self) -> &ParamIds {
        &self.ids
    }

    fn dropout<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, mode: &Mode, site: u64, keys: &RowKeys) -> Result<Var> {
        g.dropout(x, self.config.dropout_p, mode.stream(), site, keys)
    }

    fn linear<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, ids: &LinearIds) -> Result<Var> {
        let w = g.param(ids.w);
        let b = g.param(ids.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    /// Six residual blocks of two dilated causal convolutions each.
    pub fn visual_tcn<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        layout: &SeqLayout,
        keys: &RowKeys,
        mode: &Mode,
    ) -> Result<Var> {
        check_width(g, x, self.config.d_model, "visual_tcn")?;
        let mut x = x;
        for (i, (block, &dilation)) in self.ids.tcn.iter().zip(&self.config.tcn_dilations).enumerate() {
            let site = SITE_TCN + 2 * i as u64;
            let (w1, b1) = (g.param(block.conv1_w), g.param(block.conv1_b));
            let h = g.conv1d_causal(x, w1, b1, dilation, layout)?;
            let h = g.relu(h);
            let h = self.dropout(g, h, mode, site, keys)?;
            let (w2, b2) = (g.param(block.conv2_w), g.param(block.conv2_b));
            let h = g.conv1d_causal(h, w2, b2, dilation, layout)?;
            let h = g.relu(h);
            let h = self.dropout(g, h, mode, site + 1, keys)?;
            x = g.add(x, h)?;
        }
        Ok(x)
    }

    /// Per-timestep `dropout(relu(LN(x W + b)))`.
    pub fn audio_adapter<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, keys: &RowKeys, mode: &Mode) -> Result<Var> {
        check_width(g, x, self.config.d_audio_in, "audio_adapter")?;
        let h = self.linear(g, x, &self.ids.adapter)?;
        let (gamma, beta) = (g.param(self.ids.adapter_gamma), g.param(self.ids.adapter_beta));
        let h = g.layer_norm(h, gamma, beta, LN_EPS)?;
        let h = g.relu(h);
        self.dropout(g, h, mode, SITE_ADAPTER, keys)
    }

    fn attention_ids(&self, dir: Direction) -> (&AttentionIds, u64) {
        match dir {
            Direction::VisualToAudio => (&self.ids.v2a, SITE_V2A),
            Direction::AudioToVisual => (&self.ids.a2v, SITE_A2V),
        }
    }

    /// `MHA(q, kv, kv) W_o`. Returns the attention node and the projected
    /// output.
    pub fn mha<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        q: Var,
        kv: Var,
        dir: Direction,
        q_layout: &SeqLayout,
        k_layout: &SeqLayout,
    ) -> Result<(Var, Var)> {
        let (ids, _) = self.attention_ids(dir);
        let (wq, wk, wv, wo) = (g.param(ids.wq), g.param(ids.wk), g.param(ids.wv), g.param(ids.wo));
        let qp = g.matmul(q, wq)?;
        let kp = g.matmul(kv, wk)?;
        let vp = g.matmul(kv, wv)?;
        let attn = g.attention(qp, kp, vp, self.config.heads, q_layout, k_layout)?;
        let out = g.matmul(attn, wo)?;
        Ok((attn, out))
    }

    /// Post-norm residual block `LN(q + dropout(MHA(q, kv, kv) W_o))`.
    #[allow(clippy::too_many_arguments)]
    pub fn cross_attention_block<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        q: Var,
        kv: Var,
        dir: Direction,
        q_layout: &SeqLayout,
        k_layout: &SeqLayout,
        q_keys: &RowKeys,
        mode: &Mode,
    ) -> Result<(Var, Var)> {
        check_width(g, q, self.config.d_model, "cross_attention")?;
        check_width(g, kv, self.config.d_model, "cross_attention")?;
        let (attn, out) = self.mha(g, q, kv, dir, q_layout, k_layout)?;
        let (ids, site) = self.attention_ids(dir);
        let out = self.dropout(g, out, mode, site, q_keys)?;
        let res = g.add(q, out)?;
        let (gamma, beta) = (g.param(ids.ln_gamma), g.param(ids.ln_beta));
        Ok((g.layer_norm(res, gamma, beta, LN_EPS)?, attn))
    }

    /// `mean_t(h_v2a) ++ mean_t(h_a2v)` through the MLP. Returns `(z, logits)`.
    pub fn pool_concat_classify<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        h_v2a: Var,
        h_a2v: Var,
        v_layout: &SeqLayout,
        a_layout: &SeqLayout,
        sample_keys: &RowKeys,
        mode: &Mode,
    ) -> Result<(Var, Var)> {
        let pv = g.mean_pool_time(h_v2a, v_layout)?;
        let pa = g.mean_pool_time(h_a2v, a_layout)?;
        let z = g.concat_cols(pv, pa)?;
        let mut h = z;
        let last = self.ids.mlp.len() - 1;
        for (j, layer) in self.ids.mlp.iter().enumerate() {
            h = self.linear(g, h, layer)?;
            if j < last {
                h = g.relu(h);
                h = self.dropout(g, h, mode, SITE_MLP + j as u64, sample_keys)?;
            }
        }
        Ok((z, h))
    }

    /// `l2_normalize(mean_t(h_v2a) W_p + b_p)`.
    pub fn project_visual<F: Real>(&self, g: &mut Graph<'_, F>, h_v2a: Var, layout: &SeqLayout) -> Result<Var> {
        let pooled = g.mean_pool_time(h_v2a, layout)?;
        let p = self.linear(g, pooled, &self.ids.proj)?;
        g.l2_normalize(p, L2_EPS)
    }

    pub fn forward_graph<F: Real>(&self, g: &mut Graph<'_, F>, batch: &Batch, mode: &Mode) -> Result<ForwardVars> {
        let xv = g.constant(
            &[batch.v_layout.total_rows(), batch.v_dim],
            batch.visual.iter().map(|&x| F::from_f32(x)).collect(),
        )?;
        let xa = g.constant(
            &[batch.a_layout.total_rows(), batch.a_dim],
            batch.audio.iter().map(|&x| F::from_f32(x)).collect(),
        )?;
        let (vk, ak) = (batch.visual_keys(), batch.audio_keys());
        let (vl, al) = (&batch.v_layout, &batch.a_layout);
        let f_v = self.visual_tcn(g, xv, vl, &vk, mode)?;
        let f_a = self.audio_adapter(g, xa, &ak, mode)?;
        let (h_v2a, attn_v2a) = self.cross_attention_block(g, f_v, f_a, Direction::VisualToAudio, vl, al, &vk, mode)?;
        let (h_a2v, attn_a2v) = self.cross_attention_block(g, f_a, f_v, Direction::AudioToVisual, al, vl, &ak, mode)?;
        let (z, logits) = self.pool_concat_classify(g, h_v2a, h_a2v, vl, al, &batch.sample_keys(), mode)?;
        let v = self.project_visual(g, h_v2a, vl)?;
        Ok(ForwardVars {
            f_v,
            f_a,
            h_v2a,
            h_a2v,
            attn_v2a,
            attn_a2v,
            z,
            logits,
            v,
        })
    }
}

/// Configuration plus every learnable parameter of the head.
#[derive(Debug, Clone)]
pub struct ModelState<F: Real = f32> {
    net: Network,
    params: ParamStore<F>,
}

impl<F: Real> ModelState<F> {
    /// PyTorch-style init: uniform `±1/sqrt(fan_in)` for convolutions and
    /// linear layers, Xavier-uniform attention projections, unit LayerNorm
    /// gain.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let net = Network::new(config)?;
        let (_, layout) = plan(&net.config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in layout.entries {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Uniform(bound) => (0..n)
                    .map(|_| F::lit(rng.random_range(-bound..bound)))
                    .collect(),
                Init::Ones => vec![F::one(); n],
                Init::Zeros => vec![F::zero(); n],
            };
            params.add(name, Tensor::new(&shape, data)?);
        }
        Ok(Self { net, params })
    }

    pub(crate) fn from_parts(net: Network, params: ParamStore<F>) -> Self {
        Self { net, params }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn ids(&self) -> &ParamIds {
        &self.net.ids
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<G: Real>(&self) -> ModelState<G> {
        ModelState {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    /// Fresh graph over this state's parameters.
    pub fn graph(&self) -> Graph<'_, F> {
        Graph::new(&self.params)
    }

    /// Forward pass on a single window.
    pub fn forward(&self, sample: &WindowSample, mode: &Mode) -> Result<(Vec<F>, FusedRepresentation<F>)> {
        let batch = Batch::from_samples([(0, sample)])?;
        let mut g = self.graph();
        let fw = self.net.forward_graph(&mut g, &batch, mode)?;
        let rep = FusedRepresentation {
            t_v: sample.visual.len(),
            t_a: sample.audio.len(),
            h_v2a: g.value(fw.h_v2a).to_vec(),
            h_a2v: g.value(fw.h_a2v).to_vec(),
            z: g.value(fw.z).to_vec(),
            v: g.value(fw.v).to_vec(),
        };
        Ok((g.value(fw.logits).to_vec(), rep))
    }

    /// Eval-mode logits for a batch, `B x n_classes` row-major.
    pub fn logits(&self, batch: &Batch) -> Result<Vec<F>> {
        let mut g = self.graph();
        let fw = self.net.forward_graph(&mut g, batch, &Mode::Eval)?;
        Ok(g.value(fw.logits).to_vec())
    }
}

#[cfg(test)]
mod tests;
