//! Deterministic training: AdamW, per-epoch cosine schedule, gradient
//! accumulation, best-checkpoint selection and the window-size ablation.

mod ablation;
mod check;
mod optim;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassStats, WindowSample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{Batch, ModelConfig, ModelState, Mode};
use crate::objectives::{
    applied_weight, argmax_rows, combined_graph, contrastive_graph, macro_f1, weighted_ce_graph, MetricsReport,
    TextBank, LAMBDA, TAU,
};
use crate::tensor::{DropoutStream, Graph, ParamStore};

pub use ablation::{ablate_windows, AblationData, AblationReport, AblationRow};
pub use check::combined_loss_grad_check;
pub use optim::{cosine_lr, AdamW};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";
pub const RUN_LOG: &str = "run_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Micro-batches per optimizer step; the micro-batch holds
    /// `batch_size / accumulation_steps` samples.
    pub accumulation_steps: usize,
    pub seed: u64,
    pub lambda: f64,
    pub tau: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps_opt: f64,
    pub lr_min: f64,
    /// Batch size used for forward-only evaluation.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            epochs: 30,
            batch_size: 64,
            accumulation_steps: 4,
            seed: 42,
            lambda: LAMBDA,
            tau: TAU,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps_opt: 1e-8,
            lr_min: 0.0,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.accumulation_steps == 0 || self.eval_batch_size == 0 {
            return bad("epochs, batch_size, accumulation_steps and eval_batch_size must be positive".into());
        }
        if !self.batch_size.is_multiple_of(self.accumulation_steps) {
            return bad(format!(
                "batch_size {} is not divisible by accumulation_steps {}",
                self.batch_size, self.accumulation_steps
            ));
        }
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return bad(format!("need 0 <= lr_min <= lr and lr > 0, got lr={} lr_min={}", self.lr, self.lr_min));
        }
        if !(self.tau > 0.0) || !(self.lambda >= 0.0) {
            return bad(format!("need tau > 0 and lambda >= 0, got tau={} lambda={}", self.tau, self.lambda));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) || !(self.eps_opt > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("betas must lie in [0, 1), eps_opt > 0, weight_decay >= 0".into());
        }
        Ok(())
    }

    pub fn micro_batch(&self) -> usize {
        self.batch_size / self.accumulation_steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub l_total: f64,
    pub l_cls: f64,
    pub l_con: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: u64,
        lr: f64,
        l_total: f64,
        l_cls: f64,
        l_con: f64,
    },
    Epoch {
        epoch: usize,
        lr: f64,
        train: MetricsReport,
        val: MetricsReport,
        seconds: f64,
        best: bool,
    },
}

/// Training record, mirrored line by line to `run_log.jsonl` when the run
/// has an output directory.
#[derive(Debug, Default)]
pub struct RunLog {
    records: Vec<LogRecord>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            records: Vec::new(),
            sink: Some((path.to_path_buf(), BufWriter::new(f))),
        })
    }

    pub fn push(&mut self, r: LogRecord) -> Result<()> {
        if let Some((path, w)) = &mut self.sink {
            let line = serde_json::to_string(&r).map_err(|source| Error::Json {
                path: path.clone(),
                source,
            })?;
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            if matches!(r, LogRecord::Epoch { .. }) {
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = &mut self.sink {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    /// `(l_total, l_cls, l_con)` per optimizer step.
    pub fn loss_trace(&self) -> Vec<(f64, f64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step {
                    l_total, l_cls, l_con, ..
                } => Some((*l_total, *l_cls, *l_con)),
                _ => None,
            })
            .collect()
    }

    /// Learning rate of every epoch.
    pub fn lr_trace(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch { lr, .. } => Some(*lr),
                _ => None,
            })
            .collect()
    }

    pub fn val_f1_trace(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch { val, .. } => Some(val.macro_f1),
                _ => None,
            })
            .collect()
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<LogRecord>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .map(|l| {
                serde_json::from_str(l).map_err(|source| Error::Json {
                    path: path.to_path_buf(),
                    source,
                })
            })
            .collect()
    }
}

/// Owns the model, the optimizer and the step counter of one run.
pub struct Trainer<'a> {
    state: ModelState<f32>,
    opt: AdamW<f32>,
    cfg: TrainConfig,
    weights: Vec<f64>,
    bank: &'a TextBank,
    step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(state: ModelState<f32>, cfg: TrainConfig, weights: Vec<f64>, bank: &'a TextBank) -> Result<Self> {
        cfg.validate()?;
        if bank.dim() != state.config().text_dim {
            return Err(Error::Config(format!(
                "text bank width {} does not match model text_dim {}",
                bank.dim(),
                state.config().text_dim
            )));
        }
        if weights.len() != NUM_CLASSES {
            return Err(Error::Config(format!("expected {NUM_CLASSES} class weights")));
        }
        let opt = AdamW::new(state.params());
        Ok(Self {
            state,
            opt,
            cfg,
            weights,
            bank,
            step: 0,
        })
    }

    pub fn state(&self) -> &ModelState<f32> {
        &self.state
    }

    pub fn into_state(self) -> ModelState<f32> {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Fills the parameter gradient slots with the gradient of the
    /// effective-batch loss and returns the loss values. Predictions from the
    /// training forward pass are appended to `preds`.
    ///
    /// With more than one micro-batch the contrastive term, which couples all
    /// pairs of the effective batch, is handled in two passes: a forward-only
    /// pass collects every projection `v`, the full-batch contrastive
    /// gradient `dL/dv` is formed once, and each micro-batch then
    /// backpropagates its cross-entropy share plus `lambda * <dL/dv, v>`.
    /// Dropout masks are keyed by sample, so both passes and the
    /// single-batch computation see identical activations.
    pub fn compute_gradients(&mut self, items: &[(u64, &WindowSample)], preds: &mut Vec<usize>) -> Result<StepStats> {
        if items.is_empty() {
            return Err(Error::Data("empty training batch".into()));
        }
        let mode = Mode::Train(DropoutStream::new(self.cfg.seed, self.step));
        let labels: Vec<usize> = items.iter().map(|(_, s)| s.label).collect();
        let w_eff = applied_weight(&labels, &self.weights)?;
        let chunks: Vec<_> = items.chunks(self.cfg.micro_batch()).collect();
        let (lambda, tau) = (self.cfg.lambda, self.cfg.tau);
        let net = self.state.network().clone();
        let n_classes = net.config().n_classes;
        let dim = net.config().text_dim;
        self.state.params_mut().zero_grad();

        if chunks.len() == 1 {
            let batch = Batch::from_samples(items.iter().copied())?;
            let (stats, grads) = {
                let mut g = self.state.graph();
                let fw = net.forward_graph(&mut g, &batch, &mode)?;
                preds.extend(argmax_rows(g.value(fw.logits), n_classes));
                let vars = combined_graph(&mut g, fw.logits, fw.v, &labels, self.bank, &self.weights, lambda, tau)?;
                let stats = StepStats {
                    l_total: g.scalar(vars.total)?.into(),
                    l_cls: g.scalar(vars.cls)?.into(),
                    l_con: g.scalar(vars.con)?.into(),
                };
                let grads = g.backward(vars.total)?;
                (stats, g.param_grads(&grads))
            };
            self.state.params_mut().accumulate(&grads)?;
            return Ok(stats);
        }

        let batches: Vec<Batch> = chunks
            .iter()
            .map(|c| Batch::from_samples(c.iter().copied()))
            .collect::<Result<_>>()?;
        let mut contrastive = None;
        if lambda != 0.0 {
            let mut v_all = Vec::with_capacity(items.len() * dim);
            for b in &batches {
                let mut g = self.state.graph();
                let fw = net.forward_graph(&mut g, b, &mode)?;
                v_all.extend_from_slice(g.value(fw.v));
            }
            contrastive = Some(contrastive_value_and_grad(v_all, &labels, self.bank, tau)?);
        }
        let mut l_cls = 0.0;
        let mut v_seen = Vec::new();
        let mut offset = 0;
        for b in &batches {
            let grads = {
                let mut g = self.state.graph();
                let fw = net.forward_graph(&mut g, b, &mode)?;
                preds.extend(argmax_rows(g.value(fw.logits), n_classes));
                let ce = weighted_ce_graph(&mut g, fw.logits, &b.labels, &self.weights, Some(w_eff))?;
                l_cls += f64::from(g.scalar(ce)?);
                let loss = match &contrastive {
                    Some((_, dv)) => {
                        let rows = &dv[offset * dim..(offset + b.len()) * dim];
                        let coeffs = rows.iter().map(|&x| x * lambda as f32).collect();
                        let surrogate = g.dot_const(fw.v, coeffs)?;
                        g.add(ce, surrogate)?
                    }
                    None => {
                        v_seen.extend_from_slice(g.value(fw.v));
                        ce
                    }
                };
                let grads = g.backward(loss)?;
                g.param_grads(&grads)
            };
            self.state.params_mut().accumulate(&grads)?;
            offset += b.len();
        }
        let l_con = match contrastive {
            Some((l, _)) => l,
            None => contrastive_value_and_grad(v_seen, &labels, self.bank, tau)?.0,
        };
        Ok(StepStats {
            l_total: l_cls + lambda * l_con,
            l_cls,
            l_con,
        })
    }

    /// One optimizer step over an effective batch.
    pub fn train_step(&mut self, items: &[(u64, &WindowSample)], lr: f64, preds: &mut Vec<usize>) -> Result<StepStats> {
        let stats = self.compute_gradients(items, preds)?;
        if !stats.l_total.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                step: self.step as usize,
                loss: stats.l_total,
            });
        }
        self.opt.step(self.state.params_mut(), lr, &self.cfg)?;
        self.step += 1;
        Ok(stats)
    }
}

/// Full-batch contrastive loss and its gradient with respect to `v`.
fn contrastive_value_and_grad(v: Vec<f32>, labels: &[usize], bank: &TextBank, tau: f64) -> Result<(f64, Vec<f32>)> {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store);
    let vv = g.input(&[labels.len(), bank.dim()], v)?;
    let loss = contrastive_graph(&mut g, vv, labels, bank, tau)?;
    let grads = g.backward(loss)?;
    let dv = grads.wrt(vv).map(<[f32]>::to_vec).unwrap_or_default();
    Ok((g.scalar(loss)?.into(), dv))
}

/// Eval-mode predictions for `samples`, in order.
pub fn predict(state: &ModelState<f32>, samples: &[WindowSample], batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(samples.len());
    let n_classes = state.config().n_classes;
    for (k, chunk) in samples.chunks(batch_size.max(1)).enumerate() {
        let base = (k * batch_size) as u64;
        let batch = Batch::from_samples(chunk.iter().enumerate().map(|(i, s)| (base + i as u64, s)))?;
        preds.extend(argmax_rows(&state.logits(&batch)?, n_classes));
    }
    Ok(preds)
}

pub fn evaluate(state: &ModelState<f32>, samples: &[WindowSample], batch_size: usize) -> Result<MetricsReport> {
    let preds = predict(state, samples, batch_size)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    macro_f1(&preds, &labels)
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the highest validation macro F1.
    pub best: ModelState<f32>,
    pub best_epoch: usize,
    pub best_val: MetricsReport,
    pub final_state: ModelState<f32>,
    pub log: RunLog,
}

/// Full training run. With `out_dir`, writes `best.ckpt` and
/// `run_log.jsonl` there, and `last_good.ckpt` if the run diverges.
pub fn train(
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    bank: &TextBank,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if val_set.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let labels: Vec<usize> = train_set.iter().map(|s| s.label).collect();
    let stats = ClassStats::from_labels(&labels)?;
    let state = ModelState::<f32>::init(model_cfg.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(state, cfg.clone(), stats.weights.to_vec(), bank)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = match out_dir {
        Some(dir) => RunLog::to_file(&dir.join(RUN_LOG))?,
        None => RunLog::in_memory(),
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(usize, MetricsReport, ModelState<f32>)> = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, cfg);
        order.shuffle(&mut shuffle_rng);
        let mut train_preds = Vec::with_capacity(order.len());
        let mut train_labels = Vec::with_capacity(order.len());
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<(u64, &WindowSample)> = chunk.iter().map(|&i| (i as u64, &train_set[i])).collect();
            train_labels.extend(items.iter().map(|(_, s)| s.label));
            let step = trainer.steps();
            let result = trainer.train_step(&items, lr, &mut train_preds);
            let stats = match result {
                Ok(s) => s,
                Err(e) => {
                    if let Some(dir) = out_dir {
                        trainer.state().save(&dir.join(LAST_GOOD_CHECKPOINT))?;
                    }
                    log.flush()?;
                    return Err(match e {
                        Error::Diverged { step, loss, .. } => Error::Diverged { epoch, step, loss },
                        other => other,
                    });
                }
            };
            log.push(LogRecord::Step {
                epoch,
                step,
                lr,
                l_total: stats.l_total,
                l_cls: stats.l_cls,
                l_con: stats.l_con,
            })?;
        }
        let train_metrics = macro_f1(&train_preds, &train_labels)?;
        let val = evaluate(trainer.state(), val_set, cfg.eval_batch_size)?;
        let improved = best.as_ref().is_none_or(|(_, b, _)| val.macro_f1 > b.macro_f1);
        if improved {
            if let Some(dir) = out_dir {
                trainer.state().save(&dir.join(BEST_CHECKPOINT))?;
            }
            best = Some((epoch, val.clone(), trainer.state().clone()));
        }
        log.push(LogRecord::Epoch {
            epoch,
            lr,
            train: train_metrics,
            val,
            seconds: started.elapsed().as_secs_f64(),
            best: improved,
        })?;
    }
    log.flush()?;
    let (best_epoch, best_val, best_state) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: best_state,
        best_epoch,
        best_val,
        final_state: trainer.into_state(),
        log,
    })
}

#[cfg(test)]
mod tests;
