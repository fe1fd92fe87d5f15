use std::f64::consts::PI;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real};

/// Decoupled-weight-decay Adam. Moments are kept per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros = || params.iter().map(|(_, _, p)| vec![F::zero(); p.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update from the gradients currently held in `params`.
    /// Non-finite gradients abort before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<F>, lr: f64, cfg: &TrainConfig) -> Result<()> {
        for (_, name, p) in params.iter() {
            let g = p.grad().unwrap_or(&[]);
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGrad(format!("{name}[{i}] = {}", g[i])));
            }
        }
        self.t += 1;
        let [b1, b2] = cfg.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (b1f, b2f) = (F::lit(b1), F::lit(b2));
        let (one_b1, one_b2) = (F::lit(1.0 - b1), F::lit(1.0 - b2));
        let (bc1, bc2) = (F::lit(bc1), F::lit(bc2));
        let (lr, wd, eps) = (F::lit(lr), F::lit(cfg.weight_decay), F::lit(cfg.eps_opt));
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let p = params.get_mut(id);
            let g = match p.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (i, theta) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1f * m[i] + one_b1 * g[i];
                v[i] = b2f * v[i] + one_b2 * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *theta);
            }
        }
        Ok(())
    }
}

/// Per-epoch cosine annealing from `lr` at epoch 0 to `lr_min` at the last
/// epoch.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.epochs <= 1 {
        return cfg.lr;
    }
    let frac = epoch as f64 / (cfg.epochs - 1) as f64;
    cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + (PI * frac).cos())
}
