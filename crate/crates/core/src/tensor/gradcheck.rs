//! Central finite-difference gradient oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Parameters with more coordinates than this are checked on a seeded
    /// random subset of this size. Must be at least 100.
    pub max_coords: usize,
    pub seed: u64,
    /// Coordinates whose error exceeds `tolerance` at step `h` are
    /// re-measured once at `h * refine`. A ReLU kink lying within `h` of the
    /// evaluation point breaks the central difference but not a smaller one,
    /// while a wrong analytic gradient fails at both. `None` disables this.
    pub refine: Option<f64>,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-4,
            max_coords: 256,
            seed: 42,
            refine: Some(1e-2),
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Coordinates that needed the refined step.
    pub refined: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences `(f(θ+h) - f(θ-h)) / 2h` for each parameter in `which`.
///
/// `f` must be a pure function of the parameter values; it is re-run twice
/// per checked coordinate.
pub fn grad_check<Fun>(
    params: &mut ParamStore<f64>,
    which: &[ParamId],
    mut f: Fun,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    Fun: FnMut(&mut Graph<'_, f64>) -> Result<Var>,
{
    if cfg.max_coords < 100 {
        return Err(Error::Param("grad_check needs max_coords >= 100".into()));
    }
    if !(cfg.h > 0.0) {
        return Err(Error::Param("grad_check step must be positive".into()));
    }
    let analytic = {
        let mut g = Graph::new(params);
        let out = f(&mut g)?;
        if g.value(out).len() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar-valued function, got shape {:?}",
                g.shape(out)
            )));
        }
        let grads = g.backward(out)?;
        g.param_grads(&grads)
    };
    let mut eval = |params: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(params);
        let out = f(&mut g)?;
        g.scalar(out)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = Vec::with_capacity(which.len());
    for &id in which {
        let n = params.get(id).numel();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let grad = analytic.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice());
        let mut worst = 0.0f64;
        let mut refined = 0;
        for &c in &coords {
            let mut central = |h: f64| -> Result<f64> {
                let orig = params.get(id).data()[c];
                params.get_mut(id).data_mut()[c] = orig + h;
                let plus = eval(params);
                params.get_mut(id).data_mut()[c] = orig - h;
                let minus = eval(params);
                params.get_mut(id).data_mut()[c] = orig;
                Ok((plus? - minus?) / (2.0 * h))
            };
            let a = grad.map_or(0.0, |g| g[c]);
            let mut err = rel_error(a, central(cfg.h)?);
            if let Some(r) = cfg.refine.filter(|_| err > cfg.tolerance) {
                err = rel_error(a, central(cfg.h * r)?);
                refined += 1;
            }
            worst = worst.max(err);
        }
        report.push(ParamCheck {
            name: params.name(id).to_string(),
            coords_checked: coords.len(),
            max_rel_error: worst,
            refined,
        });
    }
    Ok(GradCheckReport { params: report })
}
