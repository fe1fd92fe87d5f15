use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, TrainConfig};
use crate::data::{WindowSample, WindowSize};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{TextBank, CHALLENGE_BASELINE_MACRO_F1};

/// Splits for one window length.
pub struct AblationData {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Option<Vec<WindowSample>>,
    pub bank: TextBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub window: usize,
    /// Best validation macro F1 over the run.
    pub macro_f1: f64,
    pub best_epoch: usize,
    /// Test macro F1 of the best checkpoint, when a test split was given.
    pub test_macro_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub challenge: String,
    pub metric: String,
    pub baseline: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Plain-text table: Challenge | Metric | Method | Result.
    pub fn to_table(&self) -> String {
        let mut methods = vec![("Baseline".to_string(), self.baseline)];
        methods.extend(
            self.rows
                .iter()
                .map(|r| (format!("Ours ({} frames)", r.window), r.macro_f1)),
        );
        let method_w = methods.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max("Method".len());
        let chal_w = self.challenge.len().max("Challenge".len());
        let metric_w = self.metric.len().max("Metric".len());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<chal_w$}  {:<metric_w$}  {:<method_w$}  Result",
            "Challenge", "Metric", "Method"
        );
        let _ = writeln!(out, "{}", "-".repeat(chal_w + metric_w + method_w + 12));
        for (i, (m, v)) in methods.iter().enumerate() {
            let (c, k) = if i == 0 {
                (self.challenge.as_str(), self.metric.as_str())
            } else {
                ("", "")
            };
            let _ = writeln!(out, "{c:<chal_w$}  {k:<metric_w$}  {m:<method_w$}  {v:.4}");
        }
        out
    }
}

/// Trains one model per window with everything else held fixed. Runs are
/// sequential. With `out_dir`, each run writes into `w{N}/` below it.
pub fn ablate_windows(
    windows: &[WindowSize],
    mut data_for: impl FnMut(WindowSize) -> Result<AblationData>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    if windows.is_empty() {
        return Err(Error::Config("no window sizes given".into()));
    }
    let mut rows = Vec::with_capacity(windows.len());
    for &w in windows {
        let data = data_for(w)?;
        if let Some(s) = data.train.iter().chain(&data.val).find(|s| s.visual.len() != w.frames()) {
            return Err(Error::Data(format!(
                "sample {} has {} frames, expected window {w}",
                s.sample_id,
                s.visual.len()
            )));
        }
        let run_dir = out_dir.map(|d| d.join(format!("w{w}")));
        let outcome = train(&data.train, &data.val, &data.bank, model_cfg, cfg, run_dir.as_deref())?;
        let test_macro_f1 = match &data.test {
            Some(t) if !t.is_empty() => Some(evaluate(&outcome.best, t, cfg.eval_batch_size)?.macro_f1),
            _ => None,
        };
        rows.push(AblationRow {
            window: w.frames(),
            macro_f1: outcome.best_val.macro_f1,
            best_epoch: outcome.best_epoch,
            test_macro_f1,
        });
    }
    Ok(AblationReport {
        challenge: "EXPR".into(),
        metric: "Macro F1".into(),
        baseline: CHALLENGE_BASELINE_MACRO_F1,
        rows,
    })
}
