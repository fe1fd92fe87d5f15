//! Class-weighted cross-entropy, the label-prompt contrastive loss, their
//! combination, and macro F1.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::format::read_features;
use crate::data::{CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Real, Var};

/// Weight of the contrastive term.
pub const LAMBDA: f64 = 0.1;
/// Fixed softmax temperature of the contrastive similarities.
pub const TAU: f64 = 0.07;
/// Macro F1 of the official challenge baseline, for side-by-side reporting.
pub const CHALLENGE_BASELINE_MACRO_F1: f64 = 0.25;
/// Tolerance on `|‖v_i‖ - 1|` accepted by the contrastive loss.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// `"A face expressing happiness"` and so on, in class order.
pub fn prompt_for(class_name: &str) -> String {
    format!("A face expressing {}", class_name.to_lowercase())
}

/// One prompt embedding per class, stored raw and row-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    prompts: Vec<String>,
    dim: usize,
    raw: Vec<f32>,
    normalized: Vec<f64>,
}

impl TextBank {
    /// `embeddings` holds `8 x dim` values in class order.
    pub fn new(embeddings: Vec<f32>, dim: usize) -> Result<Self> {
        if dim == 0 || embeddings.len() != NUM_CLASSES * dim {
            return Err(Error::Shape {
                op: "text_bank",
                lhs: vec![embeddings.len()],
                rhs: vec![NUM_CLASSES, dim],
            });
        }
        let mut normalized = Vec::with_capacity(embeddings.len());
        for row in embeddings.chunks(dim) {
            let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if !(norm > 1e-8) {
                return Err(Error::Degenerate { norm, eps: 1e-8 });
            }
            normalized.extend(row.iter().map(|&x| x as f64 / norm));
        }
        Ok(Self {
            prompts: CLASS_NAMES.iter().map(|c| prompt_for(c)).collect(),
            dim,
            raw: embeddings,
            normalized,
        })
    }

    /// Reads an `8 x D` feature file.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = read_features(path)?;
        if raw.rows != NUM_CLASSES {
            return Err(Error::Data(format!(
                "{}: text bank has {} rows, expected {NUM_CLASSES}",
                path.display(),
                raw.rows
            )));
        }
        Self::new(raw.data, raw.cols)
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn raw(&self) -> &[f32] {
        &self.raw
    }

    /// Unit-norm embedding `t_c`.
    pub fn row(&self, class: usize) -> &[f64] {
        &self.normalized[class * self.dim..(class + 1) * self.dim]
    }

    /// `D x B` matrix whose column `i` is `t_{labels[i]}`.
    fn columns_for<F: Real>(&self, labels: &[usize]) -> Result<Vec<F>> {
        let b = labels.len();
        let mut out = vec![F::zero(); self.dim * b];
        for (i, &y) in labels.iter().enumerate() {
            check_label(y)?;
            for (k, &t) in self.row(y).iter().enumerate() {
                out[k * b + i] = F::lit(t);
            }
        }
        Ok(out)
    }
}

fn check_label(y: usize) -> Result<()> {
    if y >= NUM_CLASSES {
        return Err(Error::Label {
            label: y,
            classes: NUM_CLASSES,
        });
    }
    Ok(())
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.len() != NUM_CLASSES || weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::Param(format!("class weights must be {NUM_CLASSES} positive values, got {weights:?}")));
    }
    Ok(())
}

/// Sum of the class weights applied to `labels`.
pub fn applied_weight(labels: &[usize], weights: &[f64]) -> Result<f64> {
    check_weights(weights)?;
    labels.iter().try_fold(0.0, |acc, &y| {
        check_label(y)?;
        Ok(acc + weights[y])
    })
}

/// Records `sum_i w_{y_i} CE_i / norm`. `norm` defaults to `sum_i w_{y_i}`;
/// accumulation passes the effective batch's total instead.
pub fn weighted_ce_graph<F: Real>(
    g: &mut Graph<'_, F>,
    logits: Var,
    labels: &[usize],
    weights: &[f64],
    norm: Option<f64>,
) -> Result<Var> {
    let norm = match norm {
        Some(n) => n,
        None => applied_weight(labels, weights)?,
    };
    check_weights(weights)?;
    if !(norm > 0.0) {
        return Err(Error::Param(format!("cross-entropy normalizer must be positive, got {norm}")));
    }
    let coefs: Vec<F> = labels
        .iter()
        .map(|&y| {
            check_label(y)?;
            Ok(F::lit(weights[y] / norm))
        })
        .collect::<Result<_>>()?;
    g.cross_entropy(logits, labels, &coefs)
}

/// Symmetric InfoNCE between projections `v` (`B x D`, unit rows) and the
/// bank rows selected by `labels`.
pub fn contrastive_graph<F: Real>(
    g: &mut Graph<'_, F>,
    v: Var,
    labels: &[usize],
    bank: &TextBank,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Param(format!("temperature must be positive, got {tau}")));
    }
    let shape = g.shape(v).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || shape[1] != bank.dim() {
        return Err(Error::Shape {
            op: "contrastive_loss",
            lhs: shape,
            rhs: vec![labels.len(), bank.dim()],
        });
    }
    for (i, row) in g.value(v).chunks(bank.dim()).enumerate() {
        let norm = row.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!("projection row {i} has norm {norm}, expected 1")));
        }
    }
    let t = g.constant(&[bank.dim(), labels.len()], bank.columns_for(labels)?)?;
    let sim = g.matmul(v, t)?;
    let sim = g.scale(sim, F::lit(1.0 / tau));
    g.contrastive(sim, labels)
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub cls: Var,
    pub con: Var,
    pub total: Var,
}

/// `L = L_cls + lambda * L_con` recorded on the tape.
#[allow(clippy::too_many_arguments)]
pub fn combined_graph<F: Real>(
    g: &mut Graph<'_, F>,
    logits: Var,
    v: Var,
    labels: &[usize],
    bank: &TextBank,
    weights: &[f64],
    lambda: f64,
    tau: f64,
) -> Result<LossVars> {
    let cls = weighted_ce_graph(g, logits, labels, weights, None)?;
    let con = contrastive_graph(g, v, labels, bank, tau)?;
    let scaled = g.scale(con, F::lit(lambda));
    let total = g.add(cls, scaled)?;
    Ok(LossVars { cls, con, total })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_con: f64,
    pub l_total: f64,
    pub lambda: f64,
}

fn scratch<R>(f: impl FnOnce(&mut Graph<'_, f64>) -> Result<R>) -> Result<R> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    f(&mut g)
}

fn rows(data: &[f64], cols: usize, op: &'static str) -> Result<usize> {
    if cols == 0 || !data.len().is_multiple_of(cols) || data.is_empty() {
        return Err(Error::Shape {
            op,
            lhs: vec![data.len()],
            rhs: vec![cols],
        });
    }
    Ok(data.len() / cols)
}

/// Weighted mean of per-sample cross-entropy; `logits` is `B x 8`.
pub fn weighted_cross_entropy(logits: &[f64], labels: &[usize], weights: &[f64]) -> Result<f64> {
    let b = rows(logits, NUM_CLASSES, "weighted_cross_entropy")?;
    scratch(|g| {
        let l = g.constant(&[b, NUM_CLASSES], logits.to_vec())?;
        let loss = weighted_ce_graph(g, l, labels, weights, None)?;
        g.scalar(loss)
    })
}

/// `v` is `B x D` with unit rows.
pub fn contrastive_loss(v: &[f64], labels: &[usize], bank: &TextBank, tau: f64) -> Result<f64> {
    let b = rows(v, bank.dim(), "contrastive_loss")?;
    scratch(|g| {
        let vv = g.constant(&[b, bank.dim()], v.to_vec())?;
        let loss = contrastive_graph(g, vv, labels, bank, tau)?;
        g.scalar(loss)
    })
}

#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    logits: &[f64],
    labels: &[usize],
    v: &[f64],
    bank: &TextBank,
    weights: &[f64],
    lambda: f64,
    tau: f64,
) -> Result<LossReport> {
    let b = rows(logits, NUM_CLASSES, "combined_loss")?;
    rows(v, bank.dim(), "combined_loss")?;
    scratch(|g| {
        let l = g.constant(&[b, NUM_CLASSES], logits.to_vec())?;
        let vv = g.constant(&[v.len() / bank.dim(), bank.dim()], v.to_vec())?;
        let vars = combined_graph(g, l, vv, labels, bank, weights, lambda, tau)?;
        Ok(LossReport {
            l_cls: g.scalar(vars.cls)?,
            l_con: g.scalar(vars.con)?,
            l_total: g.scalar(vars.total)?,
            lambda,
        })
    })
}

/// Index of the largest logit in each `n_classes`-wide row; ties go to the
/// lowest index.
pub fn argmax_rows<F: Real>(logits: &[F], n_classes: usize) -> Vec<usize> {
    logits
        .chunks(n_classes)
        .map(|row| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    /// Per-class F1 followed by the confusion matrix, columns aligned.
    pub fn to_table(&self) -> String {
        let w = CLASS_NAMES.iter().map(|c| c.len()).max().unwrap_or(0).max(9);
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}  {:>6}  {:>7}", "Class", "F1", "Support");
        for (c, name) in CLASS_NAMES.iter().enumerate() {
            let support: usize = self.confusion[c].iter().sum();
            let _ = writeln!(s, "{:<w$}  {:>6.4}  {:>7}", name, self.per_class_f1[c], support);
        }
        let _ = writeln!(s, "{:<w$}  {:>6.4}", "Macro F1", self.macro_f1);
        let _ = writeln!(s);
        let _ = write!(s, "{:<w$}", "true\\pred");
        for name in CLASS_NAMES {
            let _ = write!(s, " {:>5.5}", name);
        }
        let _ = writeln!(s);
        for (c, name) in CLASS_NAMES.iter().enumerate() {
            let _ = write!(s, "{:<w$}", name);
            for &n in &self.confusion[c] {
                let _ = write!(s, " {:>5}", n);
            }
            let _ = writeln!(s);
        }
        s
    }
}

/// Unweighted mean of the eight per-class F1 scores; a class with no true
/// or predicted samples scores 0.
pub fn macro_f1(predictions: &[usize], labels: &[usize]) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            op: "macro_f1",
            lhs: vec![predictions.len()],
            rhs: vec![labels.len()],
        });
    }
    if labels.is_empty() {
        return Err(Error::Data("macro_f1 needs at least one sample".into()));
    }
    let mut confusion = vec![vec![0usize; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &y) in predictions.iter().zip(labels) {
        check_label(p)?;
        check_label(y)?;
        confusion[y][p] += 1;
    }
    let per_class_f1: Vec<f64> = (0..NUM_CLASSES)
        .map(|c| {
            let tp = confusion[c][c];
            let fn_ = confusion[c].iter().sum::<usize>() - tp;
            let fp = (0..NUM_CLASSES).map(|r| confusion[r][c]).sum::<usize>() - tp;
            let den = 2 * tp + fp + fn_;
            if den == 0 {
                0.0
            } else {
                2.0 * tp as f64 / den as f64
            }
        })
        .collect();
    Ok(MetricsReport {
        macro_f1: per_class_f1.iter().sum::<f64>() / NUM_CLASSES as f64,
        per_class_f1,
        confusion,
    })
}
