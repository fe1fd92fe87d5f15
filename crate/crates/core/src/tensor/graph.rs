//! Operation tape and reverse sweep.

use super::dropout::{DropoutStream, RowKeys};
use super::gemm::{gemm, MatRef};
use super::{ParamId, ParamStore, Real, SeqLayout};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        c_in: usize,
        first_tap: usize,
        shifts: Vec<usize>,
        layout: SeqLayout,
        col: Vec<F>,
    },
    MeanPool {
        x: Var,
        layout: SeqLayout,
    },
    ConcatCols(Var, Var),
    L2Normalize {
        x: Var,
        norms: Vec<F>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_layout: SeqLayout,
        k_layout: SeqLayout,
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        coefs: Vec<F>,
        probs: Vec<F>,
    },
    Contrastive {
        sim: Var,
        valid: Vec<bool>,
        p_row: Vec<F>,
        p_col: Vec<F>,
    },
    DotConst {
        x: Var,
        coeffs: Vec<F>,
    },
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Relu(x) | Op::Softmax(x) => vec![*x],
            Op::Dropout { x, .. }
            | Op::MeanPool { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::DotConst { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv1d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Contrastive { sim, .. } => vec![*sim],
        }
    }
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss with respect to `v`, if `v` was reached.
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Records operations in topological order; each node's inputs precede it.
pub struct Graph<'p, F: Real> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
}

fn zeros<F: Real>(n: usize) -> Vec<F> {
    vec![F::zero(); n]
}

fn buf<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| zeros(len))
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

fn softmax_inplace<F: Real>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>) -> Var {
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Input | Op::Param(_) => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf_shape(shape: &[usize], len: usize, op: &'static str) -> Result<()> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != len {
            return Err(Error::Shape {
                op,
                lhs: shape.to_vec(),
                rhs: vec![len],
            });
        }
        Ok(())
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var> {
        Self::leaf_shape(shape, data.len(), "constant")?;
        Ok(self.push(shape.to_vec(), data, Op::Constant))
    }

    /// Leaf that is not a parameter but whose gradient is wanted.
    pub fn input(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var> {
        Self::leaf_shape(shape, data.len(), "input")?;
        Ok(self.push(shape.to_vec(), data, Op::Input))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let shape = self.params.get(id).shape().to_vec();
        self.push(shape, Vec::new(), Op::Param(id))
    }

    pub fn value(&self, v: Var) -> &[F] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id).data(),
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<F> {
        let val = self.value(v);
        if val.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, found shape {:?}",
                self.shape(v)
            )));
        }
        Ok(val[0])
    }

    /// Attention weights saved by an [`Graph::attention`] node, laid out per
    /// sequence then per head as contiguous `T_q x T_k` blocks.
    pub fn attention_probs(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape {
                op,
                lhs: self.shape(v).to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn vec_len(&self, v: Var, op: &'static str) -> Result<usize> {
        match *self.shape(v) {
            [n] => Ok(n),
            [1, n] => Ok(n),
            _ => Err(Error::Shape {
                op,
                lhs: self.shape(v).to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Self::mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = zeros(m * n);
        gemm(
            F::one(),
            MatRef::rm(self.value(a), m, k),
            MatRef::rm(self.value(b), k, n),
            F::zero(),
            &mut out,
            n,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<F> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<F> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    /// Adds a length-`N` vector to every row of an `M x N` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_bias")?;
        if self.vec_len(bias, "add_bias")? != n {
            return Err(Self::mismatch("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for r in 0..m {
            add_into(&mut out[r * n..(r + 1) * n], b);
        }
        Ok(self.push(vec![m, n], out, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(F::zero())).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x))
    }

    /// Inverted dropout on a 2-D tensor. `stream == None` is eval mode
    /// (identity, no node recorded).
    pub fn dropout(
        &mut self,
        x: Var,
        p: f64,
        stream: Option<&DropoutStream>,
        site: u64,
        rows: &RowKeys,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout probability {p} outside [0, 1)")));
        }
        let Some(stream) = stream else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let (m, n) = self.dims2(x, "dropout")?;
        if rows.len() != m {
            return Err(Self::mismatch("dropout", self.shape(x), &[rows.len()]));
        }
        let keep_scale = F::lit(1.0 / (1.0 - p));
        let mut mask = zeros(m * n);
        for (r, &key) in rows.0.iter().enumerate() {
            for c in 0..n {
                if stream.keep(site, key, c, p) {
                    mask[r * n + c] = keep_scale;
                }
            }
        }
        let out = self.value(x).iter().zip(&mask).map(|(&v, &k)| v * k).collect();
        Ok(self.push(vec![m, n], out, Op::Dropout { x, mask }))
    }

    /// Row-wise layer normalization over the feature axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (t, d) = self.dims2(x, "layer_norm")?;
        if d < 2 {
            return Err(Error::Param(format!("layer_norm needs D >= 2, got {d}")));
        }
        if self.vec_len(gamma, "layer_norm")? != d || self.vec_len(beta, "layer_norm")? != d {
            return Err(Self::mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = F::lit(eps);
        let dn = F::lit(d as f64);
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = zeros(t * d);
        let mut rstd = zeros(t);
        let mut out = zeros(t * d);
        for r in 0..t {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push(
            vec![t, d],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Dilated causal 1-D convolution over each sequence of `layout`.
    ///
    /// `w` has shape `k x C_in x C_out`. Each sequence is implicitly
    /// left-padded with `(k-1)*dilation` zero frames, so output frame `t`
    /// sees input frames `t - (k-1)*dilation ..= t` only.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, b: Var, dilation: usize, layout: &SeqLayout) -> Result<Var> {
        if dilation == 0 {
            return Err(Error::Param("dilation must be positive".into()));
        }
        let (rows, c_in) = self.dims2(x, "conv1d_causal")?;
        let (k, wc_in, c_out) = match *self.shape(w) {
            [k, ci, co] => (k, ci, co),
            _ => return Err(Self::mismatch("conv1d_causal", self.shape(x), self.shape(w))),
        };
        if wc_in != c_in || self.vec_len(b, "conv1d_causal")? != c_out {
            return Err(Self::mismatch("conv1d_causal", self.shape(x), self.shape(w)));
        }
        if layout.total_rows() != rows {
            return Err(Self::mismatch("conv1d_causal", self.shape(x), &[layout.total_rows()]));
        }
        let shifts: Vec<usize> = (0..k).map(|j| (k - 1 - j) * dilation).collect();
        // taps whose shift reaches past every sequence only ever see padding
        let max_len = layout.max_len();
        let first_tap = (0..k).find(|&j| shifts[j] < max_len).unwrap_or(k - 1);
        let taps = k - first_tap;
        let width = taps * c_in;
        let xs = self.value(x);
        let mut col = zeros(rows * width);
        for (r, (s, t)) in layout.positions().enumerate() {
            let base = layout.range(s).start;
            for jj in 0..taps {
                let shift = shifts[first_tap + jj];
                if t >= shift {
                    let src = base + t - shift;
                    col[r * width + jj * c_in..r * width + (jj + 1) * c_in]
                        .copy_from_slice(&xs[src * c_in..(src + 1) * c_in]);
                }
            }
        }
        let ws = &self.value(w)[first_tap * c_in * c_out..];
        let bias = self.value(b);
        let mut out = zeros(rows * c_out);
        for r in 0..rows {
            out[r * c_out..(r + 1) * c_out].copy_from_slice(bias);
        }
        gemm(
            F::one(),
            MatRef::rm(&col, rows, width),
            MatRef::rm(ws, width, c_out),
            F::one(),
            &mut out,
            c_out,
        );
        Ok(self.push(
            vec![rows, c_out],
            out,
            Op::Conv1d {
                x,
                w,
                b,
                c_in,
                first_tap,
                shifts,
                layout: layout.clone(),
                col,
            },
        ))
    }

    /// Mean over the time axis of each sequence: `(sum T) x D -> B x D`.
    pub fn mean_pool_time(&mut self, x: Var, layout: &SeqLayout) -> Result<Var> {
        let (rows, d) = self.dims2(x, "mean_pool_time")?;
        if rows == 0 {
            return Err(Error::EmptySequence("mean_pool_time"));
        }
        if layout.total_rows() != rows {
            return Err(Self::mismatch("mean_pool_time", self.shape(x), &[layout.total_rows()]));
        }
        let xs = self.value(x);
        let bsz = layout.num_seqs();
        let mut out = zeros(bsz * d);
        for s in 0..bsz {
            let range = layout.range(s);
            let inv = F::one() / F::lit(range.len() as f64);
            let dst = &mut out[s * d..(s + 1) * d];
            for r in range {
                add_into(dst, &xs[r * d..(r + 1) * d]);
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(self.push(
            vec![bsz, d],
            out,
            Op::MeanPool {
                x,
                layout: layout.clone(),
            },
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = self.dims2(a, "concat_cols")?;
        let (m2, nb) = self.dims2(b, "concat_cols")?;
        if m != m2 {
            return Err(Self::mismatch("concat_cols", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * (na + nb));
        for r in 0..m {
            out.extend_from_slice(&va[r * na..(r + 1) * na]);
            out.extend_from_slice(&vb[r * nb..(r + 1) * nb]);
        }
        Ok(self.push(vec![m, na + nb], out, Op::ConcatCols(a, b)))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims2(x, "l2_normalize")?;
        let xs = self.value(x);
        let mut norms = zeros(m);
        let mut out = zeros(m * d);
        for r in 0..m {
            let row = &xs[r * d..(r + 1) * d];
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            if n.as_f64() <= eps {
                return Err(Error::Degenerate { norm: n.as_f64(), eps });
            }
            norms[r] = n;
            for c in 0..d {
                out[r * d + c] = row[c] / n;
            }
        }
        Ok(self.push(vec![m, d], out, Op::L2Normalize { x, norms }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "softmax_rows")?;
        let mut out = self.value(x).to_vec();
        for r in 0..m {
            softmax_inplace(&mut out[r * n..(r + 1) * n]);
        }
        Ok(self.push(vec![m, n], out, Op::Softmax(x)))
    }

    /// Multi-head scaled dot-product attention between already-projected
    /// queries, keys and values. Query sequence `s` attends only to key
    /// sequence `s`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_layout: &SeqLayout,
        k_layout: &SeqLayout,
    ) -> Result<Var> {
        let (rq, d) = self.dims2(q, "attention")?;
        let (rk, dk) = self.dims2(k, "attention")?;
        if rk == 0 {
            return Err(Error::EmptySequence("attention keys"));
        }
        if self.shape(k) != self.shape(v) || dk != d {
            return Err(Self::mismatch("attention", self.shape(k), self.shape(v)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Param(format!("{heads} heads do not divide width {d}")));
        }
        if q_layout.total_rows() != rq || k_layout.total_rows() != rk || q_layout.num_seqs() != k_layout.num_seqs() {
            return Err(Self::mismatch("attention", self.shape(q), self.shape(k)));
        }
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let total: usize = (0..q_layout.num_seqs())
            .map(|s| heads * q_layout.lens()[s] * k_layout.lens()[s])
            .sum();
        let mut probs = zeros(total);
        let mut out = zeros(rq * d);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut p_off = 0;
        for s in 0..q_layout.num_seqs() {
            let (qr, kr) = (q_layout.range(s), k_layout.range(s));
            let (tq, tk) = (qr.len(), kr.len());
            for h in 0..heads {
                let col0 = h * dh;
                let block = &mut probs[p_off..p_off + tq * tk];
                let q_h = head_view(qv, qr.start, tq, d, col0, dh);
                let k_h = head_view(kv, kr.start, tk, d, col0, dh);
                gemm(scale, q_h, k_h.t(), F::zero(), block, tk);
                for r in 0..tq {
                    softmax_inplace(&mut block[r * tk..(r + 1) * tk]);
                }
                let v_h = head_view(vv, kr.start, tk, d, col0, dh);
                gemm(
                    F::one(),
                    MatRef::rm(block, tq, tk),
                    v_h,
                    F::zero(),
                    &mut out[qr.start * d + col0..],
                    d,
                );
                p_off += tq * tk;
            }
        }
        Ok(self.push(
            vec![rq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                q_layout: q_layout.clone(),
                k_layout: k_layout.clone(),
                probs,
            },
        ))
    }

    /// `sum_i coefs[i] * -log softmax(logits_i)[labels[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], coefs: &[F]) -> Result<Var> {
        let (b, c) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != b || coefs.len() != b {
            return Err(Self::mismatch("cross_entropy", self.shape(logits), &[labels.len(), coefs.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Label { label: bad, classes: c });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = F::zero();
        for i in 0..b {
            let row = &mut probs[i * c..(i + 1) * c];
            let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
            loss += coefs[i] * (lse - row[labels[i]]);
            softmax_inplace(row);
        }
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                coefs: coefs.to_vec(),
                probs,
            },
        ))
    }

    /// Symmetric InfoNCE over a square similarity matrix with diagonal
    /// positives. Off-diagonal pairs that share a label are removed from
    /// both the row and the column softmax.
    pub fn contrastive(&mut self, sim: Var, labels: &[usize]) -> Result<Var> {
        let (b, b2) = self.dims2(sim, "contrastive")?;
        if b != b2 || labels.len() != b {
            return Err(Self::mismatch("contrastive", self.shape(sim), &[labels.len()]));
        }
        let s = self.value(sim);
        let valid: Vec<bool> = (0..b * b)
            .map(|ij| {
                let (i, j) = (ij / b, ij % b);
                i == j || labels[i] != labels[j]
            })
            .collect();
        let mut p_row = zeros(b * b);
        let mut p_col = zeros(b * b);
        let mut loss = F::zero();
        let half_inv_b = F::lit(0.5 / b as f64);
        for i in 0..b {
            let idx = |j: usize| i * b + j;
            let max = (0..b).filter(|&j| valid[idx(j)]).fold(F::neg_infinity(), |m, j| m.max(s[idx(j)]));
            let z = (0..b).filter(|&j| valid[idx(j)]).map(|j| (s[idx(j)] - max).exp()).sum::<F>();
            for j in (0..b).filter(|&j| valid[idx(j)]) {
                p_row[idx(j)] = (s[idx(j)] - max).exp() / z;
            }
            loss += half_inv_b * (z.ln() + max - s[idx(i)]);
        }
        for j in 0..b {
            let idx = |i: usize| i * b + j;
            let max = (0..b).filter(|&i| valid[idx(i)]).fold(F::neg_infinity(), |m, i| m.max(s[idx(i)]));
            let z = (0..b).filter(|&i| valid[idx(i)]).map(|i| (s[idx(i)] - max).exp()).sum::<F>();
            for i in (0..b).filter(|&i| valid[idx(i)]) {
                p_col[idx(i)] = (s[idx(i)] - max).exp() / z;
            }
            loss += half_inv_b * (z.ln() + max - s[idx(j)]);
        }
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Contrastive {
                sim,
                valid,
                p_row,
                p_col,
            },
        ))
    }

    /// `sum(x * coeffs)` with constant coefficients.
    pub fn dot_const(&mut self, x: Var, coeffs: Vec<F>) -> Result<Var> {
        if coeffs.len() != self.value(x).len() {
            return Err(Self::mismatch("dot_const", self.shape(x), &[coeffs.len()]));
        }
        let s = self.value(x).iter().zip(&coeffs).map(|(&a, &b)| a * b).sum();
        Ok(self.push(vec![1], vec![s], Op::DotConst { x, coeffs }))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, found shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Sums the gradients of every parameter node, grouped by parameter.
    pub fn param_grads(&self, grads: &Gradients<F>) -> Vec<(ParamId, Vec<F>)> {
        let mut out: Vec<(ParamId, Vec<F>)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = grads.grads[i].as_ref() {
                    match out.iter_mut().find(|(p, _)| *p == id) {
                        Some((_, acc)) => add_into(acc, g),
                        None => out.push((id, g.clone())),
                    }
                }
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].shape.iter().product()
    }

    fn backward_node(&self, node: &Node<F>, dy: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.wants(a) {
                    let da = buf(grads, a, m * k);
                    gemm(F::one(), MatRef::rm(dy, m, n), MatRef::rm_t(self.value(b), k, n), F::one(), da, k);
                }
                if self.wants(b) {
                    let db = buf(grads, b, k * n);
                    gemm(F::one(), MatRef::rm_t(self.value(a), m, k), MatRef::rm(dy, m, n), F::one(), db, n);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        add_into(buf(grads, v, dy.len()), dy);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let other = self.value(b);
                    let da = buf(grads, a, dy.len());
                    da.iter_mut().zip(dy).zip(other).for_each(|((g, &d), &o)| *g += d * o);
                }
                if self.wants(b) {
                    let other = self.value(a);
                    let db = buf(grads, b, dy.len());
                    db.iter_mut().zip(dy).zip(other).for_each(|((g, &d), &o)| *g += d * o);
                }
            }
            &Op::AddBias(x, bias) => {
                if self.wants(x) {
                    add_into(buf(grads, x, dy.len()), dy);
                }
                if self.wants(bias) {
                    let n = self.numel(bias);
                    let db = buf(grads, bias, n);
                    for row in dy.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Scale(x, c) => {
                if self.wants(x) {
                    let dx = buf(grads, x, dy.len());
                    dx.iter_mut().zip(dy).for_each(|(a, &g)| *a += c * g);
                }
            }
            &Op::Relu(x) => {
                if self.wants(x) {
                    let dx = buf(grads, x, dy.len());
                    for ((a, &g), &y) in dx.iter_mut().zip(dy).zip(&node.value) {
                        if y > F::zero() {
                            *a += g;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    let dx = buf(grads, *x, dy.len());
                    dx.iter_mut().zip(dy).zip(mask).for_each(|((a, &g), &k)| *a += g * k);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.shape[1];
                let g = self.value(*gamma);
                if self.wants(*gamma) {
                    let dg = buf(grads, *gamma, d);
                    for (row_dy, row_h) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += row_dy[c] * row_h[c];
                        }
                    }
                }
                if self.wants(*beta) {
                    let db = buf(grads, *beta, d);
                    for row in dy.chunks(d) {
                        add_into(db, row);
                    }
                }
                if self.wants(*x) {
                    let dn = F::lit(d as f64);
                    let dx = buf(grads, *x, dy.len());
                    let mut dh = vec![F::zero(); d];
                    for r in 0..rstd.len() {
                        let row_dy = &dy[r * d..(r + 1) * d];
                        let row_h = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = F::zero();
                        let mut mean_dhh = F::zero();
                        for c in 0..d {
                            dh[c] = row_dy[c] * g[c];
                            mean_dh += dh[c];
                            mean_dhh += dh[c] * row_h[c];
                        }
                        mean_dh /= dn;
                        mean_dhh /= dn;
                        for c in 0..d {
                            dx[r * d + c] += rstd[r] * (dh[c] - mean_dh - row_h[c] * mean_dhh);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                c_in,
                first_tap,
                shifts,
                layout,
                col,
            } => {
                let (c_in, first_tap) = (*c_in, *first_tap);
                let rows = node.shape[0];
                let c_out = node.shape[1];
                let k = shifts.len();
                let taps = k - first_tap;
                let width = taps * c_in;
                if self.wants(*w) {
                    let dw = buf(grads, *w, k * c_in * c_out);
                    gemm(
                        F::one(),
                        MatRef::rm_t(col, rows, width),
                        MatRef::rm(dy, rows, c_out),
                        F::one(),
                        &mut dw[first_tap * c_in * c_out..],
                        c_out,
                    );
                }
                if self.wants(*b) {
                    let db = buf(grads, *b, c_out);
                    for row in dy.chunks(c_out) {
                        add_into(db, row);
                    }
                }
                if self.wants(*x) {
                    let ws = &self.value(*w)[first_tap * c_in * c_out..];
                    let mut dcol = zeros(rows * width);
                    gemm(
                        F::one(),
                        MatRef::rm(dy, rows, c_out),
                        MatRef::rm_t(ws, width, c_out),
                        F::zero(),
                        &mut dcol,
                        width,
                    );
                    let dx = buf(grads, *x, rows * c_in);
                    for (r, (s, t)) in layout.positions().enumerate() {
                        let base = layout.range(s).start;
                        for jj in 0..taps {
                            let shift = shifts[first_tap + jj];
                            if t >= shift {
                                let dst = base + t - shift;
                                add_into(
                                    &mut dx[dst * c_in..(dst + 1) * c_in],
                                    &dcol[r * width + jj * c_in..r * width + (jj + 1) * c_in],
                                );
                            }
                        }
                    }
                }
            }
            Op::MeanPool { x, layout } => {
                if self.wants(*x) {
                    let d = node.shape[1];
                    let dx = buf(grads, *x, layout.total_rows() * d);
                    for s in 0..layout.num_seqs() {
                        let range = layout.range(s);
                        let inv = F::one() / F::lit(range.len() as f64);
                        let g = &dy[s * d..(s + 1) * d];
                        for r in range {
                            dx[r * d..(r + 1) * d]
                                .iter_mut()
                                .zip(g)
                                .for_each(|(a, &v)| *a += v * inv);
                        }
                    }
                }
            }
            &Op::ConcatCols(a, b) => {
                let m = node.shape[0];
                let (na, nb) = (self.shape(a)[1], self.shape(b)[1]);
                let n = na + nb;
                if self.wants(a) {
                    let da = buf(grads, a, m * na);
                    for r in 0..m {
                        add_into(&mut da[r * na..(r + 1) * na], &dy[r * n..r * n + na]);
                    }
                }
                if self.wants(b) {
                    let db = buf(grads, b, m * nb);
                    for r in 0..m {
                        add_into(&mut db[r * nb..(r + 1) * nb], &dy[r * n + na..(r + 1) * n]);
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if self.wants(*x) {
                    let d = node.shape[1];
                    let dx = buf(grads, *x, dy.len());
                    for (r, &n) in norms.iter().enumerate() {
                        let y = &node.value[r * d..(r + 1) * d];
                        let g = &dy[r * d..(r + 1) * d];
                        let dot: F = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                        for c in 0..d {
                            dx[r * d + c] += (g[c] - y[c] * dot) / n;
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                if self.wants(x) {
                    let n = node.shape[1];
                    let dx = buf(grads, x, dy.len());
                    for (r, (y, g)) in node.value.chunks(n).zip(dy.chunks(n)).enumerate() {
                        let dot: F = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                        for c in 0..n {
                            dx[r * n + c] += y[c] * (g[c] - dot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                q_layout,
                k_layout,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, q_layout, k_layout, probs, dy, grads),
            Op::CrossEntropy {
                logits,
                labels,
                coefs,
                probs,
            } => {
                if self.wants(*logits) {
                    let c = self.shape(*logits)[1];
                    let dx = buf(grads, *logits, probs.len());
                    for (i, &y) in labels.iter().enumerate() {
                        let w = dy[0] * coefs[i];
                        for j in 0..c {
                            let target = if j == y { F::one() } else { F::zero() };
                            dx[i * c + j] += w * (probs[i * c + j] - target);
                        }
                    }
                }
            }
            Op::Contrastive {
                sim,
                valid,
                p_row,
                p_col,
            } => {
                if self.wants(*sim) {
                    let b = self.shape(*sim)[0];
                    let w = dy[0] * F::lit(0.5 / b as f64);
                    let ds = buf(grads, *sim, b * b);
                    for ij in 0..b * b {
                        if !valid[ij] {
                            continue;
                        }
                        let diag = if ij / b == ij % b { F::lit(2.0) } else { F::zero() };
                        ds[ij] += w * (p_row[ij] + p_col[ij] - diag);
                    }
                }
            }
            Op::DotConst { x, coeffs } => {
                if self.wants(*x) {
                    let dx = buf(grads, *x, coeffs.len());
                    dx.iter_mut().zip(coeffs).for_each(|(a, &c)| *a += dy[0] * c);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_layout: &SeqLayout,
        k_layout: &SeqLayout,
        probs: &[F],
        dy: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let d = self.shape(q)[1];
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let (rq, rk) = (q_layout.total_rows(), k_layout.total_rows());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = zeros(rq * d);
        let mut dk = zeros(rk * d);
        let mut dv = zeros(rk * d);
        let mut p_off = 0;
        for s in 0..q_layout.num_seqs() {
            let (qr, kr) = (q_layout.range(s), k_layout.range(s));
            let (tq, tk) = (qr.len(), kr.len());
            let mut dp = zeros(tq * tk);
            for h in 0..heads {
                let col0 = h * dh;
                let p = &probs[p_off..p_off + tq * tk];
                let strided = |data, start, rows| head_view(data, start, rows, d, col0, dh);
                let dy_h = strided(dy, qr.start, tq);
                // dP = dO V^T
                gemm(F::one(), dy_h, strided(vv, kr.start, tk).t(), F::zero(), &mut dp, tk);
                // dV += P^T dO
                gemm(
                    F::one(),
                    MatRef::rm_t(p, tq, tk),
                    dy_h,
                    F::one(),
                    &mut dv[kr.start * d + col0..],
                    d,
                );
                // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                for r in 0..tq {
                    let pr = &p[r * tk..(r + 1) * tk];
                    let dr = &mut dp[r * tk..(r + 1) * tk];
                    let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for c in 0..tk {
                        dr[c] = pr[c] * (dr[c] - dot) * scale;
                    }
                }
                gemm(
                    F::one(),
                    MatRef::rm(&dp, tq, tk),
                    strided(kv, kr.start, tk),
                    F::one(),
                    &mut dq[qr.start * d + col0..],
                    d,
                );
                gemm(
                    F::one(),
                    MatRef::rm_t(&dp, tq, tk),
                    strided(qv, qr.start, tq),
                    F::one(),
                    &mut dk[kr.start * d + col0..],
                    d,
                );
                p_off += tq * tk;
            }
        }
        for (var, g) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                add_into(buf(grads, var, g.len()), &g);
            }
        }
    }
}

/// Columns `col0..col0+dh` of rows `start..start+rows` in a row-major matrix
/// of width `d`.
fn head_view<F>(data: &[F], start: usize, rows: usize, d: usize, col0: usize, dh: usize) -> MatRef<'_, F> {
    MatRef {
        data: &data[start * d + col0..],
        rows,
        cols: dh,
        rs: d,
        cs: 1,
    }
}
