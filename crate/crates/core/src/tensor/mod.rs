//! Dense row-major tensors with a tape-based reverse-mode differentiator.
//!
//! The kernel only carries the operations the expression head needs. Values
//! are stored as `f32` during training; every operation is generic over
//! [`Real`] so the finite-difference checker can replay the same graph in
//! `f64`.

mod dropout;
mod gemm;
mod gradcheck;
mod graph;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

use crate::error::{Error, Result};

pub use dropout::{DropoutStream, RowKeys};
pub use gemm::{gemm, MatRef};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, Var};

/// Floating point scalar usable by the kernel.
pub trait Real: Float + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static {
    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`: every strided access implied
    /// by the dimensions and strides must stay inside the pointed-to buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn from_f32(x: f32) -> Self;

    fn as_f32(self) -> f32;
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn lit(x: f64) -> f32 {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn from_f32(x: f32) -> f32 {
        x
    }

    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn lit(x: f64) -> f64 {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn from_f32(x: f32) -> f64 {
        x as f64
    }

    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Dense tensor: row-major values plus an optional gradient slot of the same
/// shape. The slot exists exactly when `requires_grad` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Param(format!("invalid tensor shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![F::zero(); numel])
    }

    pub fn scalar(x: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        if on {
            if self.grad.is_none() {
                self.grad = Some(vec![F::zero(); self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [F]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = F::zero());
        }
    }

    /// Adds `delta` into the gradient slot.
    pub fn accumulate_grad(&mut self, delta: &[F]) -> Result<()> {
        let Some(g) = self.grad.as_mut() else {
            return Err(Error::Contract(
                "accumulating into a tensor without requires_grad".into(),
            ));
        };
        if delta.len() != g.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        g.iter_mut().zip(delta).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::lit(x.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|x| G::lit(x.as_f64())).collect()),
        }
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }
}

/// Handle of a learnable tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learnable tensors in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.tensors
            .iter()
            .zip(&self.names)
            .enumerate()
            .map(|(i, (t, n))| (ParamId(i), n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.zero_grad());
    }

    /// Adds per-parameter gradients produced by [`Graph::param_grads`].
    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<F>)]) -> Result<()> {
        for (id, g) in grads {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Partition of the rows of a stacked matrix into consecutive sequences.
///
/// A batch of ragged sequences is stored as one `(sum of lengths) x D`
/// matrix; the layout records where each sequence starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    lens: Vec<usize>,
    offsets: Vec<usize>,
}

impl SeqLayout {
    pub fn new(lens: Vec<usize>) -> Result<Self> {
        if lens.is_empty() {
            return Err(Error::EmptySequence("SeqLayout"));
        }
        if lens.contains(&0) {
            return Err(Error::EmptySequence("SeqLayout"));
        }
        let mut offsets = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in &lens {
            offsets.push(acc);
            acc += l;
        }
        Ok(Self { lens, offsets })
    }

    pub fn single(len: usize) -> Result<Self> {
        Self::new(vec![len])
    }

    pub fn uniform(count: usize, len: usize) -> Result<Self> {
        Self::new(vec![len; count])
    }

    pub fn num_seqs(&self) -> usize {
        self.lens.len()
    }

    pub fn total_rows(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn max_len(&self) -> usize {
        self.lens.iter().copied().max().unwrap_or(0)
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    /// Row range of sequence `s`.
    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s] + self.lens[s]
    }

    /// Sequence index and in-sequence position for every row.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.lens
            .iter()
            .enumerate()
            .flat_map(|(s, &l)| (0..l).map(move |t| (s, t)))
    }
}
