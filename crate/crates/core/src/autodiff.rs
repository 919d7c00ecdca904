//! Reverse-mode gradient tape over [`crate::tensor`] operations.
//!
//! A [`Tape`] records primitive operations define-by-run; [`Tape::backward`]
//! replays them in reverse. Every primitive used by the attention, streaming
//! and model forward paths is a variant of the closed [`Op`] enum with a
//! hand-written adjoint, so there is no way to run backward through an
//! unregistered operation — missing coverage is a compile error rather than a
//! silent zero.
//!
//! [`Tape::stop_gradient`] is identity in the forward direction and
//! contributes exactly zero to everything upstream in the backward direction;
//! streaming caches are inserted through it.

use std::cell::RefCell;
use std::ops::Range;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, StridedTensor};

const NOT_RECORDED: usize = usize::MAX;

enum Op<E: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    /// Elementwise (Hadamard) product.
    Mul(usize, usize),
    MulScalar(usize, E),
    Matmul(usize, usize),
    Transpose(usize),
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    ConcatTime(usize, usize),
    ConcatRows(usize, usize),
    SoftmaxRows(usize),
    /// Input id kept for graph inspection; backward never dereferences it.
    StopGradient(#[allow(dead_code)] usize),
    SumAll(usize),
    Relu(usize),
    LayerNormCols { x: usize, gamma: usize, beta: usize, eps: f64 },
    Conv1d { x: usize, w: usize, b: usize, dilation: usize },
    RelShift(usize),
    RelUnshift(usize),
    AddColBroadcast { x: usize, bias: usize },
    CrossEntropyCols { logits: usize, labels: Rc<Vec<usize>> },
}

struct Node<E: Scalar> {
    value: StridedTensor<E>,
    requires_grad: bool,
    op: Op<E>,
}

/// Differentiable value: a tensor plus its tape handle.
///
/// Cloning is cheap (the tensor aliases its buffer). The value of a recorded
/// `Var` must not be mutated afterwards; backward reads it.
#[derive(Clone)]
pub struct Var<E: Scalar> {
    value: StridedTensor<E>,
    id: usize,
    requires_grad: bool,
}

impl<E: Scalar> Var<E> {
    pub fn value(&self) -> &StridedTensor<E> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// The tensor value without any tape linkage.
    pub fn detach_value(&self) -> StridedTensor<E> {
        self.value.clone()
    }
}

/// Recording tape. Create one per differentiable computation; independent
/// tapes are independent. An eval-mode tape (`Tape::eval`) performs the same
/// forward math while storing nothing, for inference and benchmarks.
pub struct Tape<E: Scalar> {
    nodes: RefCell<Vec<Node<E>>>,
    recording: bool,
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), recording: true }
    }

    /// Forward-only tape: no operation history, `backward` is unavailable.
    pub fn eval() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: StridedTensor<E>, requires_grad: bool, op: Op<E>) -> Var<E> {
        if !self.recording {
            return Var { value, id: NOT_RECORDED, requires_grad: false };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: value.clone(), requires_grad, op });
        Var { value, id, requires_grad }
    }

    fn rg(&self, inputs: &[&Var<E>]) -> bool {
        self.recording && inputs.iter().any(|v| v.requires_grad)
    }

    /// Register an input tensor. `requires_grad` marks it as a trainable
    /// leaf; gradients are reported for it after `backward`.
    pub fn leaf(&self, value: StridedTensor<E>, requires_grad: bool) -> Var<E> {
        self.push(value, requires_grad && self.recording, Op::Leaf)
    }

    /// Non-trainable input (cached state, masks, embedding tables under
    /// freeze, ...).
    pub fn constant(&self, value: StridedTensor<E>) -> Var<E> {
        self.leaf(value, false)
    }

    pub fn add(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let value = a.value.add(&b.value)?;
        Ok(self.push(value, self.rg(&[a, b]), Op::Add(a.id, b.id)))
    }

    pub fn sub(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let value = a.value.sub(&b.value)?;
        Ok(self.push(value, self.rg(&[a, b]), Op::Sub(a.id, b.id)))
    }

    pub fn mul(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let value = a.value.mul(&b.value)?;
        Ok(self.push(value, self.rg(&[a, b]), Op::Mul(a.id, b.id)))
    }

    pub fn mul_scalar(&self, a: &Var<E>, s: E) -> Var<E> {
        self.push(a.value.mul_scalar(s), self.rg(&[a]), Op::MulScalar(a.id, s))
    }

    pub fn matmul(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let value = a.value.matmul(&b.value)?;
        Ok(self.push(value, self.rg(&[a, b]), Op::Matmul(a.id, b.id)))
    }

    pub fn transpose(&self, a: &Var<E>) -> Result<Var<E>> {
        let value = a.value.transpose()?;
        Ok(self.push(value, self.rg(&[a]), Op::Transpose(a.id)))
    }

    pub fn slice_cols(&self, a: &Var<E>, range: Range<usize>) -> Result<Var<E>> {
        let start = range.start;
        let value = a.value.slice_cols(range)?;
        Ok(self.push(value, self.rg(&[a]), Op::SliceCols { x: a.id, start }))
    }

    pub fn slice_rows(&self, a: &Var<E>, range: Range<usize>) -> Result<Var<E>> {
        let start = range.start;
        let value = a.value.slice_rows(range)?;
        Ok(self.push(value, self.rg(&[a]), Op::SliceRows { x: a.id, start }))
    }

    pub fn concat_time(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let value = a.value.concat_time(&b.value)?;
        Ok(self.push(value, self.rg(&[a, b]), Op::ConcatTime(a.id, b.id)))
    }

    pub fn concat_rows(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let value = a.value.concat_rows(&b.value)?;
        Ok(self.push(value, self.rg(&[a, b]), Op::ConcatRows(a.id, b.id)))
    }

    pub fn softmax_rows(&self, a: &Var<E>) -> Result<Var<E>> {
        let value = a.value.softmax_rows()?;
        Ok(self.push(value, self.rg(&[a]), Op::SoftmaxRows(a.id)))
    }

    /// Identity forward, zero backward: nothing upstream of `a` receives any
    /// gradient through this node.
    pub fn stop_gradient(&self, a: &Var<E>) -> Var<E> {
        self.push(a.value.clone(), false, Op::StopGradient(a.id))
    }

    /// Sum of all elements as a `[1,1]` tensor.
    pub fn sum_all(&self, a: &Var<E>) -> Var<E> {
        let mut acc = E::ZERO;
        for x in a.value.to_vec() {
            acc = acc + x;
        }
        let value = StridedTensor::from_shape_vec(&[1, 1], vec![acc]).expect("scalar");
        self.push(value, self.rg(&[a]), Op::SumAll(a.id))
    }

    pub fn relu(&self, a: &Var<E>) -> Var<E> {
        let value = a.value.map(|x| x.maximum(E::ZERO));
        self.push(value, self.rg(&[a]), Op::Relu(a.id))
    }

    /// Per-column layer normalization of `x: [d, t]` with affine parameters
    /// `gamma, beta: [d, 1]`.
    pub fn layer_norm_cols(
        &self,
        x: &Var<E>,
        gamma: &Var<E>,
        beta: &Var<E>,
        eps: f64,
    ) -> Result<Var<E>> {
        let value = layer_norm_cols_forward(&x.value, &gamma.value, &beta.value, eps)?;
        Ok(self.push(
            value,
            self.rg(&[x, gamma, beta]),
            Op::LayerNormCols { x: x.id, gamma: gamma.id, beta: beta.id, eps },
        ))
    }

    /// Same-padded dilated 1D convolution; see [`crate::model::conv1d_forward`].
    pub fn conv1d(&self, x: &Var<E>, w: &Var<E>, b: &Var<E>, dilation: usize) -> Result<Var<E>> {
        let value = crate::model::conv1d_forward(&x.value, &w.value, &b.value, dilation)?;
        Ok(self.push(
            value,
            self.rg(&[x, w, b]),
            Op::Conv1d { x: x.id, w: w.id, b: b.id, dilation },
        ))
    }

    /// Zero-copy relative-position rearrangement; see
    /// [`crate::attention::rel_shift`].
    pub fn rel_shift(&self, a: &Var<E>) -> Result<Var<E>> {
        let value = crate::attention::rel_shift(&a.value)?;
        Ok(self.push(value, self.rg(&[a]), Op::RelShift(a.id)))
    }

    /// Scatter inverse of `rel_shift`; see [`crate::attention::rel_unshift`].
    pub fn rel_unshift(&self, a: &Var<E>) -> Result<Var<E>> {
        let value = crate::attention::rel_unshift(&a.value)?;
        Ok(self.push(value, self.rg(&[a]), Op::RelUnshift(a.id)))
    }

    /// `y[:, t] = x[:, t] + bias[:, 0]` — bias broadcast over time.
    pub fn add_col_broadcast(&self, x: &Var<E>, bias: &Var<E>) -> Result<Var<E>> {
        let (d, t) = x.value.dims2("add_col_broadcast x")?;
        let (db, one) = bias.value.dims2("add_col_broadcast bias")?;
        if db != d || one != 1 {
            return Err(Error::Dimension(format!(
                "add_col_broadcast: bias {:?} for input {:?}",
                bias.value.shape(),
                x.value.shape()
            )));
        }
        let xv = x.value.to_vec();
        let bv = bias.value.to_vec();
        let mut out = Vec::with_capacity(d * t);
        for r in 0..d {
            for c in 0..t {
                out.push(xv[r * t + c] + bv[r]);
            }
        }
        let value = StridedTensor::from_shape_vec(&[d, t], out)?;
        Ok(self.push(value, self.rg(&[x, bias]), Op::AddColBroadcast { x: x.id, bias: bias.id }))
    }

    /// Mean per-frame cross entropy of column logits `[n_classes, t]`
    /// against integer labels of length `t`. Returns a `[1,1]` loss.
    pub fn cross_entropy_cols(&self, logits: &Var<E>, labels: &[usize]) -> Result<Var<E>> {
        let (classes, t) = logits.value.dims2("cross_entropy_cols")?;
        if labels.len() != t {
            return Err(Error::Dimension(format!(
                "cross_entropy_cols: {} labels for {t} frames",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Usage(format!(
                "cross_entropy_cols: label {bad} out of range for {classes} classes"
            )));
        }
        let lv = logits.value.to_vec();
        let mut loss = 0.0f64;
        for (frame, &label) in labels.iter().enumerate() {
            let col = |r: usize| lv[r * t + frame].to_f64();
            let mut max = col(0);
            for r in 1..classes {
                max = max.max(col(r));
            }
            let mut denom = 0.0f64;
            for r in 0..classes {
                denom += (col(r) - max).exp();
            }
            loss += denom.ln() + max - col(label);
        }
        loss /= t as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("cross entropy diverged: {loss}")));
        }
        let value = StridedTensor::from_shape_vec(&[1, 1], vec![E::from_f64(loss)])?;
        Ok(self.push(
            value,
            self.rg(&[logits]),
            Op::CrossEntropyCols { logits: logits.id, labels: Rc::new(labels.to_vec()) },
        ))
    }

    /// Reverse sweep from a scalar `[1,1]` loss. Visits each node once, in
    /// fixed tape order, so repeated calls produce bit-identical gradients.
    pub fn backward(&self, loss: &Var<E>) -> Result<Gradients<E>> {
        if !self.recording {
            return Err(Error::Usage("backward on a non-recording tape".into()));
        }
        if loss.id == NOT_RECORDED {
            return Err(Error::Usage("backward: loss is not on this tape".into()));
        }
        if loss.value.shape() != [1, 1] {
            return Err(Error::Usage(format!(
                "backward: loss must be a [1,1] scalar, got {:?}",
                loss.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<StridedTensor<E>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(StridedTensor::filled(&[1, 1], E::ONE));

        let accumulate = |grads: &mut Vec<Option<StridedTensor<E>>>,
                          target: usize,
                          contribution: StridedTensor<E>|
         -> Result<()> {
            if target == NOT_RECORDED || !nodes[target].requires_grad {
                return Ok(());
            }
            grads[target] = Some(match grads[target].take() {
                None => contribution,
                Some(existing) => existing.add(&contribution)?,
            });
            Ok(())
        };

        for id in (0..=loss.id).rev() {
            if grads[id].is_none() || !nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].clone().expect("checked above");
            match &nodes[id].op {
                Op::Leaf | Op::StopGradient(_) => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.mul_scalar(E::from_f64(-1.0)))?;
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, g.mul(&nodes[*b].value)?)?;
                    accumulate(&mut grads, *b, g.mul(&nodes[*a].value)?)?;
                }
                Op::MulScalar(a, s) => {
                    accumulate(&mut grads, *a, g.mul_scalar(*s))?;
                }
                Op::Matmul(a, b) => {
                    let da = g.matmul(&nodes[*b].value.transpose()?)?;
                    let db = nodes[*a].value.transpose()?.matmul(&g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose()?.to_contiguous())?;
                }
                Op::SliceCols { x, start } => {
                    let dx = StridedTensor::zeros(nodes[*x].value.shape());
                    let width = g.shape()[1];
                    dx.slice_cols(*start..*start + width)?.write_row_major(&g.to_vec())?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SliceRows { x, start } => {
                    let dx = StridedTensor::zeros(nodes[*x].value.shape());
                    let height = g.shape()[0];
                    dx.slice_rows(*start..*start + height)?.write_row_major(&g.to_vec())?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::ConcatTime(a, b) => {
                    let ta = nodes[*a].value.shape()[1];
                    let t = g.shape()[1];
                    accumulate(&mut grads, *a, g.slice_cols(0..ta)?.to_contiguous())?;
                    accumulate(&mut grads, *b, g.slice_cols(ta..t)?.to_contiguous())?;
                }
                Op::ConcatRows(a, b) => {
                    let ra = nodes[*a].value.shape()[0];
                    let r = g.shape()[0];
                    accumulate(&mut grads, *a, g.slice_rows(0..ra)?.to_contiguous())?;
                    accumulate(&mut grads, *b, g.slice_rows(ra..r)?.to_contiguous())?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &nodes[id].value;
                    let (r, c) = y.dims2("softmax grad")?;
                    let yv = y.to_vec();
                    let gv = g.to_vec();
                    let mut dx = vec![E::ZERO; r * c];
                    for i in 0..r {
                        let mut dot = E::ZERO;
                        for j in 0..c {
                            dot = dot + gv[i * c + j] * yv[i * c + j];
                        }
                        for j in 0..c {
                            dx[i * c + j] = yv[i * c + j] * (gv[i * c + j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, StridedTensor::from_shape_vec(&[r, c], dx)?)?;
                }
                Op::SumAll(a) => {
                    let g0 = g.get(&[0, 0]);
                    accumulate(
                        &mut grads,
                        *a,
                        StridedTensor::filled(nodes[*a].value.shape(), g0),
                    )?;
                }
                Op::Relu(a) => {
                    let xv = nodes[*a].value.to_vec();
                    let gv = g.to_vec();
                    let dx: Vec<E> = xv
                        .iter()
                        .zip(gv)
                        .map(|(&x, gg)| if x > E::ZERO { gg } else { E::ZERO })
                        .collect();
                    accumulate(
                        &mut grads,
                        *a,
                        StridedTensor::from_shape_vec(nodes[*a].value.shape(), dx)?,
                    )?;
                }
                Op::LayerNormCols { x, gamma, beta, eps } => {
                    let (dx, dgamma, dbeta) =
                        layer_norm_cols_grads(&g, &nodes[*x].value, &nodes[*gamma].value, *eps)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gamma, dgamma)?;
                    accumulate(&mut grads, *beta, dbeta)?;
                }
                Op::Conv1d { x, w, b, dilation } => {
                    let (dx, dw, db) = crate::model::conv1d_grads(
                        &g,
                        &nodes[*x].value,
                        &nodes[*w].value,
                        *dilation,
                    )?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::RelShift(a) => {
                    // The shift selects each source cell at most once, so the
                    // adjoint is the zero-filled scatter back.
                    accumulate(&mut grads, *a, crate::attention::rel_unshift(&g)?)?;
                }
                Op::RelUnshift(a) => {
                    let gathered =
                        crate::attention::rel_shift(&g.to_contiguous())?.to_contiguous();
                    accumulate(&mut grads, *a, gathered)?;
                }
                Op::AddColBroadcast { x, bias } => {
                    accumulate(&mut grads, *x, g.clone())?;
                    let (d, t) = g.dims2("bias grad")?;
                    let gv = g.to_vec();
                    let mut db = vec![E::ZERO; d];
                    for r in 0..d {
                        for c in 0..t {
                            db[r] = db[r] + gv[r * t + c];
                        }
                    }
                    accumulate(&mut grads, *bias, StridedTensor::from_shape_vec(&[d, 1], db)?)?;
                }
                Op::CrossEntropyCols { logits, labels } => {
                    let lt = &nodes[*logits].value;
                    let (classes, t) = lt.dims2("ce grad")?;
                    let lv = lt.to_vec();
                    let g0 = g.get(&[0, 0]).to_f64();
                    let mut dl = vec![E::ZERO; classes * t];
                    for (frame, &label) in labels.iter().enumerate() {
                        let col = |r: usize| lv[r * t + frame].to_f64();
                        let mut max = col(0);
                        for r in 1..classes {
                            max = max.max(col(r));
                        }
                        let mut denom = 0.0f64;
                        for r in 0..classes {
                            denom += (col(r) - max).exp();
                        }
                        for r in 0..classes {
                            let p = (col(r) - max).exp() / denom;
                            let onehot = if r == label { 1.0 } else { 0.0 };
                            dl[r * t + frame] = E::from_f64(g0 * (p - onehot) / t as f64);
                        }
                    }
                    accumulate(
                        &mut grads,
                        *logits,
                        StridedTensor::from_shape_vec(&[classes, t], dl)?,
                    )?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Registers parameter tensors on a tape, one leaf per storage buffer:
/// tensors that share storage (tied weights, layer-shared tables) map to the
/// same `Var`, so their gradient contributions merge on one node.
pub struct Binder<'t, E: Scalar> {
    tape: &'t Tape<E>,
    trainable: bool,
    memo: RefCell<std::collections::HashMap<usize, Var<E>>>,
}

impl<'t, E: Scalar> Binder<'t, E> {
    pub fn new(tape: &'t Tape<E>, trainable: bool) -> Self {
        Binder { tape, trainable, memo: RefCell::new(std::collections::HashMap::new()) }
    }

    pub fn var(&self, tensor: &StridedTensor<E>) -> Var<E> {
        let key = tensor.buffer_addr();
        if let Some(v) = self.memo.borrow().get(&key) {
            return v.clone();
        }
        let v = self.tape.leaf(tensor.clone(), self.trainable);
        self.memo.borrow_mut().insert(key, v.clone());
        v
    }
}

/// Result of [`Tape::backward`]: per-node gradient tensors.
pub struct Gradients<E: Scalar> {
    grads: Vec<Option<StridedTensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    /// Gradient of the loss with respect to `var`. Vars untouched by the
    /// loss (or behind stop-gradient) get exact zeros of their shape.
    pub fn get(&self, var: &Var<E>) -> StridedTensor<E> {
        if var.id != NOT_RECORDED {
            if let Some(Some(g)) = self.grads.get(var.id) {
                return g.clone();
            }
        }
        StridedTensor::zeros(var.value.shape())
    }

    pub fn has_grad(&self, var: &Var<E>) -> bool {
        var.id != NOT_RECORDED && matches!(self.grads.get(var.id), Some(Some(_)))
    }
}

fn layer_norm_cols_forward<E: Scalar>(
    x: &StridedTensor<E>,
    gamma: &StridedTensor<E>,
    beta: &StridedTensor<E>,
    eps: f64,
) -> Result<StridedTensor<E>> {
    let (d, t) = x.dims2("layer_norm_cols x")?;
    if gamma.shape() != [d, 1] || beta.shape() != [d, 1] {
        return Err(Error::Dimension(format!(
            "layer_norm_cols: gamma {:?} / beta {:?} for input {:?}",
            gamma.shape(),
            beta.shape(),
            x.shape()
        )));
    }
    let xv = x.to_vec();
    let gv = gamma.to_vec();
    let bv = beta.to_vec();
    let mut out = vec![E::ZERO; d * t];
    for c in 0..t {
        let mut mean = 0.0f64;
        for r in 0..d {
            mean += xv[r * t + c].to_f64();
        }
        mean /= d as f64;
        let mut var = 0.0f64;
        for r in 0..d {
            let diff = xv[r * t + c].to_f64() - mean;
            var += diff * diff;
        }
        var /= d as f64;
        let sigma = (var + eps).sqrt();
        for r in 0..d {
            let xh = (xv[r * t + c].to_f64() - mean) / sigma;
            out[r * t + c] = E::from_f64(gv[r].to_f64() * xh + bv[r].to_f64());
        }
    }
    StridedTensor::from_shape_vec(&[d, t], out)
}

fn layer_norm_cols_grads<E: Scalar>(
    g: &StridedTensor<E>,
    x: &StridedTensor<E>,
    gamma: &StridedTensor<E>,
    eps: f64,
) -> Result<(StridedTensor<E>, StridedTensor<E>, StridedTensor<E>)> {
    let (d, t) = x.dims2("layer_norm_cols grad")?;
    let xv = x.to_vec();
    let gv = gamma.to_vec();
    let gg = g.to_vec();
    let mut dx = vec![E::ZERO; d * t];
    let mut dgamma = vec![0.0f64; d];
    let mut dbeta = vec![0.0f64; d];
    for c in 0..t {
        let mut mean = 0.0f64;
        for r in 0..d {
            mean += xv[r * t + c].to_f64();
        }
        mean /= d as f64;
        let mut var = 0.0f64;
        for r in 0..d {
            let diff = xv[r * t + c].to_f64() - mean;
            var += diff * diff;
        }
        var /= d as f64;
        let sigma = (var + eps).sqrt();
        let mut mean_gy = 0.0f64;
        let mut mean_gyxh = 0.0f64;
        for r in 0..d {
            let xh = (xv[r * t + c].to_f64() - mean) / sigma;
            let gyr = gv[r].to_f64() * gg[r * t + c].to_f64();
            mean_gy += gyr;
            mean_gyxh += gyr * xh;
            dgamma[r] += gg[r * t + c].to_f64() * xh;
            dbeta[r] += gg[r * t + c].to_f64();
        }
        mean_gy /= d as f64;
        mean_gyxh /= d as f64;
        for r in 0..d {
            let xh = (xv[r * t + c].to_f64() - mean) / sigma;
            let gyr = gv[r].to_f64() * gg[r * t + c].to_f64();
            dx[r * t + c] = E::from_f64((gyr - mean_gy - xh * mean_gyxh) / sigma);
        }
    }
    Ok((
        StridedTensor::from_shape_vec(&[d, t], dx)?,
        StridedTensor::from_shape_vec(&[d, 1], dgamma.into_iter().map(E::from_f64).collect())?,
        StridedTensor::from_shape_vec(&[d, 1], dbeta.into_iter().map(E::from_f64).collect())?,
    ))
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug)]
pub struct FdReport {
    /// Worst relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Coordinates checked (over all leaves with `requires_grad`).
    pub checked: usize,
    /// `(leaf index, flat coordinate, analytic, numeric)` of the worst case.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Default step for [`finite_diff_check`]: balances truncation against
/// round-off for f64 objectives of order one.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Central-difference check of `backward` for an arbitrary objective.
///
/// `leaves` supplies the input tensors and their `requires_grad` flags;
/// `build` constructs the scalar objective from leaf vars on the given tape.
/// It must be a deterministic pure function of the leaf values. Leaves with
/// `requires_grad == false` are excluded from the report. The relative error
/// denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    leaves: &[(StridedTensor<f64>, bool)],
    eps: f64,
    build: F,
) -> Result<FdReport>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    if eps <= 0.0 {
        return Err(Error::Usage(format!(
            "finite_diff_check: eps must be positive, got {eps}"
        )));
    }
    // Private working copies: the numeric sweep perturbs them in place.
    let work: Vec<(StridedTensor<f64>, bool)> =
        leaves.iter().map(|(t, rg)| (t.to_contiguous(), *rg)).collect();

    let eval_loss = |work: &[(StridedTensor<f64>, bool)]| -> Result<f64> {
        let tape = Tape::eval();
        let vars: Vec<Var<f64>> = work.iter().map(|(t, _)| tape.constant(t.clone())).collect();
        let loss = build(&tape, &vars)?;
        if loss.value().shape() != [1, 1] {
            return Err(Error::Usage(format!(
                "finite_diff_check: objective must be scalar, got {:?}",
                loss.value().shape()
            )));
        }
        let v = loss.value().get(&[0, 0]);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("objective is non-finite: {v}")));
        }
        Ok(v)
    };

    // Analytic pass first; the numeric sweep mutates the work buffers.
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = work.iter().map(|(t, rg)| tape.leaf(t.clone(), *rg)).collect();
    let loss = build(&tape, &vars)?;
    if loss.value().shape() != [1, 1] {
        return Err(Error::Usage(format!(
            "finite_diff_check: objective must be scalar, got {:?}",
            loss.value().shape()
        )));
    }
    if !loss.value().get(&[0, 0]).is_finite() {
        return Err(Error::Numeric("objective is non-finite at the base point".into()));
    }
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Option<Vec<f64>>> = vars
        .iter()
        .map(|v| if v.requires_grad() { Some(grads.get(v).to_vec()) } else { None })
        .collect();
    drop(grads);
    drop(vars);
    drop(tape);

    let mut report = FdReport { max_rel_err: 0.0, checked: 0, worst: None };
    for (leaf_idx, (tensor, rg)) in work.iter().enumerate() {
        if !rg {
            continue;
        }
        let n = tensor.elem_count();
        let mut data = tensor.to_vec();
        let analytic_leaf = analytic[leaf_idx].as_ref().expect("rg leaf has analytic grads");
        for coord in 0..n {
            let orig = data[coord];
            data[coord] = orig + eps;
            tensor.write_row_major(&data)?;
            let plus = eval_loss(&work)?;
            data[coord] = orig - eps;
            tensor.write_row_major(&data)?;
            let minus = eval_loss(&work)?;
            data[coord] = orig;
            tensor.write_row_major(&data)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic_leaf[coord];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((leaf_idx, coord, a, numeric));
            }
        }
    }
    Ok(report)
}
