//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is a Wengert list: every primitive appends a node holding its
//! output value and the ids of its inputs, so node order is a topological
//! order by construction. [`Tape::backward`] walks the list in reverse and
//! returns a [`Gradients`] table; the tape itself is never mutated by a
//! backward pass, so several backward passes (different seeds) can run on one
//! recorded forward.
//!
//! Shapes are row-major. There is no general broadcasting: binary
//! elementwise ops need equal shapes, the scalar variants take an `f64`, and
//! the only implicit expansions are the bias row in [`Tape::add_bias`] and the
//! unbatched operand of a batched [`Tape::matmul_t`].
//!
//! Every op also adds its forward FLOP count to a counter so cost models can
//! be checked against what the code actually executes.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// FLOPs charged per element for the fused primitives. Matmuls cost
/// `2*m*k*n`; plain elementwise ops and reductions cost one per element.
pub mod flop_cost {
    pub const GELU: u64 = 8;
    pub const SOFTMAX: u64 = 5;
    pub const LAYER_NORM: u64 = 8;
    pub const RMS_NORM: u64 = 6;
    pub const GRID_GRADIENT: u64 = 2;
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: f64) -> f64 {
    gelu_and_prime(x).0
}

/// `tanh` through a single `exp`; absolute error stays near one ulp of 1.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// GELU and its derivative from one shared `tanh`.
#[inline]
fn gelu_and_prime(x: f64) -> (f64, f64) {
    let x2 = x * x;
    let t = fast_tanh(SQRT_2_OVER_PI * x * (1.0 + GELU_CUBIC * x2));
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x2);
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias { x: Var, bias: Var },
    Exp(Var),
    Gelu { x: Var, deriv: Vec<f64> },
    Sqrt(Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<f64> },
    RmsNorm { x: Var, gain: Var, rinv: Vec<f64> },
    SumAll(Var),
    SumLastDim(Var),
    GridGradient { x: Var, grid: GridSpec },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Gelu { x: a, .. }
            | Op::Sqrt(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::SumAll(a)
            | Op::SumLastDim(a)
            | Op::Slice { x: a, .. }
            | Op::GridGradient { x: a, .. } => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Regular grid layout for [`Tape::grid_gradient`]: extents per axis (row
/// major, last axis fastest) and the node spacing along each axis.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub extents: Vec<usize>,
    pub spacing: Vec<f64>,
}

impl GridSpec {
    pub fn new(extents: &[usize], spacing: &[f64]) -> Result<Self> {
        if extents.is_empty() || extents.len() != spacing.len() {
            return Err(Error::Contract("grid needs one spacing per axis".into()));
        }
        if extents.iter().any(|&e| e < 2) {
            return Err(Error::Contract(format!("grid extents {extents:?} need at least 2 nodes per axis")));
        }
        if spacing.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::Contract("grid spacing must be positive".into()));
        }
        Ok(Self {
            extents: extents.to_vec(),
            spacing: spacing.to_vec(),
        })
    }

    pub fn numel(&self) -> usize {
        self.extents.iter().product()
    }

    /// Finite-difference gradient of one field (`numel` values): central
    /// differences inside, one-sided at the boundary, laid out axis-major.
    pub fn gradient(&self, field: &[f64]) -> Result<Vec<f64>> {
        let n = self.numel();
        if field.len() != n {
            return Err(Error::Contract(format!("field of {} values on a grid of {n} nodes", field.len())));
        }
        let mut out = vec![0.0; n * self.extents.len()];
        self.for_each_term(|o, i, c| out[o] += c * field[i]);
        Ok(out)
    }

    /// Visits every `(out_index, in_index, coeff)` term of the finite
    /// difference gradient: central differences inside, one-sided at the
    /// boundary. Output is laid out axis-major: `[axis][grid point]`.
    fn for_each_term(&self, mut f: impl FnMut(usize, usize, f64)) {
        let n = self.numel();
        let ndim = self.extents.len();
        for axis in 0..ndim {
            let stride: usize = self.extents[axis + 1..].iter().product();
            let len = self.extents[axis];
            let h = self.spacing[axis];
            for p in 0..n {
                let i = (p / stride) % len;
                let o = axis * n + p;
                if i == 0 {
                    f(o, p + stride, 1.0 / h);
                    f(o, p, -1.0 / h);
                } else if i == len - 1 {
                    f(o, p, 1.0 / h);
                    f(o, p - stride, -1.0 / h);
                } else {
                    f(o, p + stride, 0.5 / h);
                    f(o, p - stride, -0.5 / h);
                }
            }
        }
    }
}

/// Forward FLOPs recorded on a tape. `mixing` is the share spent in the
/// global spatial mixing (attention cores or basis products); callers attribute it explicitly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    pub total: u64,
    pub mixing: u64,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    flops: FlopCounter,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the seed.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn batch_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<Option<usize>> {
    let ba = (a.len() == 3).then(|| a[0]);
    let bb = (b.len() == 3).then(|| b[0]);
    if !(2..=3).contains(&a.len()) || !(2..=3).contains(&b.len()) {
        return Err(Error::dim(op, a, b));
    }
    match (ba, bb) {
        (Some(x), Some(y)) if x != y => Err(Error::dim(op, a, b)),
        (Some(x), _) | (_, Some(x)) => Ok(Some(x)),
        _ => Ok(None),
    }
}

/// Logical `(rows, cols)` of the last two dims after an optional transpose.
fn mat_dims(shape: &[usize], trans: bool) -> (usize, usize) {
    let r = shape[shape.len() - 2];
    let c = shape[shape.len() - 1];
    if trans {
        (c, r)
    } else {
        (r, c)
    }
}

/// Batched `op(a) * op(b)`; either operand may lack the batch dim, in which
/// case it is shared across the batch. Accumulates into `out` with `beta`.
#[allow(clippy::too_many_arguments)]
fn batched_gemm(
    a: &[f64],
    a_batched: bool,
    ta: bool,
    b: &[f64],
    b_batched: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    out: &mut [f64],
    out_batched: bool,
) {
    // Stacked batches collapse into one larger product when the layout allows.
    if batch > 1 && a_batched && !b_batched && !ta && out_batched {
        gemm(batch * m, k, n, a, false, b, tb, out, 0.0);
        return;
    }
    if batch > 1 && a_batched && b_batched && ta && !tb && !out_batched {
        gemm(m, batch * k, n, a, true, b, false, out, 1.0);
        return;
    }
    let (sa, sb, so) = (m * k, k * n, m * n);
    for i in 0..batch {
        let ai = if a_batched { &a[i * sa..(i + 1) * sa] } else { a };
        let bi = if b_batched { &b[i * sb..(i + 1) * sb] } else { b };
        let oi = if out_batched {
            &mut out[i * so..(i + 1) * so]
        } else {
            &mut out[..]
        };
        let beta = if out_batched { 0.0 } else { 1.0 };
        gemm(m, k, n, ai, ta, bi, tb, oi, beta);
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let r = s[s.len() - 2];
    let c = s[s.len() - 1];
    let batch = t.numel() / (r * c).max(1);
    let mut out = vec![0.0; t.numel()];
    let src = t.data();
    for b in 0..batch {
        let off = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[off + j * r + i] = src[off + i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape.swap(n - 2, n - 1);
    Tensor::from_vec(&shape, out).expect("same numel")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn flops(&self) -> FlopCounter {
        self.flops
    }

    /// Attributes `n` already-counted FLOPs to the global mixing stage.
    pub fn charge_mixing(&mut self, n: u64) {
        self.flops.mixing += n;
    }

    fn push(&mut self, op: Op, value: Tensor, flops: u64) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.flops.total += flops;
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Lookup(v.0))
        }
    }

    /// Differentiable leaf (a parameter or anything a gradient is wanted for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` over the last two dims, where `op` optionally
    /// transposes. Operands are `[m, k]` or `[batch, m, k]`; an unbatched
    /// operand is shared by every batch entry.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let batch = batch_dims("matmul", &sa, &sb)?;
        let (m, k) = mat_dims(&sa, ta);
        let (k2, n) = mat_dims(&sb, tb);
        if k != k2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let nb = batch.unwrap_or(1);
        let mut out = vec![0.0; nb * m * n];
        batched_gemm(
            self.value(a).data(),
            sa.len() == 3,
            ta,
            self.value(b).data(),
            sb.len() == 3,
            tb,
            m,
            k,
            n,
            nb,
            &mut out,
            true,
        );
        let shape = match batch {
            Some(bt) => vec![bt, m, n],
            None => vec![m, n],
        };
        let value = Tensor::from_vec(&shape, out)?;
        let flops = 2 * (nb * m * k * n) as u64;
        Ok(self.push(Op::MatMul { a, b, ta, tb }, value, flops))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        self.value(a).zip_map(self.value(b), name, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let n = v.numel() as u64;
        Ok(self.push(Op::Add(a, b), v, n))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let n = v.numel() as u64;
        Ok(self.push(Op::Sub(a, b), v, n))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let n = v.numel() as u64;
        Ok(self.push(Op::Mul(a, b), v, n))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).scale(s);
        let n = v.numel() as u64;
        Ok(self.push(Op::Scale(a, s), v, n))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x + s);
        let n = v.numel() as u64;
        Ok(self.push(Op::AddScalar(a), v, n))
    }

    /// `x + bias` with `bias: [k]` added to every last-dim row of `x: [..., k]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (xv, bv) = (self.value(x), self.value(bias));
        let k = xv.last_dim();
        if bv.shape() != [k] || xv.rank() == 0 {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(k) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let v = Tensor::from_vec(xv.shape(), data)?;
        let n = v.numel() as u64;
        Ok(self.push(Op::AddBias { x, bias }, v, n))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(f64::exp);
        let n = v.numel() as u64;
        Ok(self.push(Op::Exp(a), v, n))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let keep = self.nodes[a.0].requires_grad;
        let mut out = Vec::with_capacity(x.numel());
        let mut deriv = Vec::with_capacity(if keep { x.numel() } else { 0 });
        for &xi in x.data() {
            let (f, d) = gelu_and_prime(xi);
            out.push(f);
            if keep {
                deriv.push(d);
            }
        }
        let v = Tensor::from_vec(x.shape(), out)?;
        let n = v.numel() as u64 * flop_cost::GELU;
        Ok(self.push(Op::Gelu { x: a, deriv }, v, n))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::Domain("sqrt of a negative entry".into()));
        }
        let v = self.value(a).map(f64::sqrt);
        let n = v.numel() as u64;
        Ok(self.push(Op::Sqrt(a), v, n))
    }

    /// Swaps the last two dims.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if self.value(a).rank() < 2 {
            return Err(Error::dim("transpose", self.shape(a), &[]));
        }
        let v = transpose_last2(self.value(a));
        Ok(self.push(Op::Transpose(a), v, 0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v, 0))
    }

    /// Concatenates along the last dim; all leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        for &p in parts {
            self.check(p)?;
        }
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        if self.value(first).rank() == 0 {
            return Err(Error::dim("concat_last", &[], &[]));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::dim("concat_last", self.shape(first), s));
            }
            widths.push(s[lead.len()]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::from_vec(&shape, data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), v, 0))
    }

    /// Columns `start..start+len` of the last dim.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let k = xv.last_dim();
        if xv.rank() == 0 || start + len > k {
            return Err(Error::Contract(format!(
                "slice {start}..{} out of last dim {k}",
                start + len
            )));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * k + start..r * k + start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let v = Tensor::from_vec(&shape, data)?;
        Ok(self.push(Op::Slice { x, start }, v, 0))
    }

    /// Softmax over the last dim, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let xv = self.value(a);
        let k = xv.last_dim();
        if xv.rank() == 0 || k == 0 {
            return Err(Error::dim("softmax (empty last dim)", xv.shape(), &[]));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        let v = Tensor::from_vec(xv.shape(), data)?;
        let n = v.numel() as u64 * flop_cost::SOFTMAX;
        Ok(self.push(Op::Softmax(a), v, n))
    }

    /// Per-row standardization with population variance, then `* gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        if !(eps > 0.0) {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.last_dim();
        if xv.rank() == 0 || d == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let mut data = vec![0.0; xv.numel()];
        let mut rstd = Vec::with_capacity(xv.rows());
        for (row, out) in xv.data().chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[j] = (row[j] - mean) * r * gv.data()[j] + bv.data()[j];
            }
            rstd.push(r);
        }
        let v = Tensor::from_vec(xv.shape(), data)?;
        let n = v.numel() as u64 * flop_cost::LAYER_NORM;
        Ok(self.push(Op::LayerNorm { x, gain, bias, rstd }, v, n))
    }

    /// `x / sqrt(mean(x^2) + eps) * gain` per row.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        if !(eps > 0.0) {
            return Err(Error::Contract("rms_norm eps must be positive".into()));
        }
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = xv.last_dim();
        if xv.rank() == 0 || d == 0 || gv.shape() != [d] {
            return Err(Error::dim("rms_norm", xv.shape(), gv.shape()));
        }
        let mut data = vec![0.0; xv.numel()];
        let mut rinv = Vec::with_capacity(xv.rows());
        for (row, out) in xv.data().chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            for j in 0..d {
                out[j] = row[j] * r * gv.data()[j];
            }
            rinv.push(r);
        }
        let v = Tensor::from_vec(xv.shape(), data)?;
        let n = v.numel() as u64 * flop_cost::RMS_NORM;
        Ok(self.push(Op::RmsNorm { x, gain, rinv }, v, n))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().sum::<f64>();
        let n = self.value(a).numel() as u64;
        Ok(self.push(Op::SumAll(a), Tensor::scalar(s), n))
    }

    /// Sums out the last dim: `[..., k] -> [...]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let xv = self.value(a);
        if xv.rank() == 0 {
            return Err(Error::dim("sum_last", xv.shape(), &[]));
        }
        let k = xv.last_dim();
        let data: Vec<f64> = if k == 0 {
            vec![0.0; xv.shape()[..xv.rank() - 1].iter().product()]
        } else {
            xv.data().chunks_exact(k).map(|r| r.iter().sum()).collect()
        };
        let v = Tensor::from_vec(&xv.shape()[..xv.rank() - 1], data)?;
        let n = xv.numel() as u64;
        Ok(self.push(Op::SumLastDim(a), v, n))
    }

    /// Finite-difference spatial gradient of fields stored along the last
    /// dim: `[..., grid.numel()] -> [..., ndim * grid.numel()]`.
    pub fn grid_gradient(&mut self, x: Var, grid: &GridSpec) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let n = grid.numel();
        if xv.rank() == 0 || xv.last_dim() != n {
            return Err(Error::dim("grid_gradient", xv.shape(), &grid.extents));
        }
        let ndim = grid.extents.len();
        let rows = xv.rows();
        let mut data = vec![0.0; rows * ndim * n];
        for r in 0..rows {
            let src = &xv.data()[r * n..(r + 1) * n];
            let dst = &mut data[r * ndim * n..(r + 1) * ndim * n];
            grid.for_each_term(|o, i, c| dst[o] += c * src[i]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = ndim * n;
        let v = Tensor::from_vec(&shape, data)?;
        let fl = v.numel() as u64 * flop_cost::GRID_GRADIENT;
        Ok(self.push(Op::GridGradient { x, grid: grid.clone() }, v, fl))
    }

    /// Backward pass seeded with `1` at a scalar node.
    pub fn backward_scalar(&self, seed: Var) -> Result<Gradients> {
        self.check(seed)?;
        let shape = self.shape(seed).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::Contract(format!("backward_scalar on shape {shape:?}")));
        }
        self.backward(seed, Tensor::ones(&shape))
    }

    /// Reverse sweep from `seed` with upstream gradient `seed_grad`.
    /// Gradients of nodes with several consumers are summed. Only nodes that
    /// depend on a differentiable leaf receive a gradient.
    pub fn backward(&self, seed: Var, seed_grad: Tensor) -> Result<Gradients> {
        self.check(seed)?;
        if seed_grad.shape() != self.shape(seed) {
            return Err(Error::dim("backward seed", seed_grad.shape(), self.shape(seed)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[seed.0].requires_grad {
            grads[seed.0] = Some(seed_grad);
        }
        for i in (0..=seed.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k) = mat_dims(sa, ta);
                let n = mat_dims(sb, tb).1;
                let nb = if g.rank() == 3 { g.shape()[0] } else { 1 };
                let (a_b, b_b) = (sa.len() == 3, sb.len() == 3);
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let mut ga = vec![0.0; self.value(a).numel()];
                    if !ta {
                        // dA = dC op(B)^T : [m,n] x [n,k]
                        batched_gemm(g.data(), true, false, bv, b_b, !tb, m, n, k, nb, &mut ga, a_b);
                    } else {
                        // dA = op(B) dC^T : [k,n] x [n,m]
                        batched_gemm(bv, b_b, tb, g.data(), true, true, k, n, m, nb, &mut ga, a_b);
                    }
                    accumulate(grads, a, Tensor::from_vec(sa, ga)?);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; self.value(b).numel()];
                    if !tb {
                        // dB = op(A)^T dC : [k,m] x [m,n]
                        batched_gemm(av, a_b, !ta, g.data(), true, false, k, m, n, nb, &mut gb, b_b);
                    } else {
                        // dB = dC^T op(A) : [n,m] x [m,k]
                        batched_gemm(g.data(), true, true, av, a_b, ta, n, m, k, nb, &mut gb, b_b);
                    }
                    accumulate(grads, b, Tensor::from_vec(sb, gb)?);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), "mul", |x, y| x * y)?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), "mul", |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.scale(*s));
                }
            }
            Op::AddScalar(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*bias) {
                    let k = g.last_dim();
                    let mut gb = vec![0.0; k];
                    for row in g.data().chunks_exact(k) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *bias, Tensor::from_vec(&[k], gb)?);
                }
            }
            Op::Exp(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(&node.value, "exp", |x, y| x * y)?);
                }
            }
            Op::Gelu { x: a, deriv } => {
                if self.wants(*a) {
                    let mut d = g.clone();
                    d.data_mut().iter_mut().zip(deriv).for_each(|(gi, di)| *gi *= di);
                    accumulate(grads, *a, d);
                }
            }
            Op::Sqrt(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(&node.value, "sqrt", |x, y| 0.5 * x / y)?);
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, transpose_last2(g));
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.reshape(self.shape(*a))?);
                }
            }
            Op::Concat(parts) => {
                let total = g.last_dim();
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p, Tensor::from_vec(self.shape(p), gp)?);
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                if self.wants(*x) {
                    let k = self.value(*x).last_dim();
                    let len = g.last_dim();
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    for (r, row) in g.data().chunks_exact(len.max(1)).enumerate() {
                        gx[r * k + start..r * k + start + len].copy_from_slice(row);
                    }
                    accumulate(grads, *x, Tensor::from_vec(self.shape(*x), gx)?);
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let k = g.last_dim();
                    let mut gx = vec![0.0; g.numel()];
                    for ((s, gr), o) in node
                        .value
                        .data()
                        .chunks_exact(k)
                        .zip(g.data().chunks_exact(k))
                        .zip(gx.chunks_exact_mut(k))
                    {
                        let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            o[j] = s[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(grads, *a, Tensor::from_vec(g.shape(), gx)?);
                }
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = xv.last_dim();
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                let mut gx = vec![0.0; xv.numel()];
                let mut xhat = vec![0.0; d];
                let mut gxhat = vec![0.0; d];
                for (r, ((row, gr), o)) in xv
                    .data()
                    .chunks_exact(d)
                    .zip(g.data().chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let rs = rstd[r];
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rs;
                        gxhat[j] = gr[j] * gv.data()[j];
                        ggain[j] += gr[j] * xhat[j];
                        gbias[j] += gr[j];
                    }
                    let m1 = gxhat.iter().sum::<f64>() / d as f64;
                    let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        o[j] = rs * (gxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx)?);
                }
                if self.wants(*gain) {
                    accumulate(grads, *gain, Tensor::from_vec(&[d], ggain)?);
                }
                if self.wants(*bias) {
                    accumulate(grads, *bias, Tensor::from_vec(&[d], gbias)?);
                }
            }
            Op::RmsNorm { x, gain, rinv } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = xv.last_dim();
                let mut ggain = vec![0.0; d];
                let mut gx = vec![0.0; xv.numel()];
                for (r, ((row, gr), o)) in xv
                    .data()
                    .chunks_exact(d)
                    .zip(g.data().chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let ri = rinv[r];
                    let mut ux = 0.0;
                    for j in 0..d {
                        ggain[j] += gr[j] * row[j] * ri;
                        ux += gr[j] * gv.data()[j] * row[j];
                    }
                    let c = ri * ri * ri * ux / d as f64;
                    for j in 0..d {
                        o[j] = ri * gr[j] * gv.data()[j] - row[j] * c;
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx)?);
                }
                if self.wants(*gain) {
                    accumulate(grads, *gain, Tensor::from_vec(&[d], ggain)?);
                }
            }
            Op::SumAll(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::full(self.shape(*a), g.item()));
                }
            }
            Op::SumLastDim(a) => {
                if self.wants(*a) {
                    let xv = self.value(*a);
                    let k = xv.last_dim();
                    let mut gx = vec![0.0; xv.numel()];
                    if k > 0 {
                        for (row, &gi) in gx.chunks_exact_mut(k).zip(g.data()) {
                            row.fill(gi);
                        }
                    }
                    accumulate(grads, *a, Tensor::from_vec(xv.shape(), gx)?);
                }
            }
            Op::GridGradient { x, grid } => {
                if self.wants(*x) {
                    let n = grid.numel();
                    let ndim = grid.extents.len();
                    let xv = self.value(*x);
                    let mut gx = vec![0.0; xv.numel()];
                    for r in 0..xv.rows() {
                        let gr = &g.data()[r * ndim * n..(r + 1) * ndim * n];
                        let dst = &mut gx[r * n..(r + 1) * n];
                        grid.for_each_term(|o, i, c| dst[i] += c * gr[o]);
                    }
                    accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx)?);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Outcome of [`grad_check`]: the worst relative disagreement between tape
/// gradients and central differences, and where it occurred.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Largest `|analytic - numeric|` over all entries.
    pub max_abs_error: f64,
    /// `eps * |f| / step`: the size of difference-quotient noise caused by
    /// rounding the scalar output alone. Entries whose true gradient is not
    /// well above this cannot show a small relative error.
    pub roundoff_scale: f64,
    /// Worst relative error with the denominator floored at
    /// `GRADIENT_SCALE_FLOOR * max |analytic|` instead of `1e-12`, so entries
    /// that are tiny next to the largest gradient are judged absolutely.
    pub max_scaled_error: f64,
}

/// See [`GradCheck::max_scaled_error`].
pub const GRADIENT_SCALE_FLOOR: f64 = 1e-4;

/// Compares tape gradients of a scalar program against central differences
/// `(f(p+h) - f(p-h)) / 2h` for every entry of every parameter. The relative
/// error uses the denominator `max(|analytic|, |numeric|, 1e-12)`.
///
/// `f` receives a fresh tape and one leaf per parameter, in order.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract("grad_check step must be positive".into()));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::Contract(format!("grad_check needs a scalar output, got {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar output, got {:?}",
            tape.shape(out)
        )));
    }
    let f0 = tape.value(out).item();
    let grads = tape.backward_scalar(out)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        max_abs_error: 0.0,
        roundoff_scale: f64::EPSILON * f0.abs() / step,
        max_scaled_error: 0.0,
    };
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();
    let g_max = analytic.iter().flat_map(|t| t.data()).fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = (GRADIENT_SCALE_FLOOR * g_max).max(1e-12);
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, analytic) in analytic.iter().enumerate() {
        for e in 0..params[pi].numel() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + step;
            let fp = eval(&work)?;
            work[pi].data_mut()[e] = orig - step;
            let fm = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data()[e];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            let scaled = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.max_scaled_error = report.max_scaled_error.max(scaled);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, e));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
