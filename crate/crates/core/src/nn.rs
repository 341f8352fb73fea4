//! Transformer building blocks on the tape: positional features, scaled
//! dot-product attention, multi-head attention, the two-layer FFN and the
//! pre-norm sites.
//!
//! Parameter bundles are generic over their handle type so the same struct
//! describes stored parameters (`ParamId`), tape leaves (`Var`) and plain
//! tensors.
//!
//! Activations may be `[rows, width]` or `[batch, rows, width]`; weights are
//! always unbatched and shared across the batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon inside both normalisations.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    LayerNorm,
    RmsNorm,
}

/// Multi-head attention weights, all `[d, d]`, no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub heads: usize,
}

/// `x -> gelu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Gain, plus a bias for LayerNorm sites.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T> {
    pub gain: T,
    pub bias: Option<T>,
}

impl<T: Copy> MhaParams<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> MhaParams<U> {
        MhaParams {
            wq: f(self.wq),
            wk: f(self.wk),
            wv: f(self.wv),
            wo: f(self.wo),
            heads: self.heads,
        }
    }
}

impl<T: Copy> FfnParams<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> FfnParams<U> {
        FfnParams {
            w1: f(self.w1),
            b1: f(self.b1),
            w2: f(self.w2),
            b2: f(self.b2),
        }
    }
}

impl<T: Copy> NormParams<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> NormParams<U> {
        NormParams {
            gain: f(self.gain),
            bias: self.bias.map(f),
        }
    }
}

/// Fourier features `[sin(2^j pi x_k), cos(2^j pi x_k)]` for every coordinate
/// `k` and `j = 0..num_freqs`, laid out coordinate-major then frequency, with
/// the sine before the cosine. Accepts `[N, d_phys]` or `[B, N, d_phys]`.
pub fn positional_encoding(coords: &Tensor, num_freqs: usize) -> Result<Tensor> {
    if num_freqs == 0 {
        return Err(Error::Contract("num_freqs must be at least 1".into()));
    }
    if coords.rank() < 2 {
        return Err(Error::dim("positional_encoding", coords.shape(), &[]));
    }
    let dp = coords.last_dim();
    let width = 2 * num_freqs * dp;
    let mut data = Vec::with_capacity(coords.rows() * width);
    for row in coords.data().chunks_exact(dp.max(1)).take(coords.rows()) {
        for &x in row.iter().take(dp) {
            let mut freq = std::f64::consts::PI;
            for _ in 0..num_freqs {
                data.push((freq * x).sin());
                data.push((freq * x).cos());
                freq *= 2.0;
            }
        }
    }
    let mut shape = coords.shape().to_vec();
    *shape.last_mut().expect("rank >= 2") = width;
    Tensor::from_vec(&shape, data)
}

/// `x W + b` with `W: [k, n]`, `b: [n]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

pub fn ffn_apply(tape: &mut Tape, x: Var, p: &FfnParams<Var>) -> Result<Var> {
    let h = linear(tape, x, p.w1, Some(p.b1))?;
    let h = tape.gelu(h)?;
    linear(tape, h, p.w2, Some(p.b2))
}

pub fn norm(tape: &mut Tape, x: Var, p: &NormParams<Var>, kind: NormKind) -> Result<Var> {
    match (kind, p.bias) {
        (NormKind::LayerNorm, Some(b)) => tape.layer_norm(x, p.gain, b, NORM_EPS),
        (NormKind::LayerNorm, None) => Err(Error::Contract("layer norm site without a bias".into())),
        (NormKind::RmsNorm, _) => tape.rms_norm(x, p.gain, NORM_EPS),
    }
}

/// `softmax(Q K^T * scale) V` with the softmax over keys. FLOPs of the core
/// (scores, scaling, softmax, weighted sum) are attributed to mixing.
pub fn sdpa_scaled(tape: &mut Tape, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    let (weights, _) = attention_weights(tape, q, k, scale)?;
    let before = tape.flops().total;
    let out = tape.matmul(weights, v)?;
    let spent = tape.flops().total - before;
    tape.charge_mixing(spent);
    Ok(out)
}

/// [`sdpa_scaled`] with the standard `1/sqrt(d_h)` scale.
pub fn sdpa(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let dh = tape.value(q).last_dim();
    sdpa_scaled(tape, q, k, v, 1.0 / (dh as f64).sqrt())
}

/// Softmax attention weights `[.., m, n]`; returns `(weights, scores)`.
pub fn attention_weights(tape: &mut Tape, q: Var, k: Var, scale: f64) -> Result<(Var, Var)> {
    let ks = tape.shape(k);
    if ks.len() < 2 || ks[ks.len() - 2] == 0 {
        return Err(Error::Contract("attention over an empty key set".into()));
    }
    let before = tape.flops().total;
    let scores = tape.matmul_t(q, k, false, true)?;
    let scaled = tape.scale(scores, scale)?;
    let weights = tape.softmax(scaled)?;
    let spent = tape.flops().total - before;
    tape.charge_mixing(spent);
    Ok((weights, scaled))
}

/// Per-head projections of one attention call, exposed so analysis code can
/// inspect weights without recomputing them.
pub struct MhaTrace {
    pub out: Var,
    /// Attention weights per head, `[.., m, n]`.
    pub weights: Vec<Var>,
}

/// Project, split into `heads` column blocks, attend per head with scale
/// `1/sqrt(d_h)`, concatenate and apply `W_O`.
pub fn multi_head_attention(tape: &mut Tape, q_in: Var, kv_in: Var, p: &MhaParams<Var>) -> Result<Var> {
    Ok(multi_head_attention_traced(tape, q_in, kv_in, p)?.out)
}

pub fn multi_head_attention_traced(
    tape: &mut Tape,
    q_in: Var,
    kv_in: Var,
    p: &MhaParams<Var>,
) -> Result<MhaTrace> {
    let d = tape.value(p.wq).last_dim();
    if p.heads == 0 || d % p.heads != 0 {
        return Err(Error::Contract(format!("width {d} not divisible by {} heads", p.heads)));
    }
    let dh = d / p.heads;
    let q = tape.matmul(q_in, p.wq)?;
    let k = tape.matmul(kv_in, p.wk)?;
    let v = tape.matmul(kv_in, p.wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_last(q, h * dh, dh)?,
                tape.slice_last(k, h * dh, dh)?,
                tape.slice_last(v, h * dh, dh)?,
            )
        };
        let (w, _) = attention_weights(tape, qh, kh, scale)?;
        let before = tape.flops().total;
        let o = tape.matmul(w, vh)?;
        let spent = tape.flops().total - before;
        tape.charge_mixing(spent);
        outs.push(o);
        weights.push(w);
    }
    let cat = if p.heads == 1 { outs[0] } else { tape.concat_last(&outs)? };
    let out = tape.matmul(cat, p.wo)?;
    Ok(MhaTrace { out, weights })
}

/// Dense `[fan_in, fan_out]` weight with entries `N(0, 1/fan_in)`.
pub fn init_weight(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

pub fn init_ffn(rng: &mut impl Rng, d_in: usize, hidden: usize, d_out: usize) -> FfnParams<Tensor> {
    FfnParams {
        w1: init_weight(rng, d_in, hidden),
        b1: Tensor::zeros(&[hidden]),
        w2: init_weight(rng, hidden, d_out),
        b2: Tensor::zeros(&[d_out]),
    }
}

pub fn init_mha(rng: &mut impl Rng, d: usize, heads: usize) -> MhaParams<Tensor> {
    MhaParams {
        wq: init_weight(rng, d, d),
        wk: init_weight(rng, d, d),
        wv: init_weight(rng, d, d),
        wo: init_weight(rng, d, d),
        heads,
    }
}

pub fn init_norm(kind: NormKind, d: usize) -> NormParams<Tensor> {
    NormParams {
        gain: Tensor::ones(&[d]),
        bias: (kind == NormKind::LayerNorm).then(|| Tensor::zeros(&[d])),
    }
}
