//! The point-to-point linear map one block's global mixing realises.
//!
//! With the attention weights frozen at their values for a given input, the
//! mixing stage is `dH = sum_h B_h U_h(Y)` with `Y_h = A_h Hn`: compression
//! weights `A_h: [M, N]`, reconstruction weights `B_h: [N, M]` and a latent
//! value map `Y -> U` that projects, mixes and re-projects latent tokens.
//! Stacking heads gives `A: [R, N]`, `B: [N, R]` with `R = heads * M`, and
//! linearising the latent map at the current `Y` gives `G_hat`, so for output
//! channel `c` and input channel `c'`
//!
//! ```text
//! K^{c,c'} = B  G_hat[:, c, :, c']  A        (rank <= R)
//! ```
//!
//! For `linear_no` the latent map is linear and `K Hn` reproduces `dH`
//! exactly; otherwise `K` is the Jacobian of the frozen pathway.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lrsa::{latent_mix, AttentionMixLayout, GlobalMixLayout, LrsaModel};
use crate::tensor::Tensor;

use super::basis::fourier_basis;

/// Largest point count for which kernels are materialised.
pub const MAX_KERNEL_POINTS: usize = 512;

#[derive(Clone, Debug)]
enum Pathway {
    Attention { a_heads: Vec<Tensor>, b_heads: Vec<Tensor> },
    Basis { phi: Tensor, g: Tensor },
}

/// Factored induced kernel of one layer for one input sample.
#[derive(Clone, Debug)]
pub struct InducedKernel {
    pub layer: usize,
    pub n: usize,
    pub d: usize,
    /// `R`: stacked latent count, an upper bound on every channel kernel's rank.
    pub rank_bound: usize,
    /// Compression weights `[R, N]`.
    pub a: Tensor,
    /// Reconstruction weights `[N, R]`.
    pub b: Tensor,
    /// Latent value Jacobian `[R d, R d]`, row `p d + c`, column `q d + c'`.
    pub g_hat: Tensor,
    /// Normalised block input `Hn: [N, d]`.
    pub normed: Tensor,
    /// Mixing output `dH: [N, d]` of the actual block.
    pub delta: Tensor,
    pathway: Pathway,
}

/// `W_V^h W_O^h`: value columns and output rows of head `h`, `[d, d]`.
fn head_value_output(wv: &Tensor, wo: &Tensor, h: usize, dh: usize) -> Result<Tensor> {
    let d = wv.shape()[0];
    let mut v = Tensor::zeros(&[d, dh]);
    let mut o = Tensor::zeros(&[dh, d]);
    for i in 0..d {
        for k in 0..dh {
            v.set(i, k, wv.at(i, h * dh + k));
            o.set(k, i, wo.at(h * dh + k, i));
        }
    }
    v.matmul(&o)
}

/// Per-head latent value map `Y_h -> U_h` with parameters as constants.
fn latent_value_map(tape: &mut Tape, model: &LrsaModel, mix: &AttentionMixLayout, pv: &[Var], ys: &[Var]) -> Result<Vec<Var>> {
    let p = &model.params;
    let heads = mix.down.heads;
    let dh = model.config.width / heads;
    let mut z: Option<Var> = None;
    for (h, &y) in ys.iter().enumerate() {
        let c = tape.constant(head_value_output(p.get(mix.down.wv), p.get(mix.down.wo), h, dh)?);
        let t = tape.matmul(y, c)?;
        z = Some(match z {
            Some(acc) => tape.add(acc, t)?,
            None => t,
        });
    }
    let z = z.ok_or_else(|| Error::Contract("no heads".into()))?;
    let zp = match &mix.latent {
        Some(lm) => latent_mix(tape, model.config.norm, lm, pv, z)?,
        None => z,
    };
    (0..heads)
        .map(|h| {
            let dmat = tape.constant(head_value_output(p.get(mix.up.wv), p.get(mix.up.wo), h, dh)?);
            tape.matmul(zp, dmat)
        })
        .collect()
}

impl LrsaModel {
    /// Materialises the induced kernel of block `layer` for one sample
    /// (`features: [N, d_in]`, `coords: [N, d_phys]`), freezing attention
    /// weights at their values for this input.
    pub fn induced_kernel(&self, layer: usize, features: &Tensor, coords: &Tensor) -> Result<InducedKernel> {
        if features.rank() != 2 {
            return Err(Error::Contract("induced kernel works on a single [N, d_in] sample".into()));
        }
        let n = features.shape()[0];
        if n > MAX_KERNEL_POINTS {
            return Err(Error::Resource(format!(
                "{n} points exceed the {MAX_KERNEL_POINTS}-point limit for kernel materialisation"
            )));
        }
        let layout = self
            .layout
            .layers
            .get(layer)
            .ok_or_else(|| Error::Contract(format!("layer {layer} out of range (depth {})", self.config.depth)))?;
        let d = self.config.width;
        let mut tape = Tape::new();
        let pv = self.bind_const(&mut tape);
        let fv = tape.constant(features.clone());
        let trace = self.forward_traced(&mut tape, &pv, fv, coords)?;
        let block = &trace.blocks[layer];
        let normed = tape.value(block.normed).clone();
        let delta = tape.value(block.delta).clone();

        match &layout.mix {
            GlobalMixLayout::Attention(mix) => {
                let a_heads: Vec<Tensor> = block.down_weights.iter().map(|&w| tape.value(w).clone()).collect();
                let b_heads: Vec<Tensor> = block.up_weights.iter().map(|&w| tape.value(w).clone()).collect();
                let m = self.config.latent_count;
                let r = a_heads.len() * m;
                let mut a = Tensor::zeros(&[r, n]);
                let mut b = Tensor::zeros(&[n, r]);
                for (h, (ah, bh)) in a_heads.iter().zip(&b_heads).enumerate() {
                    for p in 0..m {
                        for i in 0..n {
                            a.set(h * m + p, i, ah.at(p, i));
                            b.set(i, h * m + p, bh.at(i, p));
                        }
                    }
                }
                let g_hat = self.latent_jacobian(mix, &a_heads, &normed)?;
                Ok(InducedKernel {
                    layer,
                    n,
                    d,
                    rank_bound: r,
                    a,
                    b,
                    g_hat,
                    normed,
                    delta,
                    pathway: Pathway::Attention { a_heads, b_heads },
                })
            }
            GlobalMixLayout::FixedBasis { g } => {
                let phi = fourier_basis(coords, self.config.latent_count)?;
                let gm = self.params.get(*g).clone();
                let m = gm.shape()[0];
                let mut g_hat = Tensor::zeros(&[m * d, m * d]);
                for p in 0..m {
                    for q in 0..m {
                        for c in 0..d {
                            g_hat.set(p * d + c, q * d + c, gm.at(p, q));
                        }
                    }
                }
                Ok(InducedKernel {
                    layer,
                    n,
                    d,
                    rank_bound: m,
                    a: phi.t(),
                    b: phi.clone(),
                    g_hat,
                    normed,
                    delta,
                    pathway: Pathway::Basis { phi, g: gm },
                })
            }
        }
    }

    /// Jacobian of the stacked latent value map at `Y_h = A_h Hn`, one
    /// backward pass per output entry.
    fn latent_jacobian(&self, mix: &AttentionMixLayout, a_heads: &[Tensor], normed: &Tensor) -> Result<Tensor> {
        let d = self.config.width;
        let m = self.config.latent_count;
        let heads = a_heads.len();
        let r = heads * m;
        let mut tape = Tape::new();
        let pv = self.bind_const(&mut tape);
        let ys: Vec<Var> = a_heads
            .iter()
            .map(|ah| Ok(tape.leaf(ah.matmul(normed)?)))
            .collect::<Result<_>>()?;
        let us = latent_value_map(&mut tape, self, mix, &pv, &ys)?;
        let mut g_hat = Tensor::zeros(&[r * d, r * d]);
        for (ho, &u) in us.iter().enumerate() {
            for p in 0..m {
                for c in 0..d {
                    let mut seed = Tensor::zeros(&[m, d]);
                    seed.set(p, c, 1.0);
                    let grads = tape.backward(u, seed)?;
                    let row = (ho * m + p) * d + c;
                    for (hi, &y) in ys.iter().enumerate() {
                        if let Some(gy) = grads.get(y) {
                            let base = hi * m * d;
                            let dst = &mut g_hat.data_mut()[row * r * d + base..row * r * d + base + m * d];
                            dst.copy_from_slice(gy.data());
                        }
                    }
                }
            }
        }
        Ok(g_hat)
    }
}

impl InducedKernel {
    fn g_block(&self, c_out: usize, c_in: usize) -> Tensor {
        let (r, d) = (self.rank_bound, self.d);
        let mut s = Tensor::zeros(&[r, r]);
        for p in 0..r {
            for q in 0..r {
                s.set(p, q, self.g_hat.at(p * d + c_out, q * d + c_in));
            }
        }
        s
    }

    /// `K^{c_out, c_in}: [N, N]`.
    pub fn channel_kernel(&self, c_out: usize, c_in: usize) -> Result<Tensor> {
        if c_out >= self.d || c_in >= self.d {
            return Err(Error::Contract(format!("channel pair ({c_out}, {c_in}) out of range {}", self.d)));
        }
        self.b.matmul(&self.g_block(c_out, c_in).matmul(&self.a)?)
    }

    /// Channel-averaged diagonal `(1/d) sum_c K^{c,c}`: one `N x N`
    /// point-to-point map, still of rank at most `R`.
    pub fn mean_kernel(&self) -> Result<Tensor> {
        let r = self.rank_bound;
        let mut s = Tensor::zeros(&[r, r]);
        for c in 0..self.d {
            s.add_assign(&self.g_block(c, c))?;
        }
        self.b.matmul(&s.scale(1.0 / self.d as f64).matmul(&self.a)?)
    }

    /// `(K V)[i, c] = sum_{j, c'} K^{c,c'}[i, j] V[j, c']`.
    pub fn apply(&self, v: &Tensor) -> Result<Tensor> {
        if v.shape() != [self.n, self.d] {
            return Err(Error::dim("induced kernel apply", v.shape(), &[self.n, self.d]));
        }
        let y = self.a.matmul(v)?.reshape(&[self.rank_bound * self.d, 1])?;
        let u = self.g_hat.matmul(&y)?.reshape(&[self.rank_bound, self.d])?;
        self.b.matmul(&u)
    }

    /// `K^T W`, the adjoint of [`InducedKernel::apply`].
    pub fn apply_transpose(&self, w: &Tensor) -> Result<Tensor> {
        if w.shape() != [self.n, self.d] {
            return Err(Error::dim("induced kernel apply_transpose", w.shape(), &[self.n, self.d]));
        }
        let t = self.b.t().matmul(w)?.reshape(&[self.rank_bound * self.d, 1])?;
        let s = self.g_hat.t().matmul(&t)?.reshape(&[self.rank_bound, self.d])?;
        self.a.t().matmul(&s)
    }

    /// Builds the mixing pathway with attention weights frozen, as a function
    /// of a `Hn` leaf.
    fn frozen_on_tape(&self, tape: &mut Tape, model: &LrsaModel, hn: Var) -> Result<Var> {
        match &self.pathway {
            Pathway::Basis { phi, g } => {
                let phi = tape.constant(phi.clone());
                let g = tape.constant(g.clone());
                let c = tape.matmul_t(phi, hn, true, false)?;
                let c = tape.matmul(g, c)?;
                tape.matmul(phi, c)
            }
            Pathway::Attention { a_heads, b_heads } => {
                let GlobalMixLayout::Attention(mix) = &model.layout.layers[self.layer].mix else {
                    return Err(Error::Contract("model does not match the kernel's layer".into()));
                };
                let pv = model.bind_const(tape);
                let ys: Vec<Var> = a_heads
                    .iter()
                    .map(|ah| {
                        let a = tape.constant(ah.clone());
                        tape.matmul(a, hn)
                    })
                    .collect::<Result<_>>()?;
                let us = latent_value_map(tape, model, mix, &pv, &ys)?;
                let mut out: Option<Var> = None;
                for (bh, u) in b_heads.iter().zip(us) {
                    let b = tape.constant(bh.clone());
                    let t = tape.matmul(b, u)?;
                    out = Some(match out {
                        Some(acc) => tape.add(acc, t)?,
                        None => t,
                    });
                }
                out.ok_or_else(|| Error::Contract("no heads".into()))
            }
        }
    }

    /// Mixing output for input `hn` with attention weights frozen.
    pub fn frozen_delta(&self, model: &LrsaModel, hn: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = tape.constant(hn.clone());
        let out = self.frozen_on_tape(&mut tape, model, h)?;
        Ok(tape.value(out).clone())
    }

    /// Reverse-mode product `J^T W` of the frozen pathway at the stored `Hn`.
    pub fn frozen_vjp(&self, model: &LrsaModel, w: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = tape.leaf(self.normed.clone());
        let out = self.frozen_on_tape(&mut tape, model, h)?;
        let grads = tape.backward(out, w.clone())?;
        Ok(grads.get_or_zeros(h, self.normed.shape()))
    }

    /// Column `(j, c_in)` of the kernel by central differences of the frozen
    /// pathway: the response of every `(i, c_out)` to a unit perturbation of
    /// input feature `c_in` at point `j`.
    pub fn probe(&self, model: &LrsaModel, j: usize, c_in: usize, step: f64) -> Result<Tensor> {
        if j >= self.n || c_in >= self.d {
            return Err(Error::Contract(format!("probe ({j}, {c_in}) out of range")));
        }
        let mut plus = self.normed.clone();
        let mut minus = self.normed.clone();
        let base = self.normed.at(j, c_in);
        plus.set(j, c_in, base + step);
        minus.set(j, c_in, base - step);
        let fp = self.frozen_delta(model, &plus)?;
        let fm = self.frozen_delta(model, &minus)?;
        Ok(fp.sub(&fm)?.scale(0.5 / step))
    }
}
