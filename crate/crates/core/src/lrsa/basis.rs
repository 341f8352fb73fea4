//! Fixed-basis global mixing `H' = Phi G Phi^T H`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Basis evaluations `phi: [N, M]` and coupling `g`, either full `[M, M]`
/// or a diagonal given as `[M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisMatrix {
    pub phi: Tensor,
    pub g: Tensor,
}

impl BasisMatrix {
    pub fn new(phi: Tensor, g: Tensor) -> Result<Self> {
        if phi.rank() != 2 {
            return Err(Error::dim("basis phi", phi.shape(), &[]));
        }
        let m = phi.shape()[1];
        let ok = match g.rank() {
            1 => g.shape() == [m],
            2 => g.shape() == [m, m],
            _ => false,
        };
        if !ok {
            return Err(Error::dim("basis coupling", g.shape(), phi.shape()));
        }
        for c in 0..m {
            let norm: f64 = (0..phi.shape()[0]).map(|i| phi.at(i, c).powi(2)).sum();
            if norm == 0.0 {
                return Err(Error::Contract(format!("basis column {c} is identically zero")));
            }
        }
        Ok(Self { phi, g })
    }

    fn g_full(&self) -> Tensor {
        if self.g.rank() == 2 {
            return self.g.clone();
        }
        let m = self.g.numel();
        let mut full = Tensor::zeros(&[m, m]);
        for i in 0..m {
            full.set(i, i, self.g.data()[i]);
        }
        full
    }
}

/// Real Fourier modes on 1-d coordinates, columns ordered
/// `1, cos(2 pi x), sin(2 pi x), cos(4 pi x), ...`. Scaled so that on the
/// periodic grid `x_i = i / N` the columns are orthonormal; the Nyquist
/// cosine (mode `N/2` for even `N`) gets the `1/sqrt(N)` scale of the
/// constant mode. Accepts `[N, 1]` or `[B, N, 1]`.
pub fn fourier_basis(coords: &Tensor, m: usize) -> Result<Tensor> {
    if coords.rank() < 2 || coords.last_dim() != 1 {
        return Err(Error::Contract(format!(
            "fourier basis needs 1-d coordinates, got shape {:?}",
            coords.shape()
        )));
    }
    let n = coords.shape()[coords.rank() - 2];
    if m == 0 || m > n {
        return Err(Error::Contract(format!("cannot build {m} independent modes on {n} points")));
    }
    let batch = coords.rows() / n.max(1);
    let nf = n as f64;
    let mut data = Vec::with_capacity(batch * n * m);
    for &x in coords.data() {
        for c in 0..m {
            let v = if c == 0 {
                1.0 / nf.sqrt()
            } else {
                let k = ((c + 1) / 2) as f64;
                let arg = 2.0 * std::f64::consts::PI * k * x;
                if c % 2 == 1 {
                    let nyquist = 2 * ((c + 1) / 2) == n;
                    let s = if nyquist { 1.0 / nf.sqrt() } else { (2.0 / nf).sqrt() };
                    s * arg.cos()
                } else {
                    (2.0 / nf).sqrt() * arg.sin()
                }
            };
            data.push(v);
        }
    }
    let mut shape = coords.shape().to_vec();
    *shape.last_mut().expect("rank >= 2") = m;
    Tensor::from_vec(&shape, data)
}

/// `Phi (G (Phi^T H))` on plain tensors.
pub fn fixed_basis_mix(h: &Tensor, basis: &BasisMatrix) -> Result<Tensor> {
    if h.rank() != 2 || h.shape()[0] != basis.phi.shape()[0] {
        return Err(Error::dim("fixed_basis_mix", h.shape(), basis.phi.shape()));
    }
    let coeffs = basis.phi.t().matmul(h)?;
    basis.phi.matmul(&basis.g_full().matmul(&coeffs)?)
}

/// Tape version with a constant basis and a learnable coupling `g: [M, M]`.
pub(crate) fn fixed_basis_mix_on_tape(tape: &mut Tape, phi: &Tensor, g: Var, hn: Var) -> Result<Var> {
    let before = tape.flops().total;
    let phi = tape.constant(phi.clone());
    let coeffs = tape.matmul_t(phi, hn, true, false)?;
    let mixed = tape.matmul(g, coeffs)?;
    let out = tape.matmul(phi, mixed)?;
    let spent = tape.flops().total - before;
    tape.charge_mixing(spent);
    Ok(out)
}
