//! Reference solvers behind the synthetic tasks.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interior nodes `x_i = i / (n + 1)`, `i = 1..=n`.
pub fn interior_grid_1d(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / (n + 1) as f64).collect()
}

/// `G[i, j] = min(x_i, x_j) (1 - max(x_i, x_j))` on the interior grid: the
/// Green's function of `-u'' = f` with `u(0) = u(1) = 0`.
pub fn green_kernel_1d_poisson(n: usize) -> Result<Tensor> {
    if n < 2 {
        return Err(Error::Contract("green kernel needs n >= 2".into()));
    }
    let x = interior_grid_1d(n);
    let mut g = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let (lo, hi) = if x[i] <= x[j] { (x[i], x[j]) } else { (x[j], x[i]) };
            g.set(i, j, lo * (1.0 - hi));
        }
    }
    Ok(g)
}

/// `u = G f dx` on the interior grid. On these nodes this coincides with
/// the second-order finite-difference solution.
pub fn poisson_1d_solution(green: &Tensor, f: &[f64]) -> Result<Vec<f64>> {
    let n = f.len();
    if green.shape() != [n, n] {
        return Err(Error::dim("poisson_1d_solution", green.shape(), &[n]));
    }
    let dx = 1.0 / (n + 1) as f64;
    Ok((0..n)
        .map(|i| green.row(i).iter().zip(f).map(|(g, v)| g * v).sum::<f64>() * dx)
        .collect())
}

/// Relative residual at which conjugate gradients stops.
pub const DARCY_CG_TOL: f64 = 1e-12;
pub const DARCY_MAX_N: usize = 64;

/// Five-point conservative discretisation of `-div(a grad u) = f` on the
/// `n x n` interior nodes `((i+1)/(n+1), (j+1)/(n+1))` with `u = 0` on the
/// boundary. Face coefficients are harmonic means of the neighbouring nodal
/// `a`; faces on the boundary take the interior node's value.
#[derive(Clone, Debug)]
pub struct DarcyOperator {
    n: usize,
    inv_h2: f64,
    /// Face coefficients: east of `(i, j)` for `i < n-1`, and north of
    /// `(i, j)` for `j < n-1`, plus boundary faces folded into `diag`.
    east: Vec<f64>,
    north: Vec<f64>,
    diag: Vec<f64>,
}

impl DarcyOperator {
    pub fn new(a: &Tensor) -> Result<Self> {
        if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
            return Err(Error::dim("darcy coefficient", a.shape(), &[]));
        }
        let n = a.shape()[0];
        if n == 0 || n > DARCY_MAX_N {
            return Err(Error::Contract(format!("darcy grid n = {n} outside 1..={DARCY_MAX_N}")));
        }
        if a.data().iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain("darcy coefficient must be positive and finite".into()));
        }
        let harm = |p: f64, q: f64| 2.0 * p * q / (p + q);
        let mut east = vec![0.0; n * n];
        let mut north = vec![0.0; n * n];
        let mut diag = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let p = i * n + j;
                let ap = a.at(i, j);
                let e = if i + 1 < n { harm(ap, a.at(i + 1, j)) } else { ap };
                let w = if i > 0 { harm(ap, a.at(i - 1, j)) } else { ap };
                let no = if j + 1 < n { harm(ap, a.at(i, j + 1)) } else { ap };
                let s = if j > 0 { harm(ap, a.at(i, j - 1)) } else { ap };
                if i + 1 < n {
                    east[p] = e;
                }
                if j + 1 < n {
                    north[p] = no;
                }
                diag[p] = e + w + no + s;
            }
        }
        let h = 1.0 / (n + 1) as f64;
        Ok(Self {
            n,
            inv_h2: 1.0 / (h * h),
            east,
            north,
            diag,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `y = A u` with nodes ordered `p = i n + j`.
    pub fn apply(&self, u: &[f64], y: &mut [f64]) {
        let n = self.n;
        for p in 0..n * n {
            y[p] = self.diag[p] * u[p];
        }
        for i in 0..n {
            for j in 0..n {
                let p = i * n + j;
                if i + 1 < n {
                    let q = p + n;
                    let c = self.east[p];
                    y[p] -= c * u[q];
                    y[q] -= c * u[p];
                }
                if j + 1 < n {
                    let q = p + 1;
                    let c = self.north[p];
                    y[p] -= c * u[q];
                    y[q] -= c * u[p];
                }
            }
        }
        for v in y.iter_mut() {
            *v *= self.inv_h2;
        }
    }

    /// Conjugate gradients from zero; stops at `|r| <= DARCY_CG_TOL |f|`.
    pub fn solve(&self, f: &[f64]) -> Result<Vec<f64>> {
        let m = self.n * self.n;
        if f.len() != m {
            return Err(Error::dim("darcy rhs", &[f.len()], &[m]));
        }
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut u = vec![0.0; m];
        let bnorm = dot(f, f).sqrt();
        if bnorm == 0.0 {
            return Ok(u);
        }
        let mut r = f.to_vec();
        let mut p = r.clone();
        let mut ap = vec![0.0; m];
        let mut rr = dot(&r, &r);
        let max_iter = 10 * m;
        for _ in 0..max_iter {
            self.apply(&p, &mut ap);
            let alpha = rr / dot(&p, &ap);
            for k in 0..m {
                u[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            let rr_new = dot(&r, &r);
            if rr_new.sqrt() <= DARCY_CG_TOL * bnorm {
                return Ok(u);
            }
            let beta = rr_new / rr;
            for k in 0..m {
                p[k] = r[k] + beta * p[k];
            }
            rr = rr_new;
        }
        Err(Error::Solver(format!(
            "conjugate gradients did not reach relative residual {DARCY_CG_TOL:e} in {max_iter} iterations"
        )))
    }
}

/// Solves `-div(a grad u) = f` with zero Dirichlet data; `a`, `f`, `u` are
/// `[n, n]` over the interior nodes.
pub fn solve_darcy_2d(a: &Tensor, f: &Tensor) -> Result<Tensor> {
    if f.shape() != a.shape() {
        return Err(Error::dim("solve_darcy_2d", a.shape(), f.shape()));
    }
    let op = DarcyOperator::new(a)?;
    let u = op.solve(f.data())?;
    Tensor::from_vec(a.shape(), u)
}

/// Periodic translation `u(x - shift)` of samples on `x_i = i / n`, exact
/// for band-limited signals. The Nyquist mode of an even-length signal is
/// shifted through its real part so the result stays real.
pub fn spectral_shift(u: &[f64], shift: f64) -> Vec<f64> {
    let n = u.len();
    if n == 0 {
        return vec![];
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex<f64>> = u.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fwd.process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let kk = if 2 * k < n { k as f64 } else { k as f64 - n as f64 };
        if 2 * k == n {
            *c *= (std::f64::consts::PI * n as f64 * shift).cos();
        } else {
            let ang = -2.0 * std::f64::consts::PI * kk * shift;
            *c *= Complex::new(ang.cos(), ang.sin());
        }
    }
    inv.process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Thomas algorithm for `(-u_{i-1} + 2 u_i - u_{i+1}) / h^2 = f_i`.
    fn tridiagonal_poisson(f: &[f64]) -> Vec<f64> {
        let n = f.len();
        let h = 1.0 / (n + 1) as f64;
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        for i in 0..n {
            let denom = 2.0 - if i > 0 { -c[i - 1] } else { 0.0 };
            c[i] = -1.0 / denom;
            d[i] = (f[i] * h * h + if i > 0 { d[i - 1] } else { 0.0 }) / denom;
        }
        let mut u = vec![0.0; n];
        for i in (0..n).rev() {
            u[i] = d[i] - c[i] * if i + 1 < n { u[i + 1] } else { 0.0 };
        }
        u
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn green_kernel_symmetric_and_vanishes_at_boundary() {
        let g = green_kernel_1d_poisson(16).unwrap();
        assert_eq!(g, g.t());
        let diag: Vec<f64> = (0..16).map(|i| g.at(i, i)).collect();
        assert!(diag[0] < diag[1] && diag[15] < diag[14]);
        assert!(green_kernel_1d_poisson(1).is_err());
    }

    #[test]
    fn green_solution_matches_tridiagonal_solve() {
        let n = 256;
        let x = interior_grid_1d(n);
        let f: Vec<f64> = x.iter().map(|&v| (PI * v).sin()).collect();
        let u = poisson_1d_solution(&green_kernel_1d_poisson(n).unwrap(), &f).unwrap();
        let fd = tridiagonal_poisson(&f);
        assert!(rel(&u, &fd) <= 1e-3);
        let exact: Vec<f64> = x.iter().map(|&v| (PI * v).sin() / (PI * PI)).collect();
        assert!(rel(&u, &exact) <= 1e-3);
    }

    #[test]
    fn darcy_manufactured_solution() {
        let n = 32;
        let h = 1.0 / (n + 1) as f64;
        let a = Tensor::ones(&[n, n]);
        let mut f = Tensor::zeros(&[n, n]);
        let mut exact = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let (x, y) = ((i + 1) as f64 * h, (j + 1) as f64 * h);
                f.set(i, j, 2.0 * PI * PI * (PI * x).sin() * (PI * y).sin());
                exact.set(i, j, (PI * x).sin() * (PI * y).sin());
            }
        }
        let u = solve_darcy_2d(&a, &f).unwrap();
        assert!(rel(u.data(), exact.data()) <= 5e-3);
    }

    #[test]
    fn darcy_zero_rhs_scaling_and_domain() {
        let n = 8;
        let mut a = Tensor::ones(&[n, n]);
        a.set(3, 4, 7.0);
        let zero = solve_darcy_2d(&a, &Tensor::zeros(&[n, n])).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        let f = Tensor::ones(&[n, n]);
        let u1 = solve_darcy_2d(&a, &f).unwrap();
        let u2 = solve_darcy_2d(&a.scale(2.0), &f).unwrap();
        assert!(u2.scale(2.0).max_abs_diff(&u1) <= 1e-14 * u1.max_abs());
        a.set(0, 0, 0.0);
        assert!(matches!(solve_darcy_2d(&a, &f), Err(Error::Domain(_))));
    }

    #[test]
    fn spectral_shift_of_band_limited_signal_is_exact() {
        for n in [16usize, 17] {
            let u: Vec<f64> = (0..n)
                .map(|i| {
                    let x = i as f64 / n as f64;
                    1.0 + (2.0 * PI * x).cos() - 0.5 * (6.0 * PI * x).sin()
                })
                .collect();
            let s = spectral_shift(&u, 0.1);
            for i in 0..n {
                let x = i as f64 / n as f64 - 0.1;
                let e = 1.0 + (2.0 * PI * x).cos() - 0.5 * (6.0 * PI * x).sin();
                assert!((s[i] - e).abs() < 1e-13);
            }
        }
    }
}
