//! Singular value decomposition and compressibility reports.
//!
//! The SVD is one-sided Jacobi: plane rotations orthogonalise the columns of
//! the matrix until every pair is orthogonal to working precision, at which
//! point the column norms are the singular values. It is slow next to
//! bidiagonalisation but accurate for small singular values, which is what a
//! decay study needs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_SWEEPS: usize = 30;
/// Pair `(i, j)` counts as orthogonal once `|a_i . a_j| <= ORTH_TOL |a_i| |a_j|`.
pub const ORTH_TOL: f64 = 1e-14;
pub const MAX_SVD_DIM: usize = 1024;
/// Default relative threshold for the numerical rank.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Thin SVD `A = U diag(s) V^T` with `k = min(m, n)` columns in `U` and `V`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl Svd {
    /// `U_r diag(s_r) V_r^T`.
    pub fn truncated(&self, r: usize) -> Tensor {
        let (m, n) = (self.u.shape()[0], self.v.shape()[0]);
        let k = self.s.len();
        let r = r.min(k);
        let mut out = Tensor::zeros(&[m, n]);
        for t in 0..r {
            for i in 0..m {
                let ui = self.u.at(i, t) * self.s[t];
                if ui == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let v = out.at(i, j) + ui * self.v.at(j, t);
                    out.set(i, j, v);
                }
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn svd(a: &Tensor) -> Result<Svd> {
    if a.rank() != 2 {
        return Err(Error::dim("svd", a.shape(), &[]));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    if m > MAX_SVD_DIM || n > MAX_SVD_DIM {
        return Err(Error::Resource(format!("svd of {m}x{n} exceeds {MAX_SVD_DIM} per side")));
    }
    if !a.is_finite() {
        return Err(Error::Domain("svd of a matrix with non-finite entries".into()));
    }
    if m < n {
        let t = svd_tall(&a.t())?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    svd_tall(a)
}

/// Jacobi on a matrix with `m >= n`.
fn svd_tall(a: &Tensor) -> Result<Svd> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    // Column-major working copies so rotations touch contiguous memory.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
    // Columns below eps * ||A||_F are zero to working precision; rounding
    // keeps them from ever looking orthogonal in the relative test, so pairs
    // involving one are left alone.
    let negligible = f64::EPSILON * f64::EPSILON * norms.iter().sum::<f64>();

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= ORTH_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
                norms[p] = dot(&cols[p], &cols[p]);
                norms[q] = dot(&cols[q], &cols[q]);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence {
            what: "one-sided Jacobi SVD",
            sweeps: MAX_SWEEPS,
        });
    }

    let sigma: Vec<f64> = norms.iter().map(|x| x.sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));

    let mut ucols: Vec<Option<Vec<f64>>> = cols
        .iter()
        .zip(&sigma)
        .zip(&norms)
        .map(|((c, &s), &nrm)| (nrm > negligible).then(|| c.iter().map(|x| x / s).collect()))
        .collect();
    complete_orthonormal(&mut ucols, m);

    let mut u = Tensor::zeros(&[m, n]);
    let mut v = Tensor::zeros(&[n, n]);
    let mut s = Vec::with_capacity(n);
    for (t, &j) in order.iter().enumerate() {
        s.push(sigma[j]);
        let uc = ucols[j].as_ref().expect("completed");
        for i in 0..m {
            u.set(i, t, uc[i]);
        }
        for i in 0..n {
            v.set(i, t, vcols[j][i]);
        }
    }
    Ok(Svd { u, s, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the `None` slots with unit vectors orthogonal to every other slot:
/// each takes the canonical basis vector with the largest residual after
/// Gram-Schmidt (applied twice) against the slots filled so far.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], m: usize) {
    let missing: Vec<usize> = (0..cols.len()).filter(|&j| cols[j].is_none()).collect();
    for j in missing {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            for _ in 0..2 {
                for other in cols.iter().flatten() {
                    let proj = dot(&cand, other);
                    cand.iter_mut().zip(other).for_each(|(c, o)| *c -= proj * o);
                }
            }
            let nrm = dot(&cand, &cand).sqrt();
            if best.as_ref().map_or(true, |(b, _)| nrm > *b) {
                best = Some((nrm, cand));
            }
        }
        let (nrm, mut cand) = best.expect("m >= 1");
        cand.iter_mut().for_each(|c| *c /= nrm);
        cols[j] = Some(cand);
    }
}

/// Singular values, truncation errors and numerical rank of a matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    /// `r -> sqrt(sum_{k>r} s_k^2 / sum_k s_k^2)`: relative Frobenius error
    /// of the best rank-`r` approximation.
    pub rank_errors: BTreeMap<usize, f64>,
    pub numerical_rank: usize,
    /// Relative threshold: the rank counts `s_k > tol * s_1`.
    pub tol: f64,
}

impl KernelReport {
    /// `s_{r+1} / s_1`, or 0 when there is no such singular value.
    pub fn tail_ratio(&self, r: usize) -> f64 {
        match (self.singular_values.first(), self.singular_values.get(r)) {
            (Some(&s1), Some(&sr)) if s1 > 0.0 => sr / s1,
            _ => 0.0,
        }
    }
}

/// Relative truncation error for every `r` in `0..=k` from suffix sums.
pub fn rank_errors_from_sigma(s: &[f64]) -> Vec<f64> {
    let mut tail = vec![0.0; s.len() + 1];
    for k in (0..s.len()).rev() {
        tail[k] = tail[k + 1] + s[k] * s[k];
    }
    let total = tail[0];
    tail.iter()
        .map(|&t| if total > 0.0 { (t / total).sqrt() } else { 0.0 })
        .collect()
}

/// Report over the rank grid `grid` (values in `0..=min(m, n)`); pass
/// `None` for every rank `1..=min(m, n)`.
pub fn spectral_report(a: &Tensor, tol: f64, grid: Option<&[usize]>) -> Result<KernelReport> {
    if !(tol >= 0.0) {
        return Err(Error::Contract("rank tolerance must be non-negative".into()));
    }
    let dec = svd(a)?;
    let errs = rank_errors_from_sigma(&dec.s);
    let k = dec.s.len();
    let grid: Vec<usize> = match grid {
        Some(g) => g.to_vec(),
        None => (1..=k).collect(),
    };
    let mut rank_errors = BTreeMap::new();
    for r in grid {
        if r > k {
            return Err(Error::Contract(format!("rank {r} beyond min(m, n) = {k}")));
        }
        rank_errors.insert(r, errs[r]);
    }
    let s1 = dec.s.first().copied().unwrap_or(0.0);
    let numerical_rank = dec.s.iter().filter(|&&s| s > tol * s1).count();
    Ok(KernelReport {
        singular_values: dec.s,
        rank_errors,
        numerical_rank,
        tol,
    })
}

/// Least-squares slope of `ln s_k` against `ln k` over the 1-based range
/// `k_lo..=k_hi`.
pub fn loglog_slope(s: &[f64], k_lo: usize, k_hi: usize) -> Result<f64> {
    if k_lo == 0 || k_hi <= k_lo || k_hi > s.len() {
        return Err(Error::Contract(format!("bad slope range {k_lo}..={k_hi} for {} values", s.len())));
    }
    let pts: Vec<(f64, f64)> = (k_lo..=k_hi)
        .map(|k| ((k as f64).ln(), s[k - 1].ln()))
        .collect();
    if pts.iter().any(|p| !p.1.is_finite()) {
        return Err(Error::Domain("zero singular value inside the slope range".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Ok(sxy / sxx)
}

pub const CSV_HEADER: &str = "k,sigma_k,rank_k_error";

/// One row per grid rank `k`: `k, s_k, error at rank k`, 17 significant
/// digits, LF line endings. An empty grid writes the header only.
pub fn decay_csv(report: &KernelReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (&k, &err) in &report.rank_errors {
        let sigma = if k == 0 {
            f64::NAN
        } else {
            report.singular_values.get(k - 1).copied().unwrap_or(0.0)
        };
        let _ = writeln!(out, "{k},{sigma:.16e},{err:.16e}");
    }
    out
}

pub fn emit_decay_csv(report: &KernelReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, decay_csv(report)).map_err(|e| Error::io(path, e))
}

/// Parses a decay CSV back into `(k, s_k, error)` rows.
pub fn parse_decay_csv(text: &str) -> Result<Vec<(usize, f64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format("decay csv header mismatch".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad decay csv row `{l}`"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok((
                f[0].parse().map_err(|_| bad())?,
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reconstruct(d: &Svd) -> Tensor {
        d.truncated(d.s.len())
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let d = svd(&Tensor::eye(5)).unwrap();
        assert!(d.s.iter().all(|&s| (s - 1.0).abs() < 1e-15));
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [2.0, 1.0, -1.0];
        let mut a = Tensor::zeros(&[4, 3]);
        for i in 0..4 {
            for j in 0..3 {
                a.set(i, j, u[i] * v[j]);
            }
        }
        let d = svd(&a).unwrap();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((d.s[0] - nu * nv).abs() < 1e-12);
        assert!(d.s[1..].iter().all(|&s| s <= 1e-12));
        let ut = d.u.t().matmul(&d.u).unwrap();
        assert!(ut.max_abs_diff(&Tensor::eye(3)) < 1e-10);
    }

    #[test]
    fn diagonal_is_sorted() {
        let a = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 3.0]]);
        let d = svd(&a).unwrap();
        assert_eq!(d.s, vec![3.0, 1.0]);
    }

    #[test]
    fn wide_zero_and_empty_matrices() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[3, 7], 1.0, &mut r);
        let d = svd(&a).unwrap();
        assert_eq!(d.u.shape(), &[3, 3]);
        assert_eq!(d.v.shape(), &[7, 3]);
        assert!(reconstruct(&d).max_abs_diff(&a) < 1e-12);

        let z = svd(&Tensor::zeros(&[4, 3])).unwrap();
        assert!(z.s.iter().all(|&s| s == 0.0));
        assert!(z.u.t().matmul(&z.u).unwrap().max_abs_diff(&Tensor::eye(3)) < 1e-12);
    }

    #[test]
    fn orthogonal_matrix_has_flat_error_profile() {
        let n = 6;
        let phi = crate::lrsa::fourier_basis(
            &Tensor::from_vec(&[n, 1], (0..n).map(|i| i as f64 / n as f64).collect()).unwrap(),
            n,
        )
        .unwrap();
        let rep = spectral_report(&phi, DEFAULT_RANK_TOL, None).unwrap();
        for (&r, &e) in &rep.rank_errors {
            assert!((e - ((n - r) as f64 / n as f64).sqrt()).abs() < 1e-12);
        }
        assert_eq!(rep.numerical_rank, n);
    }

    #[test]
    fn rank_one_report() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]);
        let rep = spectral_report(&a, DEFAULT_RANK_TOL, None).unwrap();
        assert!(rep.rank_errors[&1] <= 1e-12);
        assert_eq!(rep.numerical_rank, 1);
        assert!(spectral_report(&a, DEFAULT_RANK_TOL, Some(&[3])).is_err());
    }

    #[test]
    fn csv_empty_grid_and_roundtrip() {
        let a = Tensor::from_rows(&[&[2.0, 1.0], &[1.0, 3.0]]);
        let rep = spectral_report(&a, DEFAULT_RANK_TOL, Some(&[])).unwrap();
        assert_eq!(decay_csv(&rep), "k,sigma_k,rank_k_error\n");

        let mut r = ChaCha8Rng::seed_from_u64(2);
        let rep = spectral_report(&Tensor::randn(&[8, 8], 1.0, &mut r), DEFAULT_RANK_TOL, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decay.csv");
        emit_decay_csv(&rep, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(!text.contains('\r'));
        let rows = parse_decay_csv(&text).unwrap();
        assert_eq!(rows.len(), 8);
        for (k, s, e) in rows {
            assert_eq!(s.to_bits(), rep.singular_values[k - 1].to_bits());
            assert_eq!(e.to_bits(), rep.rank_errors[&k].to_bits());
        }
    }

    #[test]
    fn slope_of_exact_power_law() {
        let s: Vec<f64> = (1..=40).map(|k| 5.0 * (k as f64).powf(-2.0)).collect();
        assert!((loglog_slope(&s, 2, 32).unwrap() + 2.0).abs() < 1e-12);
        assert!(loglog_slope(&s, 0, 3).is_err());
    }
}
