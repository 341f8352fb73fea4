//! Dense row-major tensors of `f64` and the `.tns` binary format.
//!
//! A [`Tensor`] is immutable once built: every operation returns a new
//! tensor. The autodiff tape in [`crate::autodiff`] stores these as node
//! values and gradients.
//!
//! `.tns` layout (little endian throughout):
//!
//! ```text
//! b"TNS1" | rank: u8 | rank x extent: u64 | product(extents) x f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const TNS_MAGIC: &[u8; 4] = b"TNS1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("from_vec", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a 2-d tensor from nested rows. Panics on ragged input; meant for
    /// literals in tests and small fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn i.i.d. from `Normal(0, std^2)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Entries drawn i.i.d. from `Uniform[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Extent of the last dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        let k = self.last_dim();
        if k == 0 {
            0
        } else {
            self.numel() / k
        }
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Element of a 2-d tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        self.data[i * cols + j] = value;
    }

    /// Row `i` of the `[rows, last_dim]` view.
    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.last_dim();
        &self.data[i * k..(i + 1) * k]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Transpose of a 2-d tensor.
    pub fn t(&self) -> Self {
        assert_eq!(self.rank(), 2, "t() needs a matrix");
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Plain matrix product of two 2-d tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Rows `idx` of a 2-d tensor, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let k = self.last_dim();
        let mut data = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data }
    }

    /// Entries `idx` along the leading axis, keeping the trailing shape.
    pub fn select_leading(&self, idx: &[usize]) -> Self {
        let per = self.data.len() / self.shape[0].max(1);
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_tns_bytes(&self) -> Result<Vec<u8>> {
        let rank = u8::try_from(self.rank())
            .map_err(|_| Error::Format(format!("rank {} exceeds u8", self.rank())))?;
        let mut out = Vec::with_capacity(5 + 8 * (self.rank() + self.numel()));
        out.extend_from_slice(TNS_MAGIC);
        out.push(rank);
        for &e in &self.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_tns_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated .tns header".into()))?;
        if &magic != TNS_MAGIC {
            return Err(Error::Format(format!("bad .tns magic {magic:?}")));
        }
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)
            .map_err(|_| Error::Format("truncated .tns header".into()))?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| Error::Format("truncated .tns extents".into()))?;
            let e = u64::from_le_bytes(b);
            shape.push(usize::try_from(e).map_err(|_| Error::Format(format!("extent {e} too large")))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format("extent product overflows".into()))?;
        if r.len() != numel * 8 {
            return Err(Error::Format(format!(
                ".tns payload has {} bytes, shape {:?} needs {}",
                r.len(),
                shape,
                numel * 8
            )));
        }
        let data = r
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_tns_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_tns_bytes(&bytes)
    }
}

/// `c = op(a) * op(b) + beta * c` for row-major operands, where `op(x)` is
/// `x` or `x^T` depending on the flag. `a` is stored as `[m, k]` (or `[k, m]`
/// when transposed) and `b` as `[k, n]` (or `[n, k]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.iter_mut() {
            *x *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements (checked above
    // in debug builds, guaranteed by every caller), and the strides describe
    // in-bounds row-major or transposed views of them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity_and_zero() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        assert_eq!(Tensor::zeros(&[2, 2]).matmul(&a).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_two_by_two() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn gemm_transposes_match_explicit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let expect = a.matmul(&b.t()).unwrap();
        let mut c = vec![0.0; 20];
        gemm(4, 3, 5, a.data(), false, b.data(), true, &mut c, 0.0);
        let got = Tensor::from_vec(&[4, 5], c).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-14);

        let at = a.t();
        let mut c = vec![0.0; 20];
        gemm(4, 3, 5, at.data(), true, b.data(), true, &mut c, 0.0);
        let got = Tensor::from_vec(&[4, 5], c).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn tns_layout_is_bit_exact() {
        let t = Tensor::from_vec(&[2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = t.to_tns_bytes().unwrap();
        assert_eq!(&bytes[..4], b"TNS1");
        assert_eq!(bytes[4], 2);
        assert_eq!(&bytes[5..13], &2u64.to_le_bytes());
        assert_eq!(&bytes[13..21], &1u64.to_le_bytes());
        assert_eq!(&bytes[21..29], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[29..37], &(-2.5f64).to_le_bytes());
        assert_eq!(bytes.len(), 37);
    }

    #[test]
    fn tns_rejects_truncated_payload() {
        let t = Tensor::ones(&[3]);
        let mut bytes = t.to_tns_bytes().unwrap();
        bytes.pop();
        assert!(matches!(Tensor::from_tns_bytes(&bytes), Err(Error::Format(_))));
        assert!(matches!(Tensor::from_tns_bytes(b"XXXX\0"), Err(Error::Format(_))));
    }

    #[test]
    fn scalar_tensor_roundtrips() {
        let s = Tensor::scalar(7.25);
        let back = Tensor::from_tns_bytes(&s.to_tns_bytes().unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.shape(), &[] as &[usize]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn tns_roundtrip(shape in proptest::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = Tensor::randn(&shape, 3.0, &mut rng);
                let back = Tensor::from_tns_bytes(&t.to_tns_bytes().unwrap()).unwrap();
                prop_assert_eq!(back, t);
            }
        }
    }
}
