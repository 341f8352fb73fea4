//! Slice-based tokenisation: points are softly assigned to `M` slices and
//! each token is the weighted mean of its slice.

use crate::autodiff::softmax_in_place;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis over which the assignment logits `H W^T` are normalised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceAxis {
    /// Each point distributes unit mass over the slices, then every slice
    /// renormalises over points.
    Slices,
    /// Each slice distributes unit mass over the points; this is
    /// attention with the slice weights as queries, unscaled logits and
    /// identity value projection.
    Points,
}

/// Tokens `z_j = sum_i w_ij h_i / sum_i w_ij` with `w` a softmax of
/// `h_i . W_slice_j` along `axis`.
pub fn slicing_compress(h: &Tensor, w_slice: &Tensor, axis: SliceAxis) -> Result<Tensor> {
    if h.rank() != 2 || w_slice.rank() != 2 || h.shape()[1] != w_slice.shape()[1] {
        return Err(Error::dim("slicing_compress", h.shape(), w_slice.shape()));
    }
    let (n, d) = (h.shape()[0], h.shape()[1]);
    let m = w_slice.shape()[0];
    if n == 0 || m == 0 {
        return Err(Error::Contract("slicing needs at least one point and one slice".into()));
    }
    // logits[i][j], row-major over points.
    let mut w = h.matmul(&w_slice.t())?.into_data();
    match axis {
        SliceAxis::Slices => w.chunks_exact_mut(m).for_each(softmax_in_place),
        SliceAxis::Points => {
            let mut col = vec![0.0; n];
            for j in 0..m {
                for i in 0..n {
                    col[i] = w[i * m + j];
                }
                softmax_in_place(&mut col);
                for i in 0..n {
                    w[i * m + j] = col[i];
                }
            }
        }
    }
    let mut out = Tensor::zeros(&[m, d]);
    for j in 0..m {
        let total: f64 = (0..n).map(|i| w[i * m + j]).sum();
        if !(total >= 1e-300) {
            return Err(Error::Degeneracy { slice: j, total });
        }
        for c in 0..d {
            let s: f64 = (0..n).map(|i| w[i * m + j] * h.at(i, c)).sum();
            out.set(j, c, s / total);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_slice_is_plain_mean() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::randn(&[5, 3], 1.0, &mut r);
        let w = Tensor::randn(&[1, 3], 1.0, &mut r);
        let z = slicing_compress(&h, &w, SliceAxis::Slices).unwrap();
        for c in 0..3 {
            let mean = (0..5).map(|i| h.at(i, c)).sum::<f64>() / 5.0;
            assert!((z.at(0, c) - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_rows_give_that_row() {
        let row = [0.3, -1.2];
        let h = Tensor::from_rows(&[&row, &row, &row]);
        let w = Tensor::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        for axis in [SliceAxis::Slices, SliceAxis::Points] {
            let z = slicing_compress(&h, &w, axis).unwrap();
            for j in 0..2 {
                for c in 0..2 {
                    assert!((z.at(j, c) - row[c]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn four_points_two_slices_match_stepwise_oracle() {
        let h = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[-1.0, 0.5]]);
        let w = Tensor::from_rows(&[&[0.5, -0.5], &[2.0, 1.0]]);
        // Softmax over the two slices per point, by hand.
        let mut weights = [[0.0f64; 2]; 4];
        for i in 0..4 {
            let l: Vec<f64> = (0..2).map(|j| h.at(i, 0) * w.at(j, 0) + h.at(i, 1) * w.at(j, 1)).collect();
            let z = l[0].exp() + l[1].exp();
            weights[i] = [l[0].exp() / z, l[1].exp() / z];
        }
        let z = slicing_compress(&h, &w, SliceAxis::Slices).unwrap();
        for j in 0..2 {
            let tot: f64 = (0..4).map(|i| weights[i][j]).sum();
            for c in 0..2 {
                let e = (0..4).map(|i| weights[i][j] * h.at(i, c)).sum::<f64>() / tot;
                assert!((z.at(j, c) - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn underflowing_slice_is_reported() {
        // Slice 1 loses every point by ~1e4 in logit, so its mass underflows.
        let h = Tensor::from_rows(&[&[1.0], &[1.0]]);
        let w = Tensor::from_rows(&[&[0.0], &[-1.0e4]]);
        let err = slicing_compress(&h, &w, SliceAxis::Slices).unwrap_err();
        assert!(matches!(err, Error::Degeneracy { slice: 1, .. }), "{err}");
    }
}
