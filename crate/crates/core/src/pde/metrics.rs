//! Field error metrics. Tensors of rank 3 are `[samples, points, channels]`;
//! any other rank is treated as a single sample.

use crate::autodiff::GridSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn samples<'a>(pred: &'a Tensor, target: &'a Tensor, op: &'static str) -> Result<Vec<(&'a [f64], &'a [f64])>> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(op, pred.shape(), target.shape()));
    }
    let count = if pred.rank() == 3 { pred.shape()[0] } else { 1 };
    if count == 0 || pred.numel() == 0 {
        return Err(Error::Contract(format!("{op} of an empty batch")));
    }
    let per = pred.numel() / count;
    Ok(pred
        .data()
        .chunks_exact(per)
        .zip(target.data().chunks_exact(per))
        .collect())
}

/// Mean over samples of `|pred - target|_2 / |target|_2`.
pub fn relative_l2(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let pairs = samples(pred, target, "relative_l2")?;
    let mut acc = 0.0;
    for (p, t) in &pairs {
        let den = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        if den == 0.0 {
            return Err(Error::Domain("relative L2 against a zero-norm target".into()));
        }
        let num = p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        acc += num / den;
    }
    Ok(acc / pairs.len() as f64)
}

/// Mean over samples of the squared L2 norm of the difference.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let pairs = samples(pred, target, "mse")?;
    let total: f64 = pairs
        .iter()
        .map(|(p, t)| p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Relative L2 of finite-difference spatial gradients, averaged over
/// samples. Points must be the nodes of `grid` in row-major order.
pub fn grad_metric_lg(pred: &Tensor, target: &Tensor, grid: &GridSpec) -> Result<f64> {
    if pred.rank() < 2 {
        return Err(Error::Contract("gradient metric needs [.., points, channels] fields".into()));
    }
    let n = pred.shape()[pred.rank() - 2];
    if n != grid.numel() {
        return Err(Error::Contract(format!(
            "{n} points do not form the {:?} grid",
            grid.extents
        )));
    }
    let pairs = samples(pred, target, "grad_metric_lg")?;
    let ch = pred.last_dim();
    let mut acc = 0.0;
    let mut field = vec![0.0; n];
    for (p, t) in &pairs {
        let (mut num, mut den) = (0.0, 0.0);
        for c in 0..ch {
            for i in 0..n {
                field[i] = p[i * ch + c] - t[i * ch + c];
            }
            num += grid.gradient(&field)?.iter().map(|v| v * v).sum::<f64>();
            for i in 0..n {
                field[i] = t[i * ch + c];
            }
            den += grid.gradient(&field)?.iter().map(|v| v * v).sum::<f64>();
        }
        if den == 0.0 {
            return Err(Error::Domain("gradient metric against a target with zero gradient".into()));
        }
        acc += (num / den).sqrt();
    }
    Ok(acc / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relative_l2_examples() {
        let t = Tensor::from_vec(&[2, 3, 1], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
        assert_eq!(relative_l2(&t, &t).unwrap(), 0.0);
        assert_eq!(relative_l2(&Tensor::zeros(&[2, 3, 1]), &t).unwrap(), 1.0);
        assert!((relative_l2(&t.scale(1.1), &t).unwrap() - 0.1).abs() < 1e-15);
        let z = Tensor::zeros(&[1, 3, 1]);
        assert!(matches!(relative_l2(&z, &z), Err(Error::Domain(_))));
    }

    #[test]
    fn mse_examples_and_loop_oracle() {
        let t = Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        let mut p = t.clone();
        p.data_mut()[0] += 0.5;
        p.data_mut()[1] += 0.5;
        p.data_mut()[2] += 0.5;
        p.data_mut()[3] += 0.5;
        assert!((mse(&p, &t).unwrap() - 2.0 * 0.25).abs() < 1e-15);

        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[3, 4, 2], 1.0, &mut r);
        let b = Tensor::randn(&[3, 4, 2], 1.0, &mut r);
        let mut oracle = 0.0;
        for s in 0..3 {
            for k in 0..8 {
                let dv = a.data()[s * 8 + k] - b.data()[s * 8 + k];
                oracle += dv * dv;
            }
        }
        assert!((mse(&a, &b).unwrap() - oracle / 3.0).abs() < 1e-14);
        assert!(mse(&a, &Tensor::zeros(&[3, 4, 1])).is_err());
    }

    #[test]
    fn gradient_metric_examples() {
        let grid = GridSpec::new(&[6], &[0.2]).unwrap();
        let ramp = Tensor::from_vec(&[1, 6, 1], (0..6).map(|i| i as f64 * 0.3).collect()).unwrap();
        assert_eq!(grad_metric_lg(&ramp, &ramp, &grid).unwrap(), 0.0);
        let shifted = ramp.map(|v| v + 4.0);
        assert!(grad_metric_lg(&shifted, &ramp, &grid).unwrap() < 1e-14);
        let zero = Tensor::zeros(&[1, 6, 1]);
        assert!((grad_metric_lg(&zero, &ramp, &grid).unwrap() - 1.0).abs() < 1e-15);
        let wrong = GridSpec::new(&[2, 2], &[0.5, 0.5]).unwrap();
        assert!(matches!(grad_metric_lg(&zero, &ramp, &wrong), Err(Error::Contract(_))));
    }
}
