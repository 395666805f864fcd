//! Norms and the central-difference gradient oracle.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// `sqrt` of the sum of squares over every entry of every tensor.
pub fn global_l2_norm(params: &[Tensor]) -> Result<f64> {
    if params.is_empty() {
        return Err(Error::Precondition("global_l2_norm of empty list".into()));
    }
    let mut acc = 0.0;
    for t in params {
        t.check_finite("global_l2_norm input")?;
        acc += t.data().iter().map(|v| v * v).sum::<f64>();
    }
    Ok(math::sqrt(acc))
}

/// Central differences `(L(θ + h e_d) − L(θ − h e_d)) / 2h` for every scalar
/// coordinate `d` of every tensor.
pub fn finite_diff_gradient<F>(mut loss_fn: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Precondition("finite difference step must be > 0".into()));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads: Vec<Tensor> = params.iter().map(Tensor::zeros_like).collect();
    for b in 0..work.len() {
        for d in 0..work[b].len() {
            let orig = work[b].data()[d];
            work[b].data_mut()[d] = orig + h;
            let plus = loss_fn(&work);
            work[b].data_mut()[d] = orig - h;
            let minus = loss_fn(&work);
            work[b].data_mut()[d] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("finite-difference loss"));
            }
            grads[b].data_mut()[d] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// Largest coordinate error between two gradients, relative to the largest
/// gradient magnitude in the pair. Returns 0 when both are identically zero.
pub fn max_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(reference)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_stream;
    use alloc::vec;

    #[test]
    fn norm_examples() {
        assert_eq!(global_l2_norm(&[Tensor::zeros(&[3, 3])]).unwrap(), 0.0);
        let parts = [Tensor::vector(&[3.0]).unwrap(), Tensor::vector(&[4.0]).unwrap()];
        assert_eq!(global_l2_norm(&parts).unwrap(), 5.0);
        assert!(global_l2_norm(&[]).is_err());
    }

    #[test]
    fn norm_matches_recompute() {
        let mut rng = seeded_stream(3, 9);
        let t = Tensor::from_vec(&[100], rng.normal_vec(100)).unwrap();
        let brute: f64 = t.data().iter().map(|v| v * v).sum::<f64>();
        let n = global_l2_norm(&[t]).unwrap();
        assert!((n - math::sqrt(brute)).abs() <= 1e-12 * n);
    }

    #[test]
    fn norm_is_partition_invariant() {
        let mut rng = seeded_stream(3, 10);
        let v = rng.normal_vec(12);
        let whole = global_l2_norm(&[Tensor::vector(&v).unwrap()]).unwrap();
        let split = global_l2_norm(&[
            Tensor::vector(&v[7..]).unwrap(),
            Tensor::from_vec(&[7], v[..7].to_vec()).unwrap(),
        ])
        .unwrap();
        assert!((whole - split).abs() <= 1e-14 * whole);
    }

    #[test]
    fn fd_quadratic_and_constant() {
        let theta = vec![Tensor::vector(&[1.0, -2.0, 3.0]).unwrap()];
        let g = finite_diff_gradient(
            |p| 0.5 * p[0].data().iter().map(|v| v * v).sum::<f64>(),
            &theta,
            1e-5,
        )
        .unwrap();
        for (a, b) in g[0].data().iter().zip([1.0, -2.0, 3.0]) {
            assert!((a - b).abs() < 1e-8);
        }
        let g = finite_diff_gradient(|_| 4.0, &theta, 1e-5).unwrap();
        assert!(g[0].data().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn fd_rejects_non_finite() {
        let theta = vec![Tensor::vector(&[1.0]).unwrap()];
        assert!(finite_diff_gradient(|_| f64::NAN, &theta, 1e-5).is_err());
        assert!(finite_diff_gradient(|_| 0.0, &theta, 0.0).is_err());
    }
}
