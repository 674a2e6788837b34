//! Element-wise `arctanh` bounding between the open box (-1, 1) and R.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Largest magnitude a perturbed imitation target may take.
pub const ACTION_CLIP: f64 = 1.0 - 1e-4;

/// `z = arctanh(a)` with `log|det dz/da| = sum -log(1 - a^2)` per row.
pub fn bound_forward<T: Scalar>(a: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let mut z = Tensor::zeros(a.rows(), a.cols());
    let mut log_det = Vec::with_capacity(a.rows());
    for i in 0..a.rows() {
        let mut ld = T::zero();
        for (j, (&x, o)) in a.row(i).iter().zip(z.row_mut(i)).enumerate() {
            if !(x.abs() < T::one()) {
                return Err(Error::Domain(format!(
                    "action entry ({i}, {j}) = {x} is outside (-1, 1)"
                )));
            }
            *o = x.atanh();
            ld -= (T::one() - x * x).ln();
        }
        log_det.push(ld);
    }
    Ok((z, log_det))
}

/// `a = tanh(z)` with `log|det da/dz| = sum log(1 - tanh(z)^2)` per row.
pub fn bound_inverse<T: Scalar>(z: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let a = z.map(|x| x.tanh());
    let log_det = (0..z.rows())
        .map(|i| z.row(i).iter().map(|&x| crate::graph::log_dtanh(x)).sum())
        .collect();
    (a, log_det)
}

/// Clamps into `[-ACTION_CLIP, ACTION_CLIP]`.
pub fn clip_action<T: Scalar>(x: T) -> T {
    let c: T = lit(ACTION_CLIP);
    x.max(-c).min(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_action_has_zero_latent_and_log_det() {
        let a = Tensor::<f64>::zeros(1, 3);
        let (z, ld) = bound_forward(&a).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(ld, vec![0.0]);
    }

    #[test]
    fn half_has_closed_form_log_det() {
        let a = Tensor::from_vec(1, 1, vec![0.5f64]).unwrap();
        let (_, ld) = bound_forward(&a).unwrap();
        assert!((ld[0] - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((ld[0] - 0.28768).abs() < 1e-5);
    }

    #[test]
    fn boundary_is_a_domain_error() {
        let a = Tensor::from_vec(1, 2, vec![0.2f64, 1.0]).unwrap();
        assert!(matches!(bound_forward(&a), Err(Error::Domain(_))));
        let a = Tensor::from_vec(1, 1, vec![f64::NAN]).unwrap();
        assert!(matches!(bound_forward(&a), Err(Error::Domain(_))));
    }

    #[test]
    fn log_det_matches_finite_difference_jacobian() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f64>::from_fn(1, 6, |_, _| rng.gen_range(-0.9..0.9));
        let (_, ld) = bound_forward(&a).unwrap();
        // Element-wise map: Jacobian is diagonal, so log|det| = sum log|dz_i/da_i|.
        let h = 1e-6;
        let fd: f64 = a
            .data()
            .iter()
            .map(|&x| (((x + h).atanh() - (x - h).atanh()) / (2.0 * h)).ln())
            .sum();
        assert!((ld[0] - fd).abs() < 1e-4);
    }

    #[test]
    fn inverse_inverts_forward() {
        let a = Tensor::from_vec(1, 3, vec![-0.7f64, 0.1, 0.95]).unwrap();
        let (z, ldf) = bound_forward(&a).unwrap();
        let (back, ldi) = bound_inverse(&z);
        for (x, y) in a.data().iter().zip(back.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((ldf[0] + ldi[0]).abs() < 1e-9);
    }
}
