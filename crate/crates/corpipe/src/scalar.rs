//! Scalar abstraction: all numeric code is generic over the float type.

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Floating-point scalar usable in every numeric routine of this crate.
pub trait Scalar: NdFloat + FromPrimitive {
    fn from_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }
    fn from_usize_(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize conversion")
    }
}

impl<T> Scalar for T where T: NdFloat + FromPrimitive {}

/// Numerically stable log-sum-exp over a slice; returns `-inf` for an empty
/// slice or when every entry is `-inf`.
pub fn log_sum_exp<F: Scalar>(xs: &[F]) -> F {
    let mut max = F::neg_infinity();
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    if !max.is_finite() {
        return max;
    }
    let mut sum = F::zero();
    for &x in xs {
        sum = sum + (x - max).exp();
    }
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_direct() {
        let xs = [1.0f64, 2.0, 3.0];
        let direct = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()).ln();
        assert!((log_sum_exp(&xs) - direct).abs() < 1e-12);
    }

    #[test]
    fn lse_handles_neg_infinity() {
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
        let xs = [f64::NEG_INFINITY, 0.0];
        assert!((log_sum_exp(&xs) - 0.0).abs() < 1e-12);
    }
}
