//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All math is written against [`Real`], implemented for `f32` and `f64`.
//! The stated tolerances (1e-12 and below) only hold for `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float + FloatConst + FromPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Inner product in index order.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `log Σ exp(x)` with max subtraction. Returns `-inf` for an empty slice.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let sum: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of `logits / temperature` restricted to entries where `mask` is
/// true. Masked-out entries are skipped before exponentiation and come back
/// as exactly zero. Returns `None` when no entry is selected.
pub fn masked_softmax<T: Real>(logits: &[T], mask: &[bool], temperature: T) -> Option<Vec<T>> {
    debug_assert_eq!(logits.len(), mask.len());
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x / temperature)
        .fold(None, |acc: Option<T>, x| Some(acc.map_or(x, |a| a.max(x))))?;
    let mut out: Vec<T> = logits
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { (x / temperature - max).exp() } else { T::zero() })
        .collect();
    let total: T = out.iter().copied().sum();
    for w in &mut out {
        *w = *w / total;
    }
    Some(out)
}

/// Plain softmax over all entries.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&x| (x - lse).exp()).collect()
}

/// Logistic sigmoid, evaluated on the branch that cannot overflow.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn mean<T: Real>(xs: &[T]) -> T {
    let n = T::from_usize_lossy(xs.len());
    xs.iter().copied().sum::<T>() / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_is_stable_for_large_inputs() {
        let v = log_sum_exp(&[1000.0_f64, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let w = masked_softmax(&[3.0_f64, 1e9, 3.0], &[true, false, true], 1.0).unwrap();
        assert_eq!(w[1], 0.0);
        assert!((w[0] - 0.5).abs() < 1e-15);
        assert!(masked_softmax(&[1.0_f64], &[false], 1.0).is_none());
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        assert_eq!(sigmoid(0.0_f64), 0.5);
        assert!(sigmoid(-800.0_f64) >= 0.0);
        assert_eq!(sigmoid(800.0_f64), 1.0);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!((sigmoid(3f32.ln()) - 0.75).abs() < 1e-6);
    }
}
