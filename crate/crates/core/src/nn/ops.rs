use serde::{Deserialize, Serialize};

use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply<S: Real>(self, x: S) -> S {
        match self {
            Activation::Relu => x.max(S::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub fn grad_from_output<S: Real>(self, y: S) -> S {
        match self {
            Activation::Relu => {
                if y > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => S::one() - y * y,
            Activation::Linear => S::one(),
        }
    }
}

#[inline]
pub fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn sigmoid_vec<S: Real>(scores: &[S]) -> Vec<S> {
    scores.iter().map(|&x| sigmoid(x)).collect()
}

/// Temperature softmax with max subtraction.
pub fn softmax_tau<S: Real>(scores: &[S], tau: f64) -> Result<Vec<S>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!(
            "softmax temperature must be > 0, got {tau}"
        )));
    }
    if scores.is_empty() {
        return Err(Error::Parameter(
            "softmax over an empty score vector".into(),
        ));
    }
    Ok(softmax_unchecked(scores, S::lit(tau)))
}

pub(crate) fn softmax_unchecked<S: Real>(scores: &[S], tau: S) -> Vec<S> {
    let max = scores.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    let mut out: Vec<S> = scores.iter().map(|&x| ((x - max) / tau).exp()).collect();
    let z: S = out.iter().copied().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

pub(crate) fn log_softmax<S: Real>(scores: &[S], tau: S) -> Vec<S> {
    let max = scores.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    let lse = scores
        .iter()
        .map(|&x| ((x - max) / tau).exp())
        .sum::<S>()
        .ln();
    scores.iter().map(|&x| (x - max) / tau - lse).collect()
}

#[inline]
pub(crate) fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<S: Real>(alpha: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn argmax<S: Real>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_closed_forms() {
        let p = softmax_tau(&[3.0f64, 3.0, 3.0], 0.7).unwrap();
        for x in p {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-12);
        }
        let p = softmax_tau(&[0.0f64, 3f64.ln()], 1.0).unwrap();
        assert_abs_diff_eq!(p[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.75, epsilon = 1e-12);
        let p = softmax_tau(&[1000.0f32, 0.0], 1.0).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-6);
        assert!(p[1] < 1e-6);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(softmax_tau(&[1.0f32], 0.0).is_err());
        assert!(softmax_tau(&[1.0f32], -1.0).is_err());
        assert!(softmax_tau::<f32>(&[], 1.0).is_err());
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_vec(&[0.0f64]), vec![0.5]);
        let s = sigmoid_vec(&[-2.3f64, 2.3]);
        assert_abs_diff_eq!(s[0] + s[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sigmoid(3f64.ln()), 0.75, epsilon = 1e-12);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let u = [0.3f64, -1.2, 2.0, 0.0];
        let p = softmax_tau(&u, 0.5).unwrap();
        let lp = log_softmax(&u, 0.5);
        for (a, b) in p.iter().zip(lp) {
            assert_abs_diff_eq!(a.ln(), b, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_equivariant(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..12),
            tau in 0.05f64..5.0,
            rot in 0usize..12,
        ) {
            let p = softmax_tau(&xs, tau).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let k = rot % xs.len();
            let mut rotated = xs.clone();
            rotated.rotate_left(k);
            let mut pr = p.clone();
            pr.rotate_left(k);
            let q = softmax_tau(&rotated, tau).unwrap();
            for (a, b) in pr.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn sigmoid_strictly_inside_unit_interval(x in -30.0f64..30.0) {
            let s = sigmoid(x);
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}
