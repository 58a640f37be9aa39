use super::tensor::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Relative errors below this denominator are measured against it instead, so
/// vanishing gradients do not blow up the ratio.
const DENOM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients against central finite differences.
///
/// `f` evaluates the scalar loss and, when given a buffer, accumulates the
/// analytic gradient into it. `max_per_tensor` limits the entries probed per
/// parameter tensor (evenly strided) to keep large models tractable.
pub fn grad_check<F>(
    params: &mut ParamStore<f64>,
    f: F,
    eps: f64,
    max_per_tensor: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, Option<&mut Gradients<f64>>) -> Result<f64>,
{
    let mut analytic = params.zero_grads();
    let l0 = f(params, Some(&mut analytic))?;
    let l1 = f(params, None)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::GradCheck(format!(
            "forward is not deterministic ({l0} vs {l1})"
        )));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let probes: Vec<usize> = match max_per_tensor {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        for j in probes {
            let orig = params.data(id)[j];
            params.data_mut(id)[j] = orig + eps;
            let lp = f(params, None)?;
            params.data_mut(id)[j] = orig - eps;
            let lm = f(params, None)?;
            params.data_mut(id)[j] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic.get(id)[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Input, InputLayout, Linear};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    #[test]
    fn linear_squared_loss_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::<f64>::new();
        let lin = Linear::new(&mut ps, "lin", InputLayout::dense(4), 3, &mut rng).unwrap();
        let x = [0.5, -1.0, 2.0, 0.25];
        let target = [0.1, 0.2, -0.3];
        let report = grad_check(
            &mut ps,
            |ps, grads| {
                let y = lin.forward(ps, Input::dense(&x))?;
                let diff: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
                if let Some(g) = grads {
                    lin.backward(ps, Input::dense(&x), &diff, g, None);
                }
                Ok(0.5 * diff.iter().map(|d| d * d).sum::<f64>())
            },
            1e-5,
            None,
        )
        .unwrap();
        assert_eq!(report.checked, 15);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn nondeterministic_forward_is_rejected() {
        let mut ps = ParamStore::<f64>::new();
        ps.add("w", crate::nn::Tensor::vector(vec![1.0])).unwrap();
        let calls = Cell::new(0.0);
        let out = grad_check(
            &mut ps,
            |_, _| {
                calls.set(calls.get() + 1.0);
                Ok(calls.get())
            },
            1e-5,
            None,
        );
        assert!(matches!(out, Err(Error::GradCheck(_))));
    }
}
