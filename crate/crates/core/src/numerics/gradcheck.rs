use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor for relative errors, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate (parameter, element) where the maximum was observed.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates skipped because the function has a kink within `h`.
    pub excluded: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic gradients against central differences.
///
/// `f(params, want_grad)` returns the loss and, when asked, one gradient
/// tensor per parameter. A coordinate where the one-sided slopes disagree
/// by more than `max(1e-2, 1e-2 · |slope|)` sits on a non-differentiable
/// point (e.g. relu at 0) and is excluded.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>], bool) -> Result<(f64, Option<Vec<Tensor<f64>>>)>,
{
    let (f0, grads) = f(params, true)?;
    let grads = grads.expect("gradient requested");
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, excluded: 0 };
    for p in 0..params.len() {
        for j in 0..params[p].len() {
            let orig = params[p].data()[j];
            work[p].data_mut()[j] = orig + h;
            let (fp, _) = f(&work, false)?;
            work[p].data_mut()[j] = orig - h;
            let (fm, _) = f(&work, false)?;
            work[p].data_mut()[j] = orig;
            let right = (fp - f0) / h;
            let left = (f0 - fm) / h;
            if (right - left).abs() > 1e-2 * right.abs().max(left.abs()).max(1.0) {
                report.excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(grads[p].data()[j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((p, j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64([1, v.len()], v).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let coef = [0.3, -1.7, 2.5, 4.0];
        let r = finite_diff_check(
            |p, _| {
                let v = p[0].data().iter().zip(coef).map(|(x, c)| x * c).sum();
                Ok((v, Some(vec![t(&coef)])))
            },
            &[t(&[1.0, 2.0, -3.0, 0.5])],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn relu_kink_is_excluded() {
        let r = finite_diff_check(
            |p, want| {
                let mut g = Graph::eval();
                let x = g.param(p[0].clone(), 0)?;
                let y = g.relu(x)?;
                let s = g.sum(y)?;
                let v = g.value(s).item();
                let grads = if want { Some(vec![g.backward(s)?.param(0).unwrap().clone()]) } else { None };
                Ok((v, grads))
            },
            &[t(&[0.0, 1.5, -2.0])],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-9);
    }
}
