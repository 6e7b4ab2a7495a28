//! Central-difference gradient checking.

use super::{no_grad, with_relu_probe, Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    /// Largest |analytic − numeric| / max(|analytic|, |numeric|, 1e-8).
    pub max_rel_err: f64,
    /// (input index, element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates skipped because a perturbation flipped some relu.
    pub kinks: usize,
    pub tol: f64,
    pub passed: bool,
}

fn eval_scalar(out: Result<Tensor>) -> Result<f64> {
    let out = out?;
    let v = out.item()?;
    if !v.is_finite() {
        return Err(TensorError::Numeric(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Checks d f / d x for every element of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let coords: Vec<(usize, usize)> = (0..x.numel()).map(|j| (0, j)).collect();
    finite_diff_check_coords(|xs: &[Tensor]| f(&xs[0]), std::slice::from_ref(x), &coords, h, tol)
}

/// Checks the listed `(input, element)` coordinates of a scalar function of
/// several tensors.
pub fn finite_diff_check_coords<F>(
    f: F,
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    h: f64,
    tol: f64,
) -> Result<FiniteDiffReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if let Some(bad) = inputs.iter().find(|t| t.data().iter().any(|v| !v.is_finite())) {
        return Err(TensorError::Numeric(format!(
            "non-finite input of shape {:?}",
            bad.dims()
        )));
    }
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach().into_param()).collect();
    let (out, base_pattern) = with_relu_probe(|| f(&leaves));
    let out = out?;
    eval_scalar(Ok(out.clone()))?;
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let _guard = no_grad();
    let frozen: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        kinks: 0,
        tol,
        passed: true,
    };
    for &(i, j) in coords {
        let shifted = |delta: f64| -> Result<(f64, u64)> {
            let mut data = frozen[i].to_vec();
            data[j] += delta;
            let mut xs = frozen.clone();
            xs[i] = Tensor::from_shape(frozen[i].shape().clone(), data)?;
            let (v, pattern) = with_relu_probe(|| eval_scalar(f(&xs)));
            Ok((v?, pattern))
        };
        let (fp, pp) = shifted(h)?;
        let (fm, pm) = shifted(-h)?;
        if pp != base_pattern || pm != base_pattern {
            report.kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i][j];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((i, j));
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::new(vec![0.1, -0.7, 0.4, 0.9], &[4]).unwrap();
        let r = finite_diff_check(|x| Ok(x.sum()), &x, 1e-5, 1e-9).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn relu_kink_excluded() {
        let x = Tensor::new(vec![0.0, 0.5, -0.5], &[3]).unwrap();
        let r = finite_diff_check(|x| Ok(x.relu().sum()), &x, 1e-5, 1e-6).unwrap();
        assert_eq!(r.kinks, 1);
        assert_eq!(r.checked, 2);
        assert!(r.passed);
    }

    #[test]
    fn nan_objective_is_numeric_error() {
        let x = Tensor::new(vec![1.0], &[1]).unwrap();
        let r = finite_diff_check(|x| Ok(x.scale(f64::NAN).sum()), &x, 1e-5, 1e-6);
        assert!(matches!(r, Err(TensorError::Numeric(_))));
    }

    #[test]
    fn wrong_gradient_detected() {
        // custom op whose backward is off by a factor of two
        let x = Tensor::new(vec![0.3, 0.6], &[2]).unwrap();
        let r = finite_diff_check(
            |x| {
                let data = x.data().iter().map(|v| v * 3.0).collect();
                let y = Tensor::from_op("bad", x.shape().clone(), data, vec![x.clone()], |g| {
                    vec![Some(g.iter().map(|v| v * 6.0).collect())]
                });
                Ok(y.sum())
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_err - 0.5).abs() < 1e-6);
    }
}
