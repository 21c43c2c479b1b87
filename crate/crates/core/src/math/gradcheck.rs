use crate::error::{Error, Result};

/// Central-difference gradient `(L(θ+ε)−L(θ−ε))/(2ε)` per coordinate.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Validation(format!("finite-difference step {eps}")));
    }
    let mut theta = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        theta[i] = params[i] + eps;
        let plus = loss_fn(&theta)?;
        theta[i] = params[i] - eps;
        let minus = loss_fn(&theta)?;
        theta[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss evaluation around coordinate {i}"
            )));
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Largest relative error `|a−b| / max(|a|, |b|, floor)` over two gradients.
///
/// The floor keeps coordinates whose true gradient is (near) zero from
/// dominating through round-off in the numeric estimate.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_constant() {
        let g = finite_diff_grad(|t| Ok(t[0] * t[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| Ok(4.2), &[1.0, -1.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_eps_and_nonfinite() {
        assert!(finite_diff_grad(|t| Ok(t[0]), &[1.0], 0.0).is_err());
        assert!(matches!(
            finite_diff_grad(|t| Ok(1.0 / (t[0] - 1e-5)), &[0.0], 1e-5),
            Err(Error::NonFinite(_))
        ));
    }
}
