use crate::error::{Error, Result};

/// Central-difference gradient of `loss` at `point`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut loss: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut p = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss(&p)?;
        p[i] = orig - h;
        let down = loss(&p)?;
        p[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Floor on the denominator of [`relative_error`]; keeps components that are
/// zero in both gradients from dividing by zero.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// Largest componentwise `|a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|p| Ok(p[0] * p[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_loss_is_flat() {
        let g = finite_diff_grad(|_| Ok(4.2), &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(finite_diff_grad(|_| Ok(0.0), &[1.0], 0.0).is_err());
        assert!(finite_diff_grad(|_| Ok(0.0), &[1.0], -1e-5).is_err());
    }
}
