//! Central-difference gradient oracle.

use super::Real;
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose ±ε perturbation changed the piecewise regime
    /// (ReLU sign, pooling winner, log clamp) and so were excluded.
    pub skipped: usize,
}

/// Compares `analytic` against `(f(p+ε) − f(p−ε)) / 2ε` coordinate by coordinate.
///
/// `f` returns the objective together with a regime fingerprint
/// ([`super::Tape::regime`]); use a constant fingerprint for smooth functions.
pub fn finite_diff_check<R, F>(mut f: F, params: &[R], analytic: &[R], epsilon: f64) -> Result<FdReport>
where
    R: Real,
    F: FnMut(&[R]) -> Result<(R, u64)>,
{
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(Error::Contract(format!("epsilon must be positive, got {epsilon}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::dim(
            "finite_diff_check",
            format!("{} analytic gradients for {} parameters", analytic.len(), params.len()),
        ));
    }
    let (_, base_regime) = f(params)?;
    let eps = R::from_f64_lossy(epsilon);
    let mut probe = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
    };
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let (up, r_up) = f(&probe)?;
        probe[i] = orig - eps;
        let (down, r_down) = f(&probe)?;
        probe[i] = orig;
        if r_up != base_regime || r_down != base_regime {
            report.skipped += 1;
            continue;
        }
        // Use the step actually representable in R.
        let h = (orig + eps).to_f64().unwrap() - (orig - eps).to_f64().unwrap();
        let numeric = (up.to_f64().unwrap() - down.to_f64().unwrap()) / h;
        let a = analytic[i].to_f64().unwrap();
        let rel = (a - numeric).abs() / numeric.abs().max(1.0);
        report.checked += 1;
        if report.worst_index.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Tape, Tensor};

    #[test]
    fn quadratic_is_exact_in_double() {
        // f(p) = Σ (i+1) p_i² + p_0 p_1
        let f = |p: &[f64]| -> Result<(f64, u64)> {
            let v = p.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x * x).sum::<f64>() + p[0] * p[1];
            Ok((v, 0))
        };
        let p = [0.3, -1.2, 2.5];
        let g = [2.0 * 0.3 + -1.2, 4.0 * -1.2 + 0.3, 6.0 * 2.5];
        let r = finite_diff_check(f, &p, &g, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn relu_kink_is_excluded() {
        let f = |p: &[f64]| -> Result<(f64, u64)> {
            let mut tape = Tape::with_regime_tracking();
            let w = tape.param(Tensor::new(&[2], p.to_vec())?);
            let r = tape.relu(w)?;
            let s = tape.sum(r);
            Ok((tape.value(s).item()?, tape.regime()))
        };
        // Coordinate 0 sits exactly on the kink; the analytic subgradient 0
        // disagrees with the symmetric difference 0.5 but must not be checked.
        let r = finite_diff_check(f, &[0.0, 1.0], &[0.0, 1.0], 1e-5).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn rejects_nonpositive_epsilon() {
        let f = |_: &[f64]| -> Result<(f64, u64)> { Ok((0.0, 0)) };
        assert!(finite_diff_check(f, &[1.0], &[0.0], 0.0).is_err());
    }
}
