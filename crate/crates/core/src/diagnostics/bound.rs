use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn one() -> f64 {
    1.0
}

/// Inputs of the bound. `delta`, `l_max` and `c` are user estimates; the
/// gradient quantities usually come from probes of a trained run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    /// Initial optimality gap Δ.
    pub delta: f64,
    pub eta: f64,
    pub rounds: f64,
    pub local_epochs: f64,
    #[serde(default = "one")]
    pub c: f64,
    pub l_max: f64,
    pub g_t2: f64,
    pub sigma_t2: f64,
    /// ‖∇L(θ_t)‖².
    pub grad_norm_sq: f64,
    pub h: f64,
}

/// Terms of the right-hand side. Every value is an estimate built from the
/// measured or user-supplied constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// `2Δ / (η√T)`.
    pub gap_term: f64,
    /// `c·E²·(‖∇L‖² + H)`.
    pub drift: f64,
    /// `(L_max·η/√T)·(G_T² + σ_T² + Γ_drift)`.
    pub variance_term: f64,
    pub total: f64,
}

pub fn theorem1_bound(inp: &BoundInputs) -> Result<BoundReport> {
    if !(inp.eta > 0.0 && inp.eta.is_finite()) {
        return Err(Error::Config(format!("eta must be positive, got {}", inp.eta)));
    }
    if !(inp.rounds > 0.0 && inp.rounds.is_finite()) {
        return Err(Error::Config(format!("rounds must be positive, got {}", inp.rounds)));
    }
    let sqrt_t = inp.rounds.sqrt();
    let gap_term = 2.0 * inp.delta / (inp.eta * sqrt_t);
    let drift = inp.c * inp.local_epochs * inp.local_epochs * (inp.grad_norm_sq + inp.h);
    let variance_term = inp.l_max * inp.eta / sqrt_t * (inp.g_t2 + inp.sigma_t2 + drift);
    Ok(BoundReport {
        gap_term,
        drift,
        variance_term,
        total: gap_term + variance_term,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn base() -> BoundInputs {
        BoundInputs {
            delta: 1.0,
            eta: 0.1,
            rounds: 100.0,
            local_epochs: 0.0,
            c: 1.0,
            l_max: 0.0,
            g_t2: 0.0,
            sigma_t2: 0.0,
            grad_norm_sq: 0.0,
            h: 0.0,
        }
    }

    #[test]
    fn gap_only() {
        let r = theorem1_bound(&base()).unwrap();
        assert!((r.total - 2.0).abs() < 1e-12);
        assert_eq!(r.variance_term, 0.0);
    }

    #[test]
    fn doubling_rounds_scales_by_inverse_sqrt2() {
        let inp = BoundInputs {
            local_epochs: 2.0,
            l_max: 3.0,
            g_t2: 0.5,
            sigma_t2: 0.25,
            grad_norm_sq: 0.1,
            h: 0.2,
            ..base()
        };
        let a = theorem1_bound(&inp).unwrap();
        let b = theorem1_bound(&BoundInputs { rounds: 200.0, ..inp }).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((b.gap_term - a.gap_term * s).abs() < 1e-12);
        assert!((b.variance_term - a.variance_term * s).abs() < 1e-12);
    }

    #[test]
    fn full_vector_by_hand() {
        let inp = BoundInputs {
            delta: 2.5,
            eta: 0.05,
            rounds: 64.0,
            local_epochs: 3.0,
            c: 0.5,
            l_max: 4.0,
            g_t2: 1.2,
            sigma_t2: 0.3,
            grad_norm_sq: 0.8,
            h: 0.4,
        };
        let r = theorem1_bound(&inp).unwrap();
        // gap = 5 / (0.05·8) = 12.5; drift = 0.5·9·1.2 = 5.4
        // variance = (4·0.05/8)·(1.2 + 0.3 + 5.4) = 0.025·6.9 = 0.1725
        assert!((r.gap_term - 12.5).abs() < 1e-12);
        assert!((r.drift - 5.4).abs() < 1e-12);
        assert!((r.variance_term - 0.1725).abs() < 1e-12);
        assert!((r.total - 12.6725).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_eta_or_rounds_fail() {
        assert!(theorem1_bound(&BoundInputs { eta: 0.0, ..base() }).is_err());
        assert!(theorem1_bound(&BoundInputs { rounds: 0.0, ..base() }).is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_every_input(v in proptest::collection::vec(0.0f64..10.0, 8), bump in 0.01f64..5.0, t in 1.0f64..1000.0) {
            let inp = BoundInputs {
                delta: v[0], eta: 0.01 + v[1], rounds: t, local_epochs: v[2], c: v[3],
                l_max: v[4], g_t2: v[5], sigma_t2: v[6], grad_norm_sq: v[7], h: v[0] * v[1],
            };
            let r0 = theorem1_bound(&inp).unwrap().total;
            prop_assert!(r0 >= 0.0);
            let later = theorem1_bound(&BoundInputs { rounds: t + bump, ..inp.clone() }).unwrap().total;
            prop_assert!(later <= r0 + 1e-12 * r0.abs());
            let bumped = [
                BoundInputs { delta: inp.delta + bump, ..inp.clone() },
                BoundInputs { g_t2: inp.g_t2 + bump, ..inp.clone() },
                BoundInputs { sigma_t2: inp.sigma_t2 + bump, ..inp.clone() },
                BoundInputs { h: inp.h + bump, ..inp.clone() },
                BoundInputs { local_epochs: inp.local_epochs + bump, ..inp.clone() },
                BoundInputs { c: inp.c + bump, ..inp.clone() },
            ];
            for b in bumped {
                prop_assert!(theorem1_bound(&b).unwrap().total >= r0 - 1e-12 * r0.abs());
            }
        }
    }
}
