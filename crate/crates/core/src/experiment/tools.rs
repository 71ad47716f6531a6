//! Gradient check of the full local objective and bound evaluation from files.

use std::path::Path;

use super::{initial_model, ExperimentConfig};
use crate::data::generate_dataset;
use crate::diagnostics::{theorem1_bound, BoundInputs, BoundReport};
use crate::error::{Error, Result};
use crate::numeric::{finite_diff_check, FdReport, Real, RngStream, Tape};
use crate::objectives::Objective;

/// Compares back-propagated gradients of the full objective with respect to
/// every parameter (θ then Φ) against central differences, on `samples`
/// scenes drawn from the config's scene generator.
pub fn gradcheck_objective<R: Real>(cfg: &ExperimentConfig, samples: usize) -> Result<FdReport> {
    if samples == 0 {
        return Err(Error::Config("gradcheck needs at least one sample".into()));
    }
    let model = initial_model::<R>(cfg)?;
    let weights = cfg.loss_weights()?;
    let mut rng = RngStream::new(cfg.seed).derive(&[0x6c]);
    let ds = generate_dataset(&cfg.data.scene, samples, &mut rng)?;
    let idx: Vec<usize> = (0..samples).collect();
    let (x, labels) = ds.batch::<R>(&idx)?;
    let n_theta = model.net.params().numel();

    let eval = |flat: &[R], with_grad: bool| -> Result<(R, u64, Vec<R>)> {
        let mut m = model.clone();
        m.net.params_mut().assign_flat(&flat[..n_theta])?;
        m.adapters.params_mut().assign_flat(&flat[n_theta..])?;
        let objective = Objective {
            net: &m.net,
            adapters: &m.adapters,
            sites: &m.sites,
            weights: &weights,
            ne_channels: m.ne_channels,
        };
        let mut tape = Tape::with_regime_tracking();
        let e = objective.evaluate(&mut tape, x.clone(), &labels)?;
        let value = tape.value(e.total).item()?;
        let mut grad = Vec::new();
        if with_grad {
            tape.backward(e.total)?;
            for &v in e.net_params.iter().chain(e.adapter_params.iter().flatten()) {
                grad.extend(tape.grad_or_zero(v));
            }
        }
        Ok((value, tape.regime(), grad))
    };

    let mut p0 = model.net.params().flatten();
    p0.extend(model.adapters.params().flatten());
    let (_, _, analytic) = eval(&p0, true)?;
    finite_diff_check(
        |p| eval(p, false).map(|(v, r, _)| (v, r)),
        &p0,
        &analytic,
        R::FD_EPSILON,
    )
}

/// Evaluates the bound from a JSON file of [`BoundInputs`].
pub fn bound_from_file(path: impl AsRef<Path>) -> Result<BoundReport> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let inputs: BoundInputs = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    theorem1_bound(&inputs)
}
