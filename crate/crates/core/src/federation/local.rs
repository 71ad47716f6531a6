//! Local training on one vehicle.

use super::{Algorithm, FedModel, RoundConfig, Vehicle};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numeric::{Real, RngStream, Tape};
use crate::objectives::{LossBreakdown, Objective};

/// What a vehicle sends back after local training.
#[derive(Clone, Debug)]
pub struct LocalUpdate<R: Real> {
    pub vehicle: usize,
    pub samples: usize,
    pub theta: ParamStore<R>,
    pub phi: ParamStore<R>,
    /// One entry per minibatch, in training order.
    pub trace: Vec<LossBreakdown>,
}

fn sgd_step<R: Real>(store: &mut ParamStore<R>, grads: &[Option<&[R]>], lr: R) {
    for (t, g) in store.tensors_mut().zip(grads) {
        if let Some(g) = g {
            for (p, &gi) in t.data_mut().iter_mut().zip(g.iter()) {
                *p -= lr * gi;
            }
        }
    }
}

/// Runs `E` epochs of minibatch SGD from the broadcast model.
///
/// Each step takes one forward/backward pass and applies the gradients to
/// the adapters Φ first, then to the network θ. `rng` drives the
/// per-epoch shuffles.
pub fn local_train<R: Real>(
    vehicle: &Vehicle,
    global: &FedModel<R>,
    cfg: &RoundConfig,
    lr: f64,
    mut rng: RngStream,
) -> Result<LocalUpdate<R>> {
    let n = vehicle.samples();
    if n == 0 {
        return Err(Error::InsufficientData(format!(
            "vehicle {} holds no samples",
            vehicle.id
        )));
    }
    let mut model = global.clone();
    let anchor = &global.net;
    let mu = match cfg.algorithm {
        Algorithm::FedProx { mu } if mu != 0.0 => Some(mu),
        _ => None,
    };
    let step = R::from_f64_lossy(lr);
    let mut tape = Tape::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.local_epochs * n.div_ceil(cfg.batch_size));
    for epoch in 0..cfg.local_epochs {
        rng.shuffle(&mut order);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let fail = |detail: String| Error::Training {
                vehicle: vehicle.id,
                epoch,
                batch,
                detail,
            };
            let (x, labels) = vehicle.data.batch::<R>(idx)?;
            tape.clear();
            let objective = Objective {
                net: &model.net,
                adapters: &model.adapters,
                sites: &model.sites,
                weights: &cfg.weights,
                ne_channels: model.ne_channels,
            };
            let diverged = |e: Error| match e {
                Error::NonFinite(what) => fail(format!("non-finite value in {what}")),
                e => e,
            };
            let eval = objective.evaluate(&mut tape, x, &labels).map_err(diverged)?;
            let mut breakdown = eval.breakdown;
            if let Some(mu) = mu {
                let sq: f64 = model
                    .net
                    .params()
                    .tensors()
                    .zip(anchor.params().tensors())
                    .flat_map(|(a, b)| a.data().iter().zip(b.data()))
                    .map(|(&a, &b)| {
                        let d = (a - b).to_f64().unwrap_or(f64::NAN);
                        d * d
                    })
                    .sum();
                breakdown.total += 0.5 * mu * sq;
            }
            if !breakdown.total.is_finite() {
                return Err(fail(format!("non-finite loss {:?}", breakdown)));
            }
            tape.backward(eval.total).map_err(diverged)?;

            let phi_grads: Vec<Option<&[R]>> = eval.adapter_params.iter().flatten().map(|&v| tape.grad(v)).collect();
            sgd_step(model.adapters.params_mut(), &phi_grads, step);

            let theta_grads: Vec<Option<&[R]>> = eval.net_params.iter().map(|&v| tape.grad(v)).collect();
            if let Some(mu) = mu {
                let mu = R::from_f64_lossy(mu);
                let theta = model.net.params_mut();
                for ((t, a), g) in theta.tensors_mut().zip(anchor.params().tensors()).zip(&theta_grads) {
                    let g = g.ok_or_else(|| fail("missing network gradient".into()))?;
                    for ((p, &p0), &gi) in t.data_mut().iter_mut().zip(a.data()).zip(g) {
                        *p -= step * (gi + mu * (*p - p0));
                    }
                }
            } else {
                sgd_step(model.net.params_mut(), &theta_grads, step);
            }
            if model.net.params().tensors().any(|t| !t.is_finite()) {
                return Err(fail("non-finite parameters after update".into()));
            }
            trace.push(breakdown);
        }
    }
    Ok(LocalUpdate {
        vehicle: vehicle.id,
        samples: n,
        theta: model.net.into_params(),
        phi: model.adapters.into_params(),
        trace,
    })
}
