//! Server-side weighted aggregation.

use serde::{Deserialize, Serialize};

use super::{Algorithm, FedModel, LocalUpdate};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numeric::Real;

/// Uploads are local updates as produced by vehicles.
pub type Upload<R> = LocalUpdate<R>;

/// `w_n = |D_n| / Σ_{m∈S^t} |D_m|`, ascending by vehicle id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub vehicles: Vec<usize>,
    pub weights: Vec<f64>,
}

impl AggregationWeights {
    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn get(&self, vehicle: usize) -> Option<f64> {
        self.vehicles
            .iter()
            .position(|&v| v == vehicle)
            .map(|i| self.weights[i])
    }
}

/// Weights for `(vehicle id, sample count)` pairs.
pub fn aggregation_weights(counts: &[(usize, usize)]) -> Result<AggregationWeights> {
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Protocol {
            vehicle: w[0].0,
            detail: "uploaded twice in one round".into(),
        });
    }
    if let Some(&(v, _)) = sorted.iter().find(|(_, n)| *n == 0) {
        return Err(Error::Protocol {
            vehicle: v,
            detail: "reported zero samples".into(),
        });
    }
    let total: f64 = sorted.iter().map(|&(_, n)| n as f64).sum();
    if total == 0.0 {
        return Err(Error::InsufficientData("no uploads to aggregate".into()));
    }
    Ok(AggregationWeights {
        vehicles: sorted.iter().map(|&(v, _)| v).collect(),
        weights: sorted.iter().map(|&(_, n)| n as f64 / total).collect(),
    })
}

fn weighted_average<R: Real>(stores: &[&ParamStore<R>], weights: &[f64]) -> Vec<f64> {
    let mut acc: Vec<f64> = stores[0]
        .tensors()
        .flat_map(|t| t.data().iter())
        .map(|v| weights[0] * v.to_f64().unwrap_or(f64::NAN))
        .collect();
    for (s, &w) in stores.iter().zip(weights).skip(1) {
        for (a, v) in acc.iter_mut().zip(s.tensors().flat_map(|t| t.data().iter())) {
            *a += w * v.to_f64().unwrap_or(f64::NAN);
        }
    }
    acc
}

fn to_real<R: Real>(v: &[f64]) -> Vec<R> {
    v.iter().map(|&x| R::from_f64_lossy(x)).collect()
}

/// Global state kept between rounds.
#[derive(Clone, Debug)]
pub struct Server<R: Real> {
    pub round: usize,
    pub model: FedModel<R>,
    pub algorithm: Algorithm,
    momentum: Option<Vec<f64>>,
}

impl<R: Real> Server<R> {
    pub fn new(model: FedModel<R>, algorithm: Algorithm) -> Self {
        Self {
            round: 0,
            model,
            algorithm,
            momentum: None,
        }
    }

    /// FedAvgM momentum buffer, once the first round has run.
    pub fn momentum(&self) -> Option<&[f64]> {
        self.momentum.as_deref()
    }

    /// Replaces θ and Φ by the weighted average of `uploads` (accumulated in
    /// ascending vehicle-id order) and advances the round counter.
    pub fn aggregate(&mut self, uploads: &[Upload<R>]) -> Result<AggregationWeights> {
        if uploads.is_empty() {
            return Err(Error::InsufficientData("no uploads to aggregate".into()));
        }
        let mut order: Vec<&Upload<R>> = uploads.iter().collect();
        order.sort_by_key(|u| u.vehicle);
        for u in &order {
            self.model
                .net
                .params()
                .check_compatible(&u.theta)
                .and_then(|_| self.model.adapters.params().check_compatible(&u.phi))
                .map_err(|detail| Error::Protocol {
                    vehicle: u.vehicle,
                    detail,
                })?;
        }
        let counts: Vec<(usize, usize)> = order.iter().map(|u| (u.vehicle, u.samples)).collect();
        let w = aggregation_weights(&counts)?;

        let thetas: Vec<&ParamStore<R>> = order.iter().map(|u| &u.theta).collect();
        let mut theta = weighted_average(&thetas, &w.weights);
        if let Algorithm::FedAvgM { beta } = self.algorithm {
            let global: Vec<f64> = self
                .model
                .net
                .params()
                .flatten()
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN))
                .collect();
            let v = self.momentum.get_or_insert_with(|| vec![0.0; global.len()]);
            for ((vi, avg), g) in v.iter_mut().zip(theta.iter_mut()).zip(&global) {
                *vi = beta * *vi + (g - *avg);
                *avg = g - *vi;
            }
        }
        self.model.net.params_mut().assign_flat(&to_real::<R>(&theta))?;

        if !self.model.adapters.params().is_empty() {
            let phis: Vec<&ParamStore<R>> = order.iter().map(|u| &u.phi).collect();
            let phi = weighted_average(&phis, &w.weights);
            self.model.adapters.params_mut().assign_flat(&to_real::<R>(&phi))?;
        }
        self.round += 1;
        Ok(w)
    }
}
