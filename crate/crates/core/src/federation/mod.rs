//! Federated rounds: participant sampling, local training on each vehicle,
//! weighted aggregation on the server, and the FedProx / FedAvgM baselines.

mod aggregate;
mod local;
mod runner;

pub use aggregate::{aggregation_weights, AggregationWeights, Server, Upload};
pub use local::{local_train, LocalUpdate};
pub use runner::{run_federation, FederationOutcome, NoHooks, RoundHooks, RoundRecord};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{AdapterSet, SegNet, Site};
use crate::numeric::{Real, RngStream};
use crate::objectives::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Algorithm {
    FedAvg,
    /// Adds `(μ/2)·‖θ_n − θ^t‖²` to every local objective.
    FedProx {
        mu: f64,
    },
    /// Server momentum on the averaged update.
    FedAvgM {
        beta: f64,
    },
}

impl Algorithm {
    pub fn name(&self) -> String {
        match self {
            Algorithm::FedAvg => "fedavg".into(),
            Algorithm::FedProx { mu } => format!("fedprox({mu})"),
            Algorithm::FedAvgM { beta } => format!("fedavgm({beta})"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `η / √T` for a run of `T` rounds.
    InvSqrtT,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default = "one")]
    pub participation: f64,
    pub algorithm: Algorithm,
    pub weights: LossWeights,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::Config("training.local_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "training.lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config(format!(
                "training.participation must lie in (0, 1], got {}",
                self.participation
            )));
        }
        match self.algorithm {
            Algorithm::FedProx { mu } if !(mu >= 0.0 && mu.is_finite()) => {
                Err(Error::Config(format!("fedprox mu must be finite and >= 0, got {mu}")))
            }
            Algorithm::FedAvgM { beta } if !(0.0..1.0).contains(&beta) => {
                Err(Error::Config(format!("fedavgm beta must lie in [0, 1), got {beta}")))
            }
            _ => Ok(()),
        }
    }

    /// Step size used in every round of a `rounds`-round run.
    pub fn step_size(&self, rounds: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::InvSqrtT => self.lr / (rounds.max(1) as f64).sqrt(),
        }
    }
}

/// Global model state broadcast to vehicles: θ, Φ and the tap layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FedModel<R: Real> {
    pub net: SegNet<R>,
    pub adapters: AdapterSet<R>,
    pub sites: Vec<Site>,
    pub ne_channels: Option<usize>,
}

/// One fleet member and its private data.
#[derive(Clone, Debug)]
pub struct Vehicle {
    pub id: usize,
    pub data: Dataset,
}

impl Vehicle {
    pub fn samples(&self) -> usize {
        self.data.len()
    }
}

/// Builds vehicles `0..parts.len()` from index sets into `source`.
pub fn build_fleet(source: &Dataset, parts: &[Vec<usize>]) -> Vec<Vehicle> {
    parts
        .iter()
        .enumerate()
        .map(|(id, idx)| Vehicle {
            id,
            data: source.subset(idx),
        })
        .collect()
}

/// Uniform sample without replacement of `ceil(ρ·N)` vehicle ids, ascending.
pub fn sample_participants(fleet_size: usize, participation: f64, rng: &mut RngStream) -> Result<Vec<usize>> {
    if fleet_size == 0 {
        return Err(Error::Config("the fleet has no vehicles".into()));
    }
    if !(participation > 0.0 && participation <= 1.0) {
        return Err(Error::Config(format!(
            "participation must lie in (0, 1], got {participation}"
        )));
    }
    let m = ((participation * fleet_size as f64 - 1e-9).ceil() as usize).clamp(1, fleet_size);
    let mut ids: Vec<usize> = (0..fleet_size).collect();
    if m == fleet_size {
        return Ok(ids);
    }
    for i in 0..m {
        let j = i + rng.below(fleet_size - i);
        ids.swap(i, j);
    }
    ids.truncate(m);
    ids.sort_unstable();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_participation_is_everyone_in_order() {
        let s = sample_participants(5, 1.0, &mut RngStream::new(3)).unwrap();
        assert_eq!(s, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn partial_participation_size_is_ceiling() {
        let s = sample_participants(10, 0.3, &mut RngStream::new(3)).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(sample_participants(10, 0.25, &mut RngStream::new(3)).unwrap().len(), 3);
        assert_eq!(sample_participants(10, 0.01, &mut RngStream::new(3)).unwrap().len(), 1);
    }

    #[test]
    fn sampling_is_deterministic() {
        let rng = RngStream::new(42).derive(&[7]);
        let a = sample_participants(20, 0.4, &mut rng.clone()).unwrap();
        let b = sample_participants(20, 0.4, &mut rng.clone()).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn empty_fleet_is_an_error() {
        assert!(sample_participants(0, 1.0, &mut RngStream::new(0)).is_err());
        assert!(sample_participants(3, 0.0, &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn inv_sqrt_schedule() {
        let cfg = RoundConfig {
            local_epochs: 1,
            batch_size: 1,
            lr: 0.5,
            schedule: LrSchedule::InvSqrtT,
            participation: 1.0,
            algorithm: Algorithm::FedAvg,
            weights: LossWeights::zeros(0),
        };
        assert_eq!(cfg.step_size(100), 0.05);
        assert!(cfg.validate().is_ok());
        let bad = RoundConfig {
            algorithm: Algorithm::FedAvgM { beta: 1.0 },
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn algorithm_json_shape() {
        let a: Algorithm = serde_json::from_str(r#"{"kind":"fedprox","mu":0.01}"#).unwrap();
        assert_eq!(a, Algorithm::FedProx { mu: 0.01 });
        let a: Algorithm = serde_json::from_str(r#"{"kind":"fedavg"}"#).unwrap();
        assert_eq!(a, Algorithm::FedAvg);
    }
}
