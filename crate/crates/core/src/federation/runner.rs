//! The outer round loop.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{local_train, sample_participants, AggregationWeights, FedModel, RoundConfig, Server, Vehicle};
use crate::error::{Error, Result};
use crate::numeric::{Real, RngStream};
use crate::objectives::LossBreakdown;

const PARTICIPATION_TAG: u64 = 0x5a3;
const LOCAL_TAG: u64 = 0x10c;

/// Callbacks around every round; both receive the global model.
pub trait RoundHooks<R: Real> {
    /// Called with θ^t before vehicles start round `round` (0-based).
    fn before_round(&mut self, _round: usize, _model: &FedModel<R>) -> Result<()> {
        Ok(())
    }

    /// Called with θ^{t+1} once the round has been aggregated.
    fn after_round(&mut self, _record: &RoundRecord, _model: &FedModel<R>) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl<R: Real> RoundHooks<R> for NoHooks {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 0-based round index.
    pub round: usize,
    pub step_size: f64,
    pub weights: AggregationWeights,
    /// Last-minibatch loss of each participant, in `weights.vehicles` order.
    pub final_losses: Vec<LossBreakdown>,
    /// Aggregation-weighted mean over every participant's minibatches.
    pub mean_loss: LossBreakdown,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct FederationOutcome<R: Real> {
    pub model: FedModel<R>,
    pub records: Vec<RoundRecord>,
}

fn mean_breakdown(traces: &[&[LossBreakdown]], weights: &[f64]) -> LossBreakdown {
    let taps = traces.iter().find_map(|t| t.first()).map_or(0, |b| b.mi.len());
    let mut out = LossBreakdown {
        ce: 0.0,
        mi: vec![0.0; taps],
        ne: vec![0.0; taps],
        total: 0.0,
    };
    for (trace, &w) in traces.iter().zip(weights) {
        if trace.is_empty() {
            continue;
        }
        let s = w / trace.len() as f64;
        for b in trace.iter() {
            out.ce += s * b.ce;
            out.total += s * b.total;
            for m in 0..taps {
                out.mi[m] += s * b.mi[m];
                out.ne[m] += s * b.ne[m];
            }
        }
    }
    out
}

/// Runs `rounds` rounds of broadcast, parallel local training and
/// aggregation. Results depend only on `seed` and the inputs: each vehicle
/// draws from its own stream keyed by (seed, round, vehicle) and uploads are
/// aggregated in vehicle-id order whatever the thread count.
pub fn run_federation<R: Real>(
    fleet: &[Vehicle],
    init: FedModel<R>,
    cfg: &RoundConfig,
    rounds: usize,
    seed: u64,
    threads: usize,
    hooks: &mut dyn RoundHooks<R>,
) -> Result<FederationOutcome<R>> {
    cfg.validate()?;
    if rounds == 0 {
        return Err(Error::Config("training.rounds must be at least 1".into()));
    }
    if let Some((i, v)) = fleet.iter().enumerate().find(|(i, v)| v.id != *i) {
        return Err(Error::Config(format!("vehicle at position {i} has id {}", v.id)));
    }
    if let Some(v) = fleet.iter().find(|v| v.samples() == 0) {
        return Err(Error::InsufficientData(format!("vehicle {} holds no samples", v.id)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    let root = RngStream::new(seed);
    let lr = cfg.step_size(rounds);
    let mut server = Server::new(init, cfg.algorithm);
    let mut records = Vec::with_capacity(rounds);
    for t in 0..rounds {
        let start = Instant::now();
        hooks.before_round(t, &server.model)?;
        let mut prng = root.derive(&[PARTICIPATION_TAG, t as u64]);
        let participants = sample_participants(fleet.len(), cfg.participation, &mut prng)?;
        let global = &server.model;
        let uploads = pool.install(|| {
            participants
                .par_iter()
                .map(|&id| {
                    let rng = root.derive(&[LOCAL_TAG, t as u64, id as u64]);
                    local_train(&fleet[id], global, cfg, lr, rng)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let weights = server.aggregate(&uploads)?;
        let traces: Vec<&[LossBreakdown]> = uploads.iter().map(|u| u.trace.as_slice()).collect();
        let record = RoundRecord {
            round: t,
            step_size: lr,
            final_losses: uploads
                .iter()
                .map(|u| u.trace.last().cloned().unwrap_or_default())
                .collect(),
            mean_loss: mean_breakdown(&traces, &weights.weights),
            weights,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        hooks.after_round(&record, &server.model)?;
        records.push(record);
    }
    Ok(FederationOutcome {
        model: server.model,
        records,
    })
}
