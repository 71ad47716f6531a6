//! Local training objective: output cross-entropy, per-tap label
//! cross-entropy through the adapters (the "MI" term), per-tap negative
//! entropy of the channel softmax, and their weighted sum.
//!
//! Every term is a mean over the batch-and-pixel set, so the weights do not
//! depend on image resolution. Pixels labelled 255 are skipped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterSet, SegNet, Site, TapActivations};
use crate::numeric::{Real, Tape, Tensor, Var};

/// Per-tap weights α_m (adapter loss) and λ_m (entropy regularizer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl LossWeights {
    pub fn uniform(taps: usize, alpha: f64, lambda: f64) -> Self {
        Self {
            alpha: vec![alpha; taps],
            lambda: vec![lambda; taps],
        }
    }

    pub fn zeros(taps: usize) -> Self {
        Self::uniform(taps, 0.0, 0.0)
    }

    pub fn taps(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self, taps: usize) -> Result<()> {
        if self.alpha.len() != taps || self.lambda.len() != taps {
            return Err(Error::Config(format!(
                "loss weights list {} alpha and {} lambda values for {taps} taps",
                self.alpha.len(),
                self.lambda.len()
            )));
        }
        for (name, list) in [("alpha", &self.alpha), ("lambda", &self.lambda)] {
            if let Some((i, v)) = list.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("{name}[{i}] = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Values of every term of one objective evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub mi: Vec<f64>,
    pub ne: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn mean_mi(&self) -> f64 {
        mean(&self.mi)
    }

    pub fn mean_ne(&self) -> f64 {
        mean(&self.ne)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn to_f64<R: Real>(tape: &Tape<R>, v: Var) -> f64 {
    tape.value(v).data()[0].to_f64().unwrap_or(f64::NAN)
}

/// Output-layer cross-entropy from logits `[B,K,H,W]`.
pub fn ce_loss<R: Real>(tape: &mut Tape<R>, logits: Var, labels: &[u8]) -> Result<Var> {
    tape.cross_entropy_logits(logits, labels)
}

/// Label cross-entropy of an adapter's per-pixel class distribution.
pub fn mi_loss<R: Real>(tape: &mut Tape<R>, adapter_probs: Var, labels: &[u8]) -> Result<Var> {
    tape.nll_probs(adapter_probs, labels)
}

/// Mean per-pixel `Σ_c p_c ln p_c` of the channel softmax of `z`, optionally
/// restricted to the leading `channels` channels. Lies in `[−ln C_m, 0]`.
pub fn ne_reg<R: Real>(tape: &mut Tape<R>, z: Var, channels: Option<usize>) -> Result<Var> {
    let z = match channels {
        Some(c) => tape.slice_channels(z, c)?,
        None => z,
    };
    let p = tape.softmax_channels(z)?;
    tape.neg_entropy(p)
}

/// `ce + Σ_m (α_m·mi_m + λ_m·ne_m)` on plain values.
pub fn total_loss(ce: f64, mi: &[f64], ne: &[f64], weights: &LossWeights) -> Result<LossBreakdown> {
    check_lengths(mi.len(), ne.len(), weights)?;
    let mut total = ce;
    for m in 0..mi.len() {
        total += weights.alpha[m] * mi[m] + weights.lambda[m] * ne[m];
    }
    Ok(LossBreakdown {
        ce,
        mi: mi.to_vec(),
        ne: ne.to_vec(),
        total,
    })
}

fn check_lengths(mi: usize, ne: usize, weights: &LossWeights) -> Result<()> {
    if mi != ne || weights.alpha.len() != mi || weights.lambda.len() != mi {
        return Err(Error::Contract(format!(
            "loss term lengths differ: {mi} mi, {ne} ne, {} alpha, {} lambda",
            weights.alpha.len(),
            weights.lambda.len()
        )));
    }
    Ok(())
}

/// The weighted sum on the tape. Terms whose weight is exactly zero are
/// left out of the graph, so a zero-weighted configuration optimizes exactly
/// the plain cross-entropy.
pub fn combine_on_tape<R: Real>(
    tape: &mut Tape<R>,
    ce: Var,
    mi: &[Var],
    ne: &[Var],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    check_lengths(mi.len(), ne.len(), weights)?;
    let mut total = ce;
    for m in 0..mi.len() {
        if weights.alpha[m] != 0.0 {
            let t = tape.scale(mi[m], R::from_f64_lossy(weights.alpha[m]));
            total = tape.add(total, t)?;
        }
        if weights.lambda[m] != 0.0 {
            let t = tape.scale(ne[m], R::from_f64_lossy(weights.lambda[m]));
            total = tape.add(total, t)?;
        }
    }
    let breakdown = LossBreakdown {
        ce: to_f64(tape, ce),
        mi: mi.iter().map(|&v| to_f64(tape, v)).collect(),
        ne: ne.iter().map(|&v| to_f64(tape, v)).collect(),
        total: to_f64(tape, total),
    };
    Ok((total, breakdown))
}

/// Network, adapters and weights that together define the local objective.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a, R: Real> {
    pub net: &'a SegNet<R>,
    pub adapters: &'a AdapterSet<R>,
    pub sites: &'a [Site],
    pub weights: &'a LossWeights,
    pub ne_channels: Option<usize>,
}

/// One recorded evaluation of [`Objective`].
#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub total: Var,
    pub ce: Var,
    pub mi: Vec<Var>,
    pub ne: Vec<Var>,
    pub breakdown: LossBreakdown,
    pub logits: Var,
    pub taps: TapActivations,
    pub net_params: Vec<Var>,
    pub adapter_params: Vec<Vec<Var>>,
}

impl<R: Real> Objective<'_, R> {
    /// Records the full objective for one batch on `tape`.
    pub fn evaluate(&self, tape: &mut Tape<R>, images: Tensor<R>, labels: &[u8]) -> Result<ObjectiveEval> {
        if self.adapters.len() != self.sites.len() {
            return Err(Error::Contract(format!(
                "{} adapters for {} taps",
                self.adapters.len(),
                self.sites.len()
            )));
        }
        self.weights.validate(self.sites.len())?;
        let x = tape.constant(images);
        let fp = self.net.forward(tape, x, self.sites, true)?;
        let adapter_params = self.adapters.bind(tape, true);
        let ce = ce_loss(tape, fp.logits, labels)?;
        let mut mi = Vec::with_capacity(self.sites.len());
        let mut ne = Vec::with_capacity(self.sites.len());
        for (m, &z) in fp.taps.vars.iter().enumerate() {
            let q = self.adapters.forward(tape, &adapter_params, m, z)?;
            mi.push(mi_loss(tape, q, labels)?);
            ne.push(ne_reg(tape, z, self.ne_channels)?);
        }
        let (total, breakdown) = combine_on_tape(tape, ce, &mi, &ne, self.weights)?;
        Ok(ObjectiveEval {
            total,
            ce,
            mi,
            ne,
            breakdown,
            logits: fp.logits,
            taps: fp.taps,
            net_params: fp.params,
            adapter_params,
        })
    }
}
