//! Label-skewed split of one dataset across a fleet.

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::numeric::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub vehicles: usize,
    /// Dirichlet concentration γ; small values give strong skew.
    pub concentration: f64,
    #[serde(default)]
    pub min_samples: usize,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vehicles == 0 {
            return Err(Error::Config("partition.vehicles must be at least 1".into()));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::Config(format!(
                "partition.concentration must be finite and > 0, got {}",
                self.concentration
            )));
        }
        Ok(())
    }
}

/// Most frequent foreground class of a label map; 0 when there is no foreground.
pub fn dominant_class(label: &[u8], classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for &l in label {
        if (l as usize) < classes {
            counts[l as usize] += 1;
        }
    }
    let mut best = 0;
    for k in 1..classes {
        if counts[k] > 0 && (best == 0 || counts[k] > counts[best]) {
            best = k;
        }
    }
    best
}

fn dirichlet(rng: &mut RngStream, n: usize, gamma: f64) -> Vec<f64> {
    let dist = Gamma::new(gamma, 1.0).expect("validated concentration");
    let mut p: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    let s: f64 = p.iter().sum();
    if s > 0.0 && s.is_finite() {
        p.iter_mut().for_each(|v| *v /= s);
    } else {
        p.iter_mut().for_each(|v| *v = 0.0);
        p[rng.below(n)] = 1.0;
    }
    p
}

/// Splits `dataset` into `spec.vehicles` disjoint index sets.
///
/// Samples are grouped by dominant class; each group is shuffled and cut
/// by cumulative Dirichlet(γ) proportions. Vehicles left below
/// `min_samples` are then topped up with samples taken from the currently
/// largest vehicle.
pub fn dirichlet_partition(dataset: &Dataset, spec: &PartitionSpec, rng: &mut RngStream) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let n = spec.vehicles;
    if dataset.len() < n * spec.min_samples {
        return Err(Error::Config(format!(
            "cannot give {n} vehicles at least {} samples each from {} samples",
            spec.min_samples,
            dataset.len()
        )));
    }
    let mut groups = vec![Vec::new(); dataset.classes];
    for (i, s) in dataset.samples.iter().enumerate() {
        groups[dominant_class(&s.label, dataset.classes)].push(i);
    }
    let mut parts = vec![Vec::new(); n];
    for mut group in groups {
        if group.is_empty() {
            continue;
        }
        rng.shuffle(&mut group);
        let p = dirichlet(rng, n, spec.concentration);
        let total = group.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (v, pv) in p.iter().enumerate() {
            cum += pv;
            let end = if v + 1 == n {
                total
            } else {
                ((cum * total as f64).round() as usize).clamp(start, total)
            };
            parts[v].extend_from_slice(&group[start..end]);
            start = end;
        }
    }
    while let Some(short) = (0..n).find(|&v| parts[v].len() < spec.min_samples) {
        let donor = (0..n)
            .max_by_key(|&v| (parts[v].len(), std::cmp::Reverse(v)))
            .expect("at least one vehicle");
        let moved = parts[donor].pop().expect("donor holds more than the minimum");
        parts[short].push(moved);
    }
    parts.iter_mut().for_each(|p| p.sort_unstable());
    Ok(parts)
}

fn dominant_histogram(dataset: &Dataset, indices: &[usize]) -> Vec<f64> {
    let mut h = vec![0.0; dataset.classes];
    for &i in indices {
        h[dominant_class(&dataset.samples[i].label, dataset.classes)] += 1.0;
    }
    let s: f64 = h.iter().sum();
    if s > 0.0 {
        h.iter_mut().for_each(|v| *v /= s);
    }
    h
}

/// Mean total-variation distance between each non-empty vehicle's
/// dominant-class histogram and the global one.
pub fn label_skew(dataset: &Dataset, parts: &[Vec<usize>]) -> f64 {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let global = dominant_histogram(dataset, &all);
    let tv: Vec<f64> = parts
        .iter()
        .filter(|p| !p.is_empty())
        .map(|p| {
            let h = dominant_histogram(dataset, p);
            0.5 * h.iter().zip(&global).map(|(a, b)| (a - b).abs()).sum::<f64>()
        })
        .collect();
    if tv.is_empty() {
        0.0
    } else {
        tv.iter().sum::<f64>() / tv.len() as f64
    }
}
