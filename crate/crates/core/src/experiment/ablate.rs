//! Tap-count, tap-distance and tap-position sweeps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{prepare_data, run_prepared, ExperimentConfig, TapWeights};
use crate::error::{Error, Result};
use crate::model::{resolve_taps, PositionBias, TapRule, TapSpec};
use crate::numeric::{Precision, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    /// 1..=5 taps.
    Count,
    /// Two taps 1, 2 or 3 blocks apart.
    Distance,
    /// Two adjacent taps near the input, centre or output.
    Position,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "count" => Ok(Self::Count),
            "distance" => Ok(Self::Distance),
            "position" => Ok(Self::Position),
            other => Err(Error::Config(format!(
                "unknown ablation axis {other:?}; expected count, distance or position"
            ))),
        }
    }

    /// `(row label, tap spec)` for each variant of the sweep. Count keeps the
    /// base spacing and position when the base already uses the
    /// between-blocks rule and otherwise places adjacent taps centrally.
    pub fn variants(self, base: &TapSpec) -> Vec<(String, TapSpec)> {
        let with = |count, spacing, position| TapSpec {
            indices: Vec::new(),
            ..TapSpec::between_blocks(count, spacing, position)
        };
        let keep = |mut s: TapSpec| {
            s.ne_channels = base.ne_channels;
            s.adapter = base.adapter;
            s
        };
        match self {
            AblationAxis::Count => {
                let (spacing, position) = if base.rule == TapRule::BetweenBlocks {
                    (base.spacing, base.position)
                } else {
                    (1, PositionBias::Central)
                };
                (1..=5)
                    .map(|m| (format!("M={m}"), keep(with(m, spacing, position))))
                    .collect()
            }
            AblationAxis::Distance => (1..=3)
                .map(|d| (format!("distance={d}"), keep(with(2, d, PositionBias::Central))))
                .collect(),
            AblationAxis::Position => [
                ("input", PositionBias::Input),
                ("central", PositionBias::Central),
                ("output", PositionBias::Output),
            ]
            .into_iter()
            .map(|(name, p)| (format!("position={name}"), keep(with(2, 1, p))))
            .collect(),
        }
    }
}

/// The config of one ablation cell; a standalone `run` of it reproduces
/// the cell exactly.
pub fn derive_config(base: &ExperimentConfig, taps: &TapSpec, seed: u64) -> Result<ExperimentConfig> {
    for (name, w) in [("alpha", &base.training.alpha), ("lambda", &base.training.lambda)] {
        if matches!(w, TapWeights::PerTap(_)) {
            return Err(Error::Config(format!(
                "ablation needs a single training.{name} value shared by all taps"
            )));
        }
    }
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.model.taps = taps.clone();
    cfg.output = None;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub taps: TapSpec,
    /// Why the variant could not run on this network.
    pub skipped: Option<String>,
    pub seeds: Vec<u64>,
    /// Final held-out mIoU per seed.
    pub miou: Vec<f64>,
    pub mf1: Vec<f64>,
    pub median_miou: Option<f64>,
    pub median_mf1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<14} {:>12} {:>12}  per-seed mIoU\n",
            "variant", "median mIoU", "median mF1"
        );
        for r in &self.rows {
            match &r.skipped {
                Some(why) => s += &format!("{:<14} {:>12} {:>12}  skipped: {why}\n", r.label, "-", "-"),
                None => {
                    let per: Vec<String> = r.miou.iter().map(|v| format!("{v:.2}")).collect();
                    s += &format!(
                        "{:<14} {:>12.2} {:>12.2}  {}\n",
                        r.label,
                        r.median_miou.unwrap_or(f64::NAN),
                        r.median_mf1.unwrap_or(f64::NAN),
                        per.join(" ")
                    );
                }
            }
        }
        s
    }
}

/// Runs every variant of `axis` for every seed. Per-cell logs go to
/// `out/<label>/seed<seed>` when `out` is given.
pub fn ablate(base: &ExperimentConfig, axis: AblationAxis, seeds: &[u64], out: Option<&Path>) -> Result<AblationTable> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let variants = axis.variants(&base.model.taps);
    let mut rows: Vec<AblationRow> = Vec::new();
    for (label, taps) in &variants {
        let skipped = resolve_taps(taps, &base.net_config()).err().map(|e| e.to_string());
        rows.push(AblationRow {
            label: label.clone(),
            taps: taps.clone(),
            skipped,
            seeds: seeds.to_vec(),
            miou: Vec::new(),
            mf1: Vec::new(),
            median_miou: None,
            median_mf1: None,
        });
    }
    for &seed in seeds {
        let data_cfg = derive_config(base, &base.model.taps, seed)?;
        let data = prepare_data(&data_cfg)?;
        for row in rows.iter_mut().filter(|r| r.skipped.is_none()) {
            let cfg = derive_config(base, &row.taps, seed)?;
            let dir = out.map(|o| o.join(&row.label).join(format!("seed{seed}")));
            let last = match cfg.precision {
                Precision::Single => final_metrics::<f32>(&cfg, &data, dir.as_deref())?,
                Precision::Double => final_metrics::<f64>(&cfg, &data, dir.as_deref())?,
            };
            row.miou.push(last.0);
            row.mf1.push(last.1);
        }
    }
    for row in &mut rows {
        row.median_miou = median(&row.miou);
        row.median_mf1 = median(&row.mf1);
    }
    Ok(AblationTable { axis, rows })
}

fn final_metrics<R: Real>(cfg: &ExperimentConfig, data: &super::Prepared, out: Option<&Path>) -> Result<(f64, f64)> {
    let o = run_prepared::<R>(cfg, data, out)?;
    let last = o.records.last().expect("at least one round");
    Ok((last.miou.unwrap_or(f64::NAN), last.mf1.unwrap_or(f64::NAN)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetConfig;

    #[test]
    fn variant_rows() {
        let base = TapSpec::after_downsample(2);
        assert_eq!(AblationAxis::Count.variants(&base).len(), 5);
        assert_eq!(AblationAxis::Distance.variants(&base).len(), 3);
        let pos = AblationAxis::Position.variants(&base);
        assert_eq!(pos.len(), 3);
        let net = NetConfig {
            in_channels: 3,
            width: 4,
            classes: 4,
        };
        let sites: Vec<Vec<usize>> = pos
            .iter()
            .map(|(_, s)| resolve_taps(s, &net).unwrap().iter().map(|s| s.index()).collect())
            .collect();
        assert_eq!(sites, vec![vec![0, 1], vec![2, 3], vec![5, 6]]);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
