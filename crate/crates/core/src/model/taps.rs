//! Selection of intermediate supervision points.

use serde::{Deserialize, Serialize};

use super::{AdapterKind, NetConfig, Site};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TapRule {
    /// Immediately after each downsampling step (pool1, pool2).
    AfterDownsample,
    /// Any block boundary, placed by `spacing` and `position`.
    BetweenBlocks,
    /// The bottleneck output.
    Bottleneck,
    /// Block boundaries given by `indices` (0 = enc1 … 6 = dec2).
    ExplicitIndices,
}

impl TapRule {
    pub fn name(self) -> &'static str {
        match self {
            TapRule::AfterDownsample => "after-downsample",
            TapRule::BetweenBlocks => "between-blocks",
            TapRule::Bottleneck => "bottleneck",
            TapRule::ExplicitIndices => "explicit-indices",
        }
    }
}

/// Where a group of taps sits inside the candidate range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionBias {
    #[default]
    Input,
    Central,
    Output,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapSpec {
    pub rule: TapRule,
    /// Number of taps M; 0 disables intermediate supervision entirely.
    pub count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub indices: Vec<usize>,
    /// Blocks between adjacent taps (between-blocks rule only).
    #[serde(default = "one")]
    pub spacing: usize,
    #[serde(default)]
    pub position: PositionBias,
    /// Leading channels fed to the entropy regularizer; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ne_channels: Option<usize>,
    #[serde(default)]
    pub adapter: AdapterKind,
}

impl TapSpec {
    pub fn disabled() -> Self {
        Self {
            rule: TapRule::AfterDownsample,
            count: 0,
            indices: Vec::new(),
            spacing: 1,
            position: PositionBias::Input,
            ne_channels: None,
            adapter: AdapterKind::Linear,
        }
    }

    pub fn after_downsample(count: usize) -> Self {
        Self {
            count,
            ..Self::disabled()
        }
    }

    pub fn between_blocks(count: usize, spacing: usize, position: PositionBias) -> Self {
        Self {
            rule: TapRule::BetweenBlocks,
            count,
            spacing,
            position,
            ..Self::disabled()
        }
    }

    pub fn explicit(indices: Vec<usize>) -> Self {
        Self {
            rule: TapRule::ExplicitIndices,
            count: indices.len(),
            indices,
            ..Self::disabled()
        }
    }
}

/// Resolves a tap specification to concrete, strictly increasing sites.
pub fn resolve_taps(spec: &TapSpec, net: &NetConfig) -> Result<Vec<Site>> {
    let sites = resolve_sites(spec)?;
    if let Some(c) = spec.ne_channels {
        for s in &sites {
            let avail = s.channels(net);
            if c == 0 || c > avail {
                return Err(Error::Config(format!(
                    "taps.ne_channels = {c} but site {} has {avail} channels",
                    s.name()
                )));
            }
        }
    }
    Ok(sites)
}

fn resolve_sites(spec: &TapSpec) -> Result<Vec<Site>> {
    if spec.spacing == 0 {
        return Err(Error::Config("taps.spacing must be at least 1".into()));
    }
    if spec.rule == TapRule::ExplicitIndices {
        if spec.count != spec.indices.len() {
            return Err(Error::Config(format!(
                "taps.count = {} but {} explicit indices given",
                spec.count,
                spec.indices.len()
            )));
        }
        let mut out = Vec::with_capacity(spec.indices.len());
        for (i, &idx) in spec.indices.iter().enumerate() {
            let site = Site::from_index(idx).ok_or_else(|| {
                Error::Config(format!(
                    "taps.indices[{i}] = {idx}: only block boundaries 0..=6 lie before the head"
                ))
            })?;
            if out.last().is_some_and(|&prev| prev >= site) {
                return Err(Error::Config("taps.indices must be strictly increasing".into()));
            }
            out.push(site);
        }
        return Ok(out);
    }
    if !spec.indices.is_empty() {
        return Err(Error::Config(format!(
            "taps.indices only applies to the explicit-indices rule, not {}",
            spec.rule.name()
        )));
    }
    let m = spec.count;
    if m == 0 {
        return Ok(Vec::new());
    }
    let (candidates, spacing): (&[Site], usize) = match spec.rule {
        TapRule::AfterDownsample => (&[Site::Pool1, Site::Pool2], 1),
        TapRule::Bottleneck => (&[Site::Bottleneck], 1),
        TapRule::BetweenBlocks => (&Site::ALL, spec.spacing),
        TapRule::ExplicitIndices => unreachable!(),
    };
    let span = (m - 1) * spacing + 1;
    if span > candidates.len() {
        let detail = if spacing > 1 {
            format!(
                "{m} taps spaced {spacing} blocks apart need {span} sites but rule {} has {} available",
                spec.rule.name(),
                candidates.len()
            )
        } else {
            format!(
                "{m} taps requested but rule {} has {} available",
                spec.rule.name(),
                candidates.len()
            )
        };
        return Err(Error::Config(detail));
    }
    let slack = candidates.len() - span;
    let start = match spec.position {
        PositionBias::Input => 0,
        PositionBias::Central => slack / 2,
        PositionBias::Output => slack,
    };
    Ok((0..m).map(|i| candidates[start + i * spacing]).collect())
}
