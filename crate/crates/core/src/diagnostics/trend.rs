use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Least-squares fit `log y = intercept + slope · log T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
    pub points: usize,
}

/// `out[t] = mean(values[..=t])`.
pub fn running_mean(values: &[f64]) -> Vec<f64> {
    let mut sum = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            sum += v;
            sum / (i + 1) as f64
        })
        .collect()
}

/// Fits the decay exponent of `series[T-1]` = mean ‖∇L‖² over rounds `1..=T`
/// (see [`running_mean`]). With `window`, only the last `window` points are
/// used.
pub fn convergence_trend(series: &[f64], window: Option<usize>) -> Result<Trend> {
    let first = match window {
        Some(w) => series.len().saturating_sub(w),
        None => 0,
    };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .enumerate()
        .skip(first)
        .map(|(i, &y)| ((i + 1) as f64, y))
        .collect();
    if pts.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "trend fit needs at least 10 rounds, got {}",
            pts.len()
        )));
    }
    if let Some((t, y)) = pts.iter().find(|(_, y)| !(*y > 0.0 && y.is_finite())) {
        return Err(Error::InsufficientData(format!(
            "round {t} has non-positive or non-finite value {y}"
        )));
    }
    let n = pts.len() as f64;
    let xs: Vec<f64> = pts.iter().map(|(t, _)| t.ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|(_, y)| y.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Ok(Trend {
        slope,
        intercept,
        residual: (sse / n).sqrt(),
        points: pts.len(),
    })
}
