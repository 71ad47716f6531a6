use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::{FedModel, Vehicle};
use crate::numeric::{Real, RngStream, Tape, Var};
use crate::objectives::{LossWeights, Objective};

fn objective<'a, R: Real>(model: &'a FedModel<R>, weights: &'a LossWeights) -> Objective<'a, R> {
    Objective {
        net: &model.net,
        adapters: &model.adapters,
        sites: &model.sites,
        weights,
        ne_channels: model.ne_channels,
    }
}

fn theta_grad<R: Real>(tape: &Tape<R>, params: &[Var]) -> Vec<f64> {
    params
        .iter()
        .flat_map(|&p| tape.grad_or_zero(p))
        .map(|g| g.to_f64().unwrap_or(f64::NAN))
        .collect()
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// ∇_θ of the local objective over all of `data` in one pass.
pub fn full_batch_gradient<R: Real>(model: &FedModel<R>, weights: &LossWeights, data: &Dataset) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InsufficientData("gradient of an empty dataset".into()));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let (x, labels) = data.batch::<R>(&all)?;
    let mut tape = Tape::new();
    let eval = objective(model, weights).evaluate(&mut tape, x, &labels)?;
    tape.backward(eval.total)?;
    Ok(theta_grad(&tape, &eval.net_params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    pub weights: Vec<f64>,
    /// ‖∇L^n − ∇L‖² per vehicle.
    pub deviations: Vec<f64>,
    /// Σ w_n ‖∇L^n − ∇L‖².
    pub h: f64,
    /// ‖∇L‖² of the weighted mean gradient.
    pub grad_norm_sq: f64,
}

/// H from explicit per-vehicle gradients and weights.
pub fn heterogeneity_from_gradients(grads: &[Vec<f64>], weights: &[f64]) -> Result<HeterogeneityReport> {
    if grads.is_empty() || grads.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} weights",
            grads.len(),
            weights.len()
        )));
    }
    let d = grads[0].len();
    if let Some(i) = grads.iter().position(|g| g.len() != d) {
        return Err(Error::dim(
            "heterogeneity",
            format!("gradient {i} has a different length"),
        ));
    }
    let mut mean = vec![0.0; d];
    for (g, &w) in grads.iter().zip(weights) {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += w * v;
        }
    }
    let deviations: Vec<f64> = grads
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let h = deviations.iter().zip(weights).map(|(d, w)| w * d).sum();
    Ok(HeterogeneityReport {
        weights: weights.to_vec(),
        deviations,
        h,
        grad_norm_sq: norm_sq(&mean),
    })
}

/// H at the shared model, with `w_n = |D_n| / Σ|D|` over the whole fleet
/// and exact full-batch gradients. Reads the model only.
pub fn heterogeneity<R: Real>(
    model: &FedModel<R>,
    fleet: &[Vehicle],
    weights: &LossWeights,
) -> Result<HeterogeneityReport> {
    let total: usize = fleet.iter().map(Vehicle::samples).sum();
    if total == 0 {
        return Err(Error::InsufficientData("fleet holds no samples".into()));
    }
    let grads = fleet
        .iter()
        .map(|v| full_batch_gradient(model, weights, &v.data))
        .collect::<Result<Vec<_>>>()?;
    let w: Vec<f64> = fleet.iter().map(|v| v.samples() as f64 / total as f64).collect();
    heterogeneity_from_gradients(&grads, &w)
}

/// Per-vehicle gradient constants of each loss component (∇ with respect
/// to θ): largest minibatch gradient norm `g_*` and the root of the mean
/// squared deviation from the mean minibatch gradient `sigma_*`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleConstants {
    pub g_ce: f64,
    pub g_mi: Vec<f64>,
    pub g_ne: Vec<f64>,
    pub sigma_ce: f64,
    pub sigma_mi: Vec<f64>,
    pub sigma_ne: Vec<f64>,
}

#[derive(Default)]
struct Stats {
    max_norm: f64,
    sum: Vec<f64>,
    sum_sq: f64,
    n: usize,
}

impl Stats {
    fn push(&mut self, g: Vec<f64>) {
        let ns = norm_sq(&g);
        self.max_norm = self.max_norm.max(ns.sqrt());
        self.sum_sq += ns;
        if self.sum.is_empty() {
            self.sum = g;
        } else {
            self.sum.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        self.n += 1;
    }

    /// (max norm, sqrt(mean ‖g_b‖² − ‖ḡ‖²)).
    fn finish(&self) -> (f64, f64) {
        if self.n == 0 {
            return (0.0, 0.0);
        }
        let n = self.n as f64;
        let mean_sq = norm_sq(&self.sum) / (n * n);
        (self.max_norm, (self.sum_sq / n - mean_sq).max(0.0).sqrt())
    }
}

/// One shuffled pass over the vehicle's data in minibatches of
/// `batch_size`, backpropagating each loss component separately.
pub fn probe_constants<R: Real>(
    model: &FedModel<R>,
    vehicle: &Vehicle,
    batch_size: usize,
    mut rng: RngStream,
) -> Result<VehicleConstants> {
    if vehicle.samples() == 0 {
        return Err(Error::InsufficientData(format!(
            "vehicle {} holds no samples",
            vehicle.id
        )));
    }
    let m = model.sites.len();
    // Unit weights keep every component on the tape; they are probed separately.
    let unit = LossWeights::uniform(m, 1.0, 1.0);
    let mut order: Vec<usize> = (0..vehicle.samples()).collect();
    rng.shuffle(&mut order);
    let mut ce = Stats::default();
    let mut mi: Vec<Stats> = (0..m).map(|_| Stats::default()).collect();
    let mut ne: Vec<Stats> = (0..m).map(|_| Stats::default()).collect();
    let mut tape = Tape::new();
    for idx in order.chunks(batch_size.max(1)) {
        let (x, labels) = vehicle.data.batch::<R>(idx)?;
        tape.clear();
        let eval = objective(model, &unit).evaluate(&mut tape, x, &labels)?;
        tape.backward(eval.ce)?;
        ce.push(theta_grad(&tape, &eval.net_params));
        for k in 0..m {
            tape.backward(eval.mi[k])?;
            mi[k].push(theta_grad(&tape, &eval.net_params));
            tape.backward(eval.ne[k])?;
            ne[k].push(theta_grad(&tape, &eval.net_params));
        }
    }
    let (g_ce, sigma_ce) = ce.finish();
    let (g_mi, sigma_mi) = mi.iter().map(Stats::finish).unzip();
    let (g_ne, sigma_ne) = ne.iter().map(Stats::finish).unzip();
    Ok(VehicleConstants {
        g_ce,
        g_mi,
        g_ne,
        sigma_ce,
        sigma_mi,
        sigma_ne,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Composite {
    pub g_t2: f64,
    pub sigma_t2: f64,
}

/// `G_T² = Σ_n w_n (G_CE² + Σ_m (α_m² G_MI,m² + λ_m² G_NE,m²))`, and `σ_T²`
/// the same way from the σ constants.
pub fn composite_constants(constants: &[VehicleConstants], weights: &[f64], loss: &LossWeights) -> Result<Composite> {
    if constants.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} vehicle constants for {} weights",
            constants.len(),
            weights.len()
        )));
    }
    let m = loss.taps();
    let mut g_t2 = 0.0;
    let mut sigma_t2 = 0.0;
    for (c, &w) in constants.iter().zip(weights) {
        if [&c.g_mi, &c.g_ne, &c.sigma_mi, &c.sigma_ne]
            .iter()
            .any(|v| v.len() != m)
        {
            return Err(Error::Contract(format!("vehicle constants do not list {m} taps")));
        }
        let mut g = c.g_ce * c.g_ce;
        let mut s = c.sigma_ce * c.sigma_ce;
        for k in 0..m {
            let (a2, l2) = (loss.alpha[k].powi(2), loss.lambda[k].powi(2));
            g += a2 * c.g_mi[k].powi(2) + l2 * c.g_ne[k].powi(2);
            s += a2 * c.sigma_mi[k].powi(2) + l2 * c.sigma_ne[k].powi(2);
        }
        g_t2 += w * g;
        sigma_t2 += w * s;
    }
    Ok(Composite { g_t2, sigma_t2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opposite_gradients() {
        let g = vec![1.0, -2.0, 0.5];
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let r = heterogeneity_from_gradients(&[g.clone(), neg], &[0.5, 0.5]).unwrap();
        assert_eq!(r.grad_norm_sq, 0.0);
        assert!((r.h - 5.25).abs() < 1e-12);
    }

    #[test]
    fn three_vehicles_by_formula() {
        let grads = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![-1.0, 1.0]];
        let w = [0.2, 0.3, 0.5];
        let r = heterogeneity_from_gradients(&grads, &w).unwrap();
        // ∇L = (0.2 − 0.5, 0.6 + 0.5) = (−0.3, 1.1)
        let d = [
            1.3f64.powi(2) + 1.1f64.powi(2),
            0.3f64.powi(2) + 0.9f64.powi(2),
            0.7f64.powi(2) + 0.1f64.powi(2),
        ];
        let h = 0.2 * d[0] + 0.3 * d[1] + 0.5 * d[2];
        assert!((r.h - h).abs() < 1e-12);
        assert!((r.grad_norm_sq - (0.09 + 1.21)).abs() < 1e-12);
        let rev = heterogeneity_from_gradients(
            &[grads[2].clone(), grads[0].clone(), grads[1].clone()],
            &[0.5, 0.2, 0.3],
        )
        .unwrap();
        assert!((rev.h - r.h).abs() < 1e-12);
    }

    #[test]
    fn composite_single_vehicle_without_taps() {
        let c = VehicleConstants {
            g_ce: 3.0,
            sigma_ce: 0.5,
            ..Default::default()
        };
        let r = composite_constants(&[c], &[1.0], &LossWeights::zeros(0)).unwrap();
        assert_eq!((r.g_t2, r.sigma_t2), (9.0, 0.25));
    }

    #[test]
    fn composite_two_vehicles_by_hand() {
        let a = VehicleConstants {
            g_ce: 1.0,
            g_mi: vec![2.0],
            g_ne: vec![4.0],
            sigma_ce: 0.5,
            sigma_mi: vec![1.0],
            sigma_ne: vec![2.0],
        };
        let b = VehicleConstants {
            g_ce: 3.0,
            g_mi: vec![1.0],
            g_ne: vec![2.0],
            sigma_ce: 1.0,
            sigma_mi: vec![0.0],
            sigma_ne: vec![1.0],
        };
        let w = LossWeights::uniform(1, 0.5, 0.1);
        let r = composite_constants(&[a.clone(), b.clone()], &[0.5, 0.5], &w).unwrap();
        // a: 1 + 0.25·4 + 0.01·16 = 2.16; b: 9 + 0.25 + 0.04 = 9.29
        assert!((r.g_t2 - 0.5 * (2.16 + 9.29)).abs() < 1e-12);
        // a: 0.25 + 0.25 + 0.04 = 0.54; b: 1 + 0 + 0.01 = 1.01
        assert!((r.sigma_t2 - 0.5 * (0.54 + 1.01)).abs() < 1e-12);
        let z = composite_constants(&[a, b], &[0.5, 0.5], &LossWeights::zeros(1)).unwrap();
        assert!((z.g_t2 - 5.0).abs() < 1e-12);
    }
}
