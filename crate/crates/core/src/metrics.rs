//! Confusion matrices and mean segmentation scores.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{SegNet, Site};
use crate::numeric::tape::IGNORE_LABEL;
use crate::numeric::{Real, Tape, Tensor};

/// `counts[a * K + b]` = pixels of true class `a` predicted as `b`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::dim(
                "confusion",
                format!("{} counts for {classes} classes", counts.len()),
            ));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel; ignore-labelled pixels are skipped.
    pub fn update(&mut self, predictions: &[u8], labels: &[u8]) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::dim(
                "confusion",
                format!("{} predictions for {} labels", predictions.len(), labels.len()),
            ));
        }
        let k = self.classes;
        for (i, (&p, &l)) in predictions.iter().zip(labels).enumerate() {
            if l == IGNORE_LABEL {
                continue;
            }
            if l as usize >= k || p as usize >= k {
                return Err(Error::Data {
                    sample: i,
                    detail: format!("class id {} out of range for {k} classes", l.max(p)),
                });
            }
            self.counts[l as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Accumulates argmax predictions of `[B, K, H, W]` logits.
    pub fn update_from_logits<R: Real>(&mut self, logits: &Tensor<R>, labels: &[u8]) -> Result<()> {
        self.update(&argmax_channels(logits)?, labels)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim(
                "confusion",
                format!("cannot merge {} classes into {}", other.classes, self.classes),
            ));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Per-pixel argmax over axis 1 of `[B, K, H, W]`; ties go to the lower class.
pub fn argmax_channels<R: Real>(logits: &Tensor<R>) -> Result<Vec<u8>> {
    let &[b, k, h, w] = logits.shape() else {
        return Err(Error::dim(
            "argmax",
            format!("logits must be [B, K, H, W], got {:?}", logits.shape()),
        ));
    };
    let hw = h * w;
    let d = logits.data();
    let mut out = vec![0u8; b * hw];
    for n in 0..b {
        for i in 0..hw {
            let mut best = 0;
            let mut best_v = d[n * k * hw + i];
            for c in 1..k {
                let v = d[(n * k + c) * hw + i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out[n * hw + i] = best as u8;
        }
    }
    Ok(out)
}

/// Mean scores in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou: f64,
    pub mf1: f64,
    pub mpre: f64,
    pub mrec: f64,
}

/// Per-class IoU, F1, precision and recall averaged over classes that occur
/// in the truth or the predictions. A 0/0 precision or recall counts as 0.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<SegMetrics> {
    if cm.total() == 0 {
        return Err(Error::InsufficientData("confusion matrix is empty".into()));
    }
    let k = cm.classes;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut iou, mut f1, mut pre, mut rec) = (0.0, 0.0, 0.0, 0.0);
    let mut present = 0usize;
    for c in 0..k {
        let tp = cm.get(c, c);
        let truth: u64 = (0..k).map(|p| cm.get(c, p)).sum();
        let predicted: u64 = (0..k).map(|t| cm.get(t, c)).sum();
        if truth == 0 && predicted == 0 {
            continue;
        }
        present += 1;
        let (fp, fn_) = (predicted - tp, truth - tp);
        let p = ratio(tp, tp + fp);
        let r = ratio(tp, tp + fn_);
        iou += ratio(tp, tp + fp + fn_);
        pre += p;
        rec += r;
        f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let scale = 100.0 / present as f64;
    Ok(SegMetrics {
        miou: iou * scale,
        mf1: f1 * scale,
        mpre: pre * scale,
        mrec: rec * scale,
    })
}

/// Held-out evaluation of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub confusion: ConfusionMatrix,
    pub metrics: SegMetrics,
    /// Pixel-mean output cross-entropy.
    pub mean_ce: f64,
    /// Mean per-pixel channel-softmax entropy at each requested tap.
    pub tap_entropy: Vec<f64>,
}

/// Runs the network over `data` in chunks of `batch_size` without
/// recording gradients. Tap entropies use the first `entropy_channels`
/// channels at each of `sites` (all channels when `None`).
pub fn evaluate<R: Real>(
    net: &SegNet<R>,
    data: &Dataset,
    batch_size: usize,
    sites: &[Site],
    entropy_channels: Option<usize>,
) -> Result<EvalSummary> {
    if data.is_empty() {
        return Err(Error::InsufficientData("evaluation set is empty".into()));
    }
    let mut cm = ConfusionMatrix::new(net.config().classes);
    let mut ce_sum = 0.0;
    let mut pixels = 0usize;
    let mut entropy = vec![0.0; sites.len()];
    let mut tape = Tape::new();
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch::<R>(idx)?;
        tape.clear();
        let xv = tape.constant(x);
        let fp = net.forward(&mut tape, xv, sites, false)?;
        for (e, &z) in entropy.iter_mut().zip(&fp.taps.vars) {
            let ne = crate::objectives::ne_reg(&mut tape, z, entropy_channels)?;
            *e -= tape.value(ne).item()?.to_f64().unwrap_or(f64::NAN) * idx.len() as f64;
        }
        let ce = tape.cross_entropy_logits(fp.logits, &labels)?;
        let valid = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
        ce_sum += tape.value(ce).item()?.to_f64().unwrap_or(f64::NAN) * valid as f64;
        pixels += valid;
        cm.update_from_logits(tape.value(fp.logits), &labels)?;
    }
    Ok(EvalSummary {
        metrics: compute_metrics(&cm)?,
        confusion: cm,
        mean_ce: if pixels > 0 { ce_sum / pixels as f64 } else { 0.0 },
        tap_entropy: entropy.iter().map(|e| e / data.len() as f64).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!(cm.counts(), &[1, 0, 0, 0, 1, 0, 0, 0, 2]);
        let m = compute_metrics(&cm).unwrap();
        assert_eq!((m.miou, m.mf1, m.mpre, m.mrec), (100.0, 100.0, 100.0, 100.0));
    }

    #[test]
    fn constant_prediction_fills_column_zero() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0; 5], &[0, 1, 2, 255, 1]).unwrap();
        assert_eq!(cm.total(), 4);
        assert_eq!((cm.get(0, 0), cm.get(1, 0), cm.get(2, 0)), (1, 2, 1));
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.update(&[0, 3], &[0, 1]).is_err());
        assert!(compute_metrics(&ConfusionMatrix::new(2)).is_err());
    }

    #[test]
    fn two_class_hand_example() {
        let cm = ConfusionMatrix::from_counts(2, vec![50, 10, 20, 20]).unwrap();
        let m = compute_metrics(&cm).unwrap();
        assert!((m.miou - 51.25).abs() < 1e-12);
        // Pre = (50/70, 20/30), Rec = (50/60, 20/40)
        let pre = [50.0 / 70.0, 20.0 / 30.0];
        let rec = [50.0 / 60.0, 0.5];
        assert!((m.mpre - 50.0 * (pre[0] + pre[1])).abs() < 1e-12);
        assert!((m.mrec - 50.0 * (rec[0] + rec[1])).abs() < 1e-12);
    }

    #[test]
    fn absent_class_is_excluded() {
        let two = ConfusionMatrix::from_counts(2, vec![50, 10, 20, 20]).unwrap();
        let three = ConfusionMatrix::from_counts(3, vec![50, 10, 0, 20, 20, 0, 0, 0, 0]).unwrap();
        assert_eq!(compute_metrics(&two).unwrap(), compute_metrics(&three).unwrap());
    }

    #[test]
    fn argmax_prefers_lower_class_on_ties() {
        let t = Tensor::<f32>::new(&[1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_channels(&t).unwrap(), vec![0, 1]);
    }

    fn brute_force(k: usize, counts: &[u64]) -> [f64; 4] {
        let mut acc = [0.0; 4];
        let mut n = 0.0;
        for c in 0..k {
            let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
            for a in 0..k {
                for b in 0..k {
                    let v = counts[a * k + b] as f64;
                    if a == c && b == c {
                        tp += v;
                    } else if b == c {
                        fp += v;
                    } else if a == c {
                        fnn += v;
                    }
                }
            }
            if tp + fp + fnn == 0.0 {
                continue;
            }
            n += 1.0;
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
            acc[0] += tp / (tp + fp + fnn);
            acc[1] += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            acc[2] += p;
            acc[3] += r;
        }
        acc.map(|v| 100.0 * v / n)
    }

    proptest! {
        #[test]
        fn matches_brute_force(k in 2usize..6, seed in proptest::collection::vec(0u64..50, 36)) {
            let counts: Vec<u64> = seed[..k * k].iter().map(|&v| if v < 15 { 0 } else { v }).collect();
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let m = compute_metrics(&ConfusionMatrix::from_counts(k, counts.clone()).unwrap()).unwrap();
            let b = brute_force(k, &counts);
            for (x, y) in [m.miou, m.mf1, m.mpre, m.mrec].iter().zip(b) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }

        #[test]
        fn update_matches_double_loop(pairs in proptest::collection::vec((0u8..4, 0u8..4), 0..200)) {
            let (pred, truth): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
            let mut cm = ConfusionMatrix::new(4);
            cm.update(&pred, &truth).unwrap();
            for a in 0..4u8 {
                for b in 0..4u8 {
                    let n = pairs.iter().filter(|&&(p, t)| t == a && p == b).count() as u64;
                    prop_assert_eq!(cm.get(a as usize, b as usize), n);
                }
            }
        }
    }
}
