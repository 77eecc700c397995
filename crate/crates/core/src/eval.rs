//! Segmentation metrics and dataset statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Frame, Mask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn merge(&mut self, o: &ConfusionCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub f_beta: f64,
    pub mae: f64,
    pub ber: f64,
    pub acc: f64,
    pub n_frames: usize,
}

/// Per-frame averages plus the variant computed from pooled pixel counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub per_frame_mean: MetricsReport,
    pub pooled: MetricsReport,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricParams {
    pub threshold: f64,
    pub beta_sq: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            beta_sq: 0.3,
        }
    }
}

/// Prediction is positive when `p ≥ τ`; ground truth when `g ≥ 0.5`.
pub fn confusion(pred: &Mask, gt: &Mask, threshold: f64) -> Result<ConfusionCounts> {
    if !pred.same_size(gt) {
        return Err(Error::shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold {threshold} outside (0,1)"
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        match (p >= threshold, g >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// IoU, F_β, BER and ACC from counts; `mae` is supplied by the caller.
///
/// Conventions: a frame with neither predicted nor true glass scores IoU 1
/// and F_β 1. BER averages the error rates of the classes present.
pub fn scores(c: &ConfusionCounts, mae: f64, beta_sq: f64) -> MetricsReport {
    let iou = ratio(c.tp, c.tp + c.fp + c.fn_).unwrap_or(1.0);
    let f_beta = if c.tp + c.fp + c.fn_ == 0 {
        1.0
    } else {
        let p = ratio(c.tp, c.tp + c.fp).unwrap_or(0.0);
        let r = ratio(c.tp, c.tp + c.fn_).unwrap_or(0.0);
        if p == 0.0 && r == 0.0 {
            0.0
        } else {
            (1.0 + beta_sq) * p * r / (beta_sq * p + r)
        }
    };
    let rates: Vec<f64> = [ratio(c.tp, c.tp + c.fn_), ratio(c.tn, c.tn + c.fp)]
        .into_iter()
        .flatten()
        .collect();
    let ber = if rates.is_empty() {
        0.0
    } else {
        1.0 - rates.iter().sum::<f64>() / rates.len() as f64
    };
    let acc = ratio(c.tp + c.tn, c.total()).unwrap_or(1.0);
    MetricsReport {
        iou,
        f_beta,
        mae,
        ber,
        acc,
        n_frames: 1,
    }
}

fn mae(pred: &Mask, gt: &Mask) -> f64 {
    pred.values
        .iter()
        .zip(&gt.values)
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / pred.len() as f64
}

pub fn frame_metrics(pred: &Mask, gt: &Mask, params: MetricParams) -> Result<MetricsReport> {
    let c = confusion(pred, gt, params.threshold)?;
    Ok(scores(&c, mae(pred, gt), params.beta_sq))
}

/// Mean of per-frame metrics.
pub fn metrics(preds: &[Mask], gts: &[Mask]) -> Result<MetricsReport> {
    Ok(sequence_metrics(preds, gts, MetricParams::default())?.per_frame_mean)
}

pub fn sequence_metrics(
    preds: &[Mask],
    gts: &[Mask],
    params: MetricParams,
) -> Result<SequenceMetrics> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Dataset(format!(
            "metrics need equal nonempty sequences, got {} predictions and {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut sum = [0.0; 5];
    let mut pooled = ConfusionCounts::default();
    let mut abs_err = 0.0;
    let mut pixels = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        let c = confusion(p, g, params.threshold)?;
        let m = scores(&c, mae(p, g), params.beta_sq);
        for (s, v) in sum.iter_mut().zip([m.iou, m.f_beta, m.mae, m.ber, m.acc]) {
            *s += v;
        }
        pooled.merge(&c);
        abs_err += m.mae * p.len() as f64;
        pixels += p.len();
    }
    let n = preds.len();
    let per_frame_mean = MetricsReport {
        iou: sum[0] / n as f64,
        f_beta: sum[1] / n as f64,
        mae: sum[2] / n as f64,
        ber: sum[3] / n as f64,
        acc: sum[4] / n as f64,
        n_frames: n,
    };
    let mut pooled = scores(&pooled, abs_err / pixels as f64, params.beta_sq);
    pooled.n_frames = n;
    Ok(SequenceMetrics {
        per_frame_mean,
        pooled,
    })
}

/// Pixelwise mean of equally sized masks.
pub fn location_distribution(masks: &[Mask]) -> Result<Mask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Dataset("location distribution of no masks".into()))?;
    let mut acc = vec![0.0; first.len()];
    for m in masks {
        if !m.same_size(first) {
            return Err(Error::shape("location distribution masks differ in size"));
        }
        for (a, v) in acc.iter_mut().zip(&m.values) {
            *a += v;
        }
    }
    let n = masks.len() as f64;
    Ok(Mask::new(
        first.height,
        first.width,
        acc.into_iter().map(|v| v / n).collect(),
    ))
}

pub const CHI2_BINS: usize = 256;
const CHI2_EPS: f64 = 1e-12;

/// Half the χ² distance between normalized 256-bin color histograms of the
/// glass and non-glass pixels, averaged over RGB. Lies in `[0, 1]`.
pub fn chi2_contrast(frame: &Frame, mask: &Mask) -> Result<f64> {
    if frame.height != mask.height || frame.width != mask.width {
        return Err(Error::shape("frame and mask differ in size"));
    }
    let mut hist = [[[0.0f64; CHI2_BINS]; 3]; 2];
    let mut counts = [0usize; 2];
    for (i, &m) in mask.values.iter().enumerate() {
        let side = usize::from(m >= 0.5);
        counts[side] += 1;
        for c in 0..3 {
            let bin = (frame.data[i * 3 + c].clamp(0.0, 1.0) * 255.0).round() as usize;
            hist[side][c][bin] += 1.0;
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::DegenerateMask);
    }
    let mut total = 0.0;
    for c in 0..3 {
        let mut chi = 0.0;
        for b in 0..CHI2_BINS {
            let hg = hist[1][c][b] / counts[1] as f64;
            let hn = hist[0][c][b] / counts[0] as f64;
            let s = hg + hn;
            if s > 0.0 {
                chi += (hg - hn).powi(2) / (s + CHI2_EPS);
            }
        }
        total += 0.5 * chi;
    }
    Ok((total / 3.0).clamp(0.0, 1.0))
}

/// Histogram of values in `[0, 1]` over `bins` equal-width bins.
pub fn histogram01(values: &[f64], bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        h[b] += 1;
    }
    h
}
