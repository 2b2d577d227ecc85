//! Training losses and evaluation metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use tdpcr_autodiff::{Array, Scalar, Tape, Var};

use crate::error::{Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// PSNR stand-in for identical images when writing tables.
pub const PSNR_TABLE_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub lambda_rec: f64,
    pub lambda_seg: f64,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_ssim: 0.1, lambda_rec: 1.0, lambda_seg: 1.0, label_smoothing: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_ssim, self.lambda_rec, self.lambda_seg, self.label_smoothing];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if self.label_smoothing >= 1.0 {
            return Err(Error::Config(format!("label_smoothing must be below 1, got {}", self.label_smoothing)));
        }
        Ok(())
    }
}

pub mod ssim {
    //! Structural similarity with a Gaussian window and valid-region cropping.

    pub const WINDOW: usize = 11;
    pub const SIGMA: f64 = 1.5;
    pub const K1: f64 = 0.01;
    pub const K2: f64 = 0.03;
    pub const DATA_RANGE: f64 = 1.0;

    /// Window length for an `h × w` image: 11, or the largest odd length that fits.
    pub fn window_len(h: usize, w: usize) -> usize {
        let n = WINDOW.min(h).min(w);
        if n.is_multiple_of(2) {
            n - 1
        } else {
            n
        }
    }

    /// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn gaussian_taps(n: usize) -> Vec<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Mean SSIM over every band, batch element and valid window position, as a graph node.
pub fn ssim<'t, T: Scalar>(x: Var<'t, T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("SSIM inputs {:?} vs {:?}", x.shape(), y.shape())));
    }
    let (_, _, h, w) = x.dims4()?;
    let n = ssim::window_len(h, w);
    if n == 0 {
        return Err(Error::Shape(format!("SSIM needs a non-empty image, got {h}x{w}")));
    }
    let taps = ssim::gaussian_taps(n);
    let c1 = (ssim::K1 * ssim::DATA_RANGE).powi(2);
    let c2 = (ssim::K2 * ssim::DATA_RANGE).powi(2);
    let filt = |v: Var<'t, T>| v.separable_filter_valid(&taps);

    let mx = filt(x)?;
    let my = filt(y)?;
    let mxx = mx.sqr();
    let myy = my.sqr();
    let mxy = mx.mul(my)?;
    let sxx = filt(x.sqr())?.sub(mxx)?;
    let syy = filt(y.sqr())?.sub(myy)?;
    let sxy = filt(x.mul(y)?)?.sub(mxy)?;

    let num = mxy.scale(2.0).add_scalar(c1).mul(sxy.scale(2.0).add_scalar(c2))?;
    let den = mxx.add(myy)?.add_scalar(c1).mul(sxx.add(syy)?.add_scalar(c2))?;
    Ok(num.div(den)?.mean_all())
}

/// `L1 + lambda_ssim · (1 − SSIM)`.
pub fn rec_loss<'t, T: Scalar>(restored: Var<'t, T>, target: Var<'t, T>, w: &LossWeights) -> Result<Var<'t, T>> {
    let l1 = restored.l1_mean(target)?;
    if w.lambda_ssim == 0.0 {
        return Ok(l1);
    }
    let s = ssim(restored, target)?;
    Ok(l1.add(s.scale(-w.lambda_ssim).add_scalar(w.lambda_ssim))?)
}

fn check_labels(labels: &[u8], k: usize) -> Result<()> {
    match labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= k) {
        Some(bad) => Err(Error::Data(format!("label {bad} out of range for {k} classes"))),
        None => Ok(()),
    }
}

/// Label-smoothed pixel-wise cross-entropy; `labels` is `[B, H, W]` flattened.
pub fn seg_loss<'t, T: Scalar>(logits: Var<'t, T>, labels: &[u8], w: &LossWeights) -> Result<Var<'t, T>> {
    let (_, k, _, _) = logits.dims4()?;
    check_labels(labels, k)?;
    Ok(logits.cross_entropy_smoothed(labels, w.label_smoothing, Some(IGNORE_LABEL))?)
}

pub fn joint_loss<'t, T: Scalar>(
    restored: Var<'t, T>,
    target: Var<'t, T>,
    logits: Var<'t, T>,
    labels: &[u8],
    w: &LossWeights,
) -> Result<Var<'t, T>> {
    let rec = rec_loss(restored, target, w)?.scale(w.lambda_rec);
    let seg = seg_loss(logits, labels, w)?.scale(w.lambda_seg);
    Ok(rec.add(seg)?)
}

/// `10·log10(1 / MSE)` over all elements; `+inf` for identical inputs.
pub fn psnr<T: Scalar>(restored: &Array<T>, target: &Array<T>) -> Result<f64> {
    if restored.shape() != target.shape() || restored.is_empty() {
        return Err(Error::Shape(format!("PSNR inputs {:?} vs {:?}", restored.shape(), target.shape())));
    }
    let mse = restored.data().iter().zip(target.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>()
        / restored.len() as f64;
    Ok(match mse {
        0.0 => f64::INFINITY,
        m => 10.0 * (ssim::DATA_RANGE.powi(2) / m).log10(),
    })
}

pub fn ssim_metric<T: Scalar>(restored: &Array<T>, target: &Array<T>) -> Result<f64> {
    let tape = Tape::<f64>::new();
    let s = ssim(tape.constant(restored.cast()), tape.constant(target.cast()))?;
    let v = s.value().data()[0];
    Ok(v)
}

/// `K × K` counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
        }
        check_labels(truth, self.k)?;
        check_labels(pred, self.k)?;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_LABEL || p == IGNORE_LABEL {
                continue;
            }
            self.counts[t as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn metrics(&self) -> SegMetrics {
        let k = self.k;
        let total = self.total();
        let correct: u64 = (0..k).map(|c| self.get(c, c)).sum();
        let per_class_iou: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        SegMetrics {
            pixel_accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
            miou: if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
            per_class_iou,
            pixels: total,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    pub pixel_accuracy: f64,
    /// Mean over classes present in the prediction or the truth.
    pub miou: f64,
    /// `None` for classes absent from both.
    pub per_class_iou: Vec<Option<f64>>,
    pub pixels: u64,
}

/// Per-pixel argmax over the class axis of `[B, K, H, W]` logits.
pub fn argmax_classes<T: Scalar>(logits: &Array<T>) -> Result<Vec<u8>> {
    let (b, k, h, w) = logits.dims4()?;
    if k > IGNORE_LABEL as usize {
        return Err(Error::Argument(format!("{k} classes do not fit in a byte label")));
    }
    let hw = h * w;
    let z = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if z[(bi * k + c) * hw + p] > z[(bi * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

pub fn seg_metrics(pred: &[u8], truth: &[u8], k: usize) -> Result<SegMetrics> {
    let mut cm = ConfusionMatrix::new(k);
    cm.add(pred, truth)?;
    Ok(cm.metrics())
}

/// Flat `name value count` records, one per line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub name: String,
    pub value: f64,
    pub count: u64,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, value: f64, count: u64) {
        self.records.push(MetricRecord { name: name.into(), value, count });
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.records.iter().find(|r| r.name == name).map(|r| r.value)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let v = if r.value.is_infinite() { PSNR_TABLE_CAP.copysign(r.value) } else { r.value };
            let _ = writeln!(s, "{} {:.6} {}", r.name, v, r.count);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut report = Self::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Data(format!("metric line {}: '{line}'", i + 1));
            if parts.len() != 3 {
                return Err(bad());
            }
            report.push(parts[0], parts[1].parse().map_err(|_| bad())?, parts[2].parse().map_err(|_| bad())?);
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Array::<f64>::full(&[1, 1, 4, 4], 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn rec_loss_examples() {
        let tape = Tape::<f64>::new();
        let gt = Array::from_fn(&[1, 2, 12, 12], |i| (i % 7) as f64 / 7.0);
        let w = LossWeights::default();
        let zero = rec_loss(tape.constant(gt.clone()), tape.constant(gt.clone()), &w).unwrap();
        assert!(zero.value().data()[0].abs() < 1e-12);
        let shifted = tape.constant(gt.map(|v| v + 0.5));
        let l1_only = LossWeights { lambda_ssim: 0.0, ..w };
        assert!((rec_loss(shifted, tape.constant(gt), &l1_only).unwrap().value().data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_examples() {
        let tape = Tape::<f64>::new();
        let w0 = LossWeights { label_smoothing: 0.0, ..Default::default() };
        let uniform = tape.constant(Array::zeros(&[1, 6, 2, 2]));
        let l = seg_loss(uniform, &[0, 1, 2, 5], &w0).unwrap();
        assert!((l.value().data()[0] - 6f64.ln()).abs() < 1e-12);

        // one pixel, K = 6, eps = 0.1, logits z = [2, 0, 0, 0, 0, 0], label 0
        let mut z = Array::zeros(&[1, 6, 1, 1]);
        z.data_mut()[0] = 2.0;
        let lse = (2f64.exp() + 5.0).ln();
        let expected = -(0.9 * (2.0 - lse) + 5.0 * 0.02 * (0.0 - lse));
        let l = seg_loss(tape.constant(z), &[0], &LossWeights::default()).unwrap();
        assert!((l.value().data()[0] - expected).abs() < 1e-12);

        let bad = seg_loss(tape.constant(Array::zeros(&[1, 3, 1, 1])), &[3], &w0);
        assert!(matches!(bad, Err(Error::Data(_))));
    }

    #[test]
    fn huge_margin_gives_zero_loss() {
        let tape = Tape::<f64>::new();
        let mut z = Array::zeros(&[1, 3, 1, 1]);
        z.data_mut()[1] = 1e4;
        let w0 = LossWeights { label_smoothing: 0.0, ..Default::default() };
        assert!(seg_loss(tape.constant(z), &[1], &w0).unwrap().value().data()[0].abs() < 1e-12);
    }

    #[test]
    fn two_by_two_confusion() {
        // truth [0,0,1,1], prediction [0,1,1,1]
        let m = seg_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 3).unwrap();
        assert_eq!(m.pixel_accuracy, 0.75);
        // IoU_0 = 1/2, IoU_1 = 2/3, class 2 absent
        assert_eq!(m.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0), None]);
        assert!((m.miou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn ignored_pixels_are_skipped() {
        let m = seg_metrics(&[0, 1], &[0, IGNORE_LABEL], 2).unwrap();
        assert_eq!(m.pixels, 1);
        assert_eq!(m.pixel_accuracy, 1.0);
    }

    #[test]
    fn report_round_trip() {
        let mut r = MetricReport::default();
        r.push("psnr", 31.25, 8);
        r.push("miou", 0.5, 8);
        assert_eq!(MetricReport::parse(&r.to_text()).unwrap(), r);
        let mut inf = MetricReport::default();
        inf.push("psnr", f64::INFINITY, 1);
        assert_eq!(inf.to_text(), "psnr 100.000000 1\n");
    }

    #[test]
    fn window_shrinks_for_small_images() {
        assert_eq!(ssim::window_len(128, 128), 11);
        assert_eq!(ssim::window_len(8, 8), 7);
        assert_eq!(ssim::window_len(8, 5), 5);
        assert!((ssim::gaussian_taps(11).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
