//! Image and volume quality metrics, mask overlap and classification scores.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Image, Volume};

fn same_len(op: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Metric(format!("{op}: sizes differ ({a} vs {b})")));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for signals with peak 1; identical inputs give +inf.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    same_len("psnr", a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::Metric("psnr: empty input".into()));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * libm::log10(1.0 / mse)
    })
}

pub fn psnr_volumes(a: &Volume, b: &Volume) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::Metric(format!("psnr: dims {:?} vs {:?}", a.dims, b.dims)));
    }
    psnr(&a.data, &b.data)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = libm::exp(-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable Gaussian filter of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..SSIM_WINDOW).map(|t| k[t] * x[y * w + x0 + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..SSIM_WINDOW).map(|t| k[t] * rows[(y0 + t) * ow + x0]).sum();
        }
    }
    out
}

/// Mean SSIM over every window position fully inside a 2D plane, dynamic
/// range 1.
pub fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<f64> {
    same_len("ssim", a.len(), b.len())?;
    same_len("ssim", a.len(), h * w)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Metric(format!("ssim: {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let k = gaussian_window();
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&a, h, w, &k);
    let mu_b = filter_valid(&b, h, w, &k);
    let aa = filter_valid(&prod(&a, &a), h, w, &k);
    let bb = filter_valid(&prod(&b, &b), h, w, &k);
    let ab = filter_valid(&prod(&a, &b), h, w, &k);
    let (c1, c2) = ((SSIM_K1 * SSIM_K1), (SSIM_K2 * SSIM_K2));
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::Metric(format!("ssim: {}x{} vs {}x{}", a.h, a.w, b.h, b.w)));
    }
    ssim_plane(&a.data, &b.data, a.h, a.w)
}

/// Mean 2D SSIM over the slices along axis 0 (the vertical axis for both
/// DHW and HWD volumes).
pub fn ssim_volumes(a: &Volume, b: &Volume) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::Metric(format!("ssim: dims {:?} vs {:?}", a.dims, b.dims)));
    }
    let [n, h, w] = a.dims;
    let mut total = 0.0;
    for s in 0..n {
        let r = s * h * w..(s + 1) * h * w;
        total += ssim_plane(&a.data[r.clone()], &b.data[r], h, w)?;
    }
    Ok(total / n as f64)
}

/// Multiple of the mean density above which a voxel counts as high density.
pub const DENSITY_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdRule {
    /// Each volume is thresholded at 1.5x its own mean.
    #[default]
    OwnMean,
    /// Both volumes use 1.5x the ground-truth mean.
    GtMean,
}

pub fn mean(data: &[f32]) -> f64 {
    data.iter().map(|&v| v as f64).sum::<f64>() / data.len().max(1) as f64
}

/// Voxels strictly above `DENSITY_FACTOR * reference_mean`.
pub fn high_density_mask(data: &[f32], reference_mean: f64) -> Vec<bool> {
    let t = DENSITY_FACTOR * reference_mean;
    data.iter().map(|&v| v as f64 > t).collect()
}

/// Overlap counts of two boolean masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Overlap {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Overlap {
    pub fn of(pred: &[bool], gt: &[bool]) -> Result<Self> {
        same_len("overlap", pred.len(), gt.len())?;
        let mut o = Overlap::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => o.tp += 1,
                (true, false) => o.fp += 1,
                (false, true) => o.fn_ += 1,
                (false, false) => o.tn += 1,
            }
        }
        Ok(o)
    }

    pub fn dsc(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }

    pub fn precision(&self) -> f64 {
        match self.tp + self.fp {
            0 if self.fn_ == 0 => 1.0,
            0 => 0.0,
            d => self.tp as f64 / d as f64,
        }
    }

    pub fn recall(&self) -> f64 {
        match self.tp + self.fn_ {
            0 if self.fp == 0 => 1.0,
            0 => 0.0,
            d => self.tp as f64 / d as f64,
        }
    }
}

/// Dice overlap of the high-density regions of two volumes.
pub fn dsc_volumes(recon: &Volume, gt: &Volume, rule: ThresholdRule) -> Result<f64> {
    if recon.dims != gt.dims {
        return Err(Error::Metric(format!("dsc: dims {:?} vs {:?}", recon.dims, gt.dims)));
    }
    let gm = mean(&gt.data);
    let rm = match rule {
        ThresholdRule::OwnMean => mean(&recon.data),
        ThresholdRule::GtMean => gm,
    };
    let a = high_density_mask(&recon.data, rm);
    let b = high_density_mask(&gt.data, gm);
    Ok(Overlap::of(&a, &b)?.dsc())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    pub dsc: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

fn binary(op: &str, data: &[f32]) -> Result<Vec<bool>> {
    data.iter()
        .map(|&v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(Error::Metric(format!("{op}: mask value {v} is not 0 or 1"))),
        })
        .collect()
}

/// Overlap scores of binary (0/1) masks. When both masks are empty every
/// score is 1.
pub fn mask_metrics(pred: &Image, gt: &Image) -> Result<MaskMetrics> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(Error::Metric(format!("mask_metrics: {}x{} vs {}x{}", pred.h, pred.w, gt.h, gt.w)));
    }
    let o = Overlap::of(&binary("mask_metrics", &pred.data)?, &binary("mask_metrics", &gt.data)?)?;
    Ok(MaskMetrics {
        dsc: o.dsc(),
        iou: o.iou(),
        precision: o.precision(),
        recall: o.recall(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of samples labelled with this class.
    pub support: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassRow>,
    pub confusion: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

/// Accuracy and macro-averaged precision, recall and F1 over `k` classes.
/// Undefined ratios count as 0; a class absent from both inputs still
/// counts in the macro denominator, with a warning.
pub fn classification_report(preds: &[usize], labels: &[usize], k: usize) -> Result<ClassificationReport> {
    same_len("classification_report", preds.len(), labels.len())?;
    if preds.is_empty() {
        return Err(Error::Metric("classification_report: no samples".into()));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= k) {
        return Err(Error::Metric(format!("class id {bad} outside [0,{k})")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let mut warnings = Vec::new();
    let per_class: Vec<ClassRow> = (0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = (0..k).map(|l| confusion[l][c]).sum();
            if support == 0 && predicted == 0 {
                warnings.push(format!("class {c} absent from predictions and labels"));
            }
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassRow {
                precision,
                recall,
                f1,
                support,
                predicted,
            }
        })
        .collect();
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let avg = |f: fn(&ClassRow) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    Ok(ClassificationReport {
        accuracy: correct as f64 / preds.len() as f64,
        macro_precision: avg(|r| r.precision),
        macro_recall: avg(|r| r.recall),
        macro_f1: avg(|r| r.f1),
        per_class,
        confusion,
        warnings,
    })
}

/// Named scalar metrics over a set of samples.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    /// Non-finite values are written as the strings "inf", "-inf" and "nan".
    #[serde(with = "scalar_map")]
    pub metrics: BTreeMap<String, f64>,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class: Option<Vec<ClassRow>>,
}

impl MetricReport {
    pub fn insert(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

mod scalar_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Scalar {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_map(m.iter().map(|(k, &v)| {
            let v = if v.is_finite() {
                Scalar::Num(v)
            } else if v.is_nan() {
                Scalar::Text("nan".into())
            } else if v > 0.0 {
                Scalar::Text("inf".into())
            } else {
                Scalar::Text("-inf".into())
            };
            (k, v)
        }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> core::result::Result<BTreeMap<String, f64>, D::Error> {
        let raw = BTreeMap::<String, Scalar>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| {
                let x = match v {
                    Scalar::Num(x) => x,
                    Scalar::Text(t) => match t.as_str() {
                        "inf" => f64::INFINITY,
                        "-inf" => f64::NEG_INFINITY,
                        "nan" => f64::NAN,
                        _ => return Err(serde::de::Error::custom(format!("metric {k}: {t:?}"))),
                    },
                };
                Ok((k, x))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(w[0], w[10]);
    }

    #[test]
    fn binary_report_example() {
        // TP=6, FP=2, FN=1, TN=5 for class 1
        let mut preds = vec![1; 6];
        let mut labels = vec![1; 6];
        preds.extend([1, 1, 0, 0, 0, 0, 0, 0]);
        labels.extend([0, 0, 1, 0, 0, 0, 0, 0]);
        let r = classification_report(&preds, &labels, 2).unwrap();
        let c = r.per_class[1];
        assert!((c.precision - 0.75).abs() < 1e-15);
        assert!((c.recall - 6.0 / 7.0).abs() < 1e-15);
        assert!((c.f1 - 0.8).abs() < 1e-12);
    }
}
