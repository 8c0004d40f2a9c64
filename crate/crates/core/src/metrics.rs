//! Pixel confusion counts and the segmentation metrics derived from them.

use std::fmt::Write as _;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Foreground IoU, `tp / (tp + fn + fp)`. A frame with no foreground in
    /// either map scores 1.
    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_ + self.fp).unwrap_or(1.0)
    }

    pub fn background_iou(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp + self.fn_).unwrap_or(1.0)
    }

    /// Mean of foreground and background IoU.
    pub fn miou(&self) -> f64 {
        (self.iou() + self.background_iou()) / 2.0
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp).unwrap_or(0.0)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_).unwrap_or(0.0)
    }

    /// `2·Pre·Rec / (Pre + Rec)`, 0 when both vanish.
    pub fn f_beta(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total()).unwrap_or(0.0)
    }

    pub fn tpr(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn tnr(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn fnr(&self) -> Option<f64> {
        ratio(self.fn_, self.fn_ + self.tp)
    }

    /// Normalized pixel accuracy `(TPR + TNR) / 2`; `None` when either class
    /// is absent from the ground truth.
    pub fn npa(&self) -> Option<f64> {
        Some((self.tpr()? + self.tnr()?) / 2.0)
    }
}

/// Binarizes `pred` at `threshold` (`p ≥ threshold` is foreground) and counts
/// against a binary `target`.
pub fn confusion(pred: &Tensor, target: &Tensor, threshold: f32) -> Result<ConfusionCounts> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "confusion",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        match (p >= threshold, t >= 0.5) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Dataset-level report built from globally accumulated counts.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    /// Images whose ground truth lacked one class (NPA undefined for them).
    pub npa_undefined: usize,
    /// Mean per-image NPA over images where it is defined.
    pub npa_mean: Option<f64>,
}

impl MetricsReport {
    pub fn from_counts(per_image: &[ConfusionCounts]) -> Self {
        let counts: ConfusionCounts = per_image.iter().copied().sum();
        let defined: Vec<f64> = per_image.iter().filter_map(|c| c.npa()).collect();
        let npa_undefined = per_image.len() - defined.len();
        if npa_undefined > 0 {
            log::warn!("NPA undefined for {npa_undefined} image(s) with a single class; excluded");
        }
        let npa_mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        MetricsReport {
            counts,
            npa_undefined,
            npa_mean,
        }
    }

    /// `(name, value)` pairs; undefined values are omitted.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let c = &self.counts;
        let mut v = vec![
            ("iou", c.iou()),
            ("miou", c.miou()),
            ("f_beta", c.f_beta()),
            ("precision", c.precision()),
            ("recall", c.recall()),
            ("pixel_accuracy", c.pixel_accuracy()),
        ];
        for (name, value) in [
            ("npa", c.npa()),
            ("tpr", c.tpr()),
            ("tnr", c.tnr()),
            ("fpr", c.fpr()),
            ("fnr", c.fnr()),
        ] {
            if let Some(x) = value {
                v.push((name, x));
            }
        }
        v
    }

    /// Line-oriented `metric=value`.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v:.6}");
        }
        let c = &self.counts;
        let _ = writeln!(s, "tp={}\ntn={}\nfp={}\nfn={}", c.tp, c.tn, c.fp, c.fn_);
        let _ = writeln!(s, "npa_undefined_images={}", self.npa_undefined);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>10}", "metric", "value");
        let _ = writeln!(s, "{}", "-".repeat(27));
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k:<16} {:>9.2}%", v * 100.0);
        }
        let c = &self.counts;
        let _ = writeln!(s, "{}", "-".repeat(27));
        let _ = writeln!(s, "pixels: tp={} tn={} fp={} fn={}", c.tp, c.tn, c.fp, c.fn_);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_arithmetic() {
        assert!((ConfusionCounts::new(1, 0, 1, 1).iou() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(ConfusionCounts::new(5, 5, 0, 0).iou(), 1.0);
        assert_eq!(ConfusionCounts::new(0, 5, 3, 2).iou(), 0.0);
    }

    #[test]
    fn f_beta_worked_example() {
        let c = ConfusionCounts::new(8, 0, 2, 4);
        assert!((c.precision() - 0.8).abs() < 1e-12);
        assert!((c.recall() - 2.0 / 3.0).abs() < 1e-12);
        let want = 2.0 * 0.8 * (2.0 / 3.0) / (0.8 + 2.0 / 3.0);
        assert!((c.f_beta() - want).abs() < 1e-12);
        assert!((c.f_beta() - 0.727_272_7).abs() < 1e-6);
    }

    #[test]
    fn f_beta_equal_pre_rec() {
        let c = ConfusionCounts::new(1, 0, 1, 1);
        assert!((c.f_beta() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn npa_cases() {
        assert_eq!(ConfusionCounts::new(3, 7, 0, 0).npa(), Some(1.0));
        // TPR 0.9, TNR 0.96
        let c = ConfusionCounts::new(90, 96, 4, 10);
        assert!((c.npa().unwrap() - 0.93).abs() < 1e-12);
        assert_eq!(ConfusionCounts::new(0, 10, 0, 0).npa(), None);
    }

    #[test]
    fn pixel_accuracy_imbalance() {
        // 98.5% negatives, everything predicted negative.
        let c = ConfusionCounts::new(0, 985, 0, 15);
        assert!((c.pixel_accuracy() - 0.985).abs() < 1e-12);
        assert_eq!(c.npa(), Some(0.5));
        assert_eq!(c.recall(), 0.0);
    }

    #[test]
    fn confusion_rejects_bad_threshold() {
        let t = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(confusion(&t, &t, 0.0).is_err());
        assert!(confusion(&t, &t, 1.0).is_err());
    }

    #[test]
    fn report_kv_lines() {
        let r = MetricsReport::from_counts(&[ConfusionCounts::new(2, 2, 0, 0)]);
        let kv = r.to_kv();
        assert!(kv.contains("iou=1.000000"));
        assert!(kv.contains("npa=1.000000"));
        assert!(r.to_table().contains("iou"));
    }
}
