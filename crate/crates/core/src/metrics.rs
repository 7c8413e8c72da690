//! Pixel-level scores for binary masks.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `height x width` mask of booleans (true = foreground).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} mask",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// From 0/1 values; anything else is an error.
    pub fn from_binary_values(height: usize, width: usize, values: &[u8]) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| **v > 1) {
            return Err(Error::Range(format!("mask value {v} is not 0 or 1")));
        }
        Self::new(height, width, values.iter().map(|v| *v == 1).collect())
    }

    /// Thresholds a continuous `[H, W]`, `[1, H, W]` or `[1, 1, H, W]` tensor:
    /// values strictly above `threshold` are foreground.
    pub fn from_tensor(t: &Tensor, threshold: f64) -> Result<Self> {
        let dims = t.dims();
        let (h, w) = match dims {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            _ => return Err(Error::Shape(format!("cannot read a mask from {dims:?}"))),
        };
        let values = t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
        Self::new(h, w, values.iter().map(|v| *v > threshold).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    /// The mask in the `{-1, +1}` encoding used by the diffusion process.
    pub fn to_signed(&self) -> Vec<f32> {
        self.data.iter().map(|v| if *v { 1.0 } else { -1.0 }).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `tp / (tp + fp + fn)`, or 1 when both masks are empty.
pub fn iou(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp + c.fn_)
}

/// `2 tp / (2 tp + fp + fn)`, or 1 when both masks are empty.
pub fn f1(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

/// `tp / (tp + fp)`, or 1 when nothing is predicted.
pub fn precision(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp)
}

/// `tp / (tp + fn)`, or 1 when the ground truth is empty.
pub fn recall(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

/// Pixel-wise union; an empty list yields an all-background mask of `shape`.
pub fn merge_instances(masks: &[BinaryMask], shape: (usize, usize)) -> Result<BinaryMask> {
    let mut out = BinaryMask::zeros(shape.0, shape.1);
    for (i, m) in masks.iter().enumerate() {
        if (m.height, m.width) != shape {
            return Err(Error::Shape(format!(
                "instance {i} is {}x{}, expected {}x{}",
                m.height, m.width, shape.0, shape.1
            )));
        }
        for (o, &v) in out.data.iter_mut().zip(&m.data) {
            *o |= v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub id: String,
    pub iou: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: ConfusionCounts,
    pub per_image: Vec<ImageScores>,
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        Self {
            iou: iou(&counts),
            f1: f1(&counts),
            precision: precision(&counts),
            recall: recall(&counts),
            counts,
            per_image: Vec::new(),
        }
    }

    /// Micro-averaged report: counts are summed over images before scoring.
    pub fn aggregate(per_image: Vec<(String, ConfusionCounts)>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Data("cannot score an empty dataset".into()));
        }
        let total = per_image.iter().map(|(_, c)| *c).sum();
        let mut report = Self::from_counts(total);
        report.per_image = per_image
            .into_iter()
            .map(|(id, counts)| ImageScores {
                id,
                iou: iou(&counts),
                f1: f1(&counts),
                counts,
            })
            .collect();
        Ok(report)
    }

    /// Machine-readable `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let c = &self.counts;
        let mut s = String::new();
        let _ = writeln!(s, "iou={:.10}", self.iou);
        let _ = writeln!(s, "f1={:.10}", self.f1);
        let _ = writeln!(s, "precision={:.10}", self.precision);
        let _ = writeln!(s, "recall={:.10}", self.recall);
        let _ = writeln!(s, "tp={}\nfp={}\nfn={}\ntn={}", c.tp, c.fp, c.fn_, c.tn);
        let _ = writeln!(s, "images={}", self.per_image.len());
        for img in &self.per_image {
            let _ = writeln!(
                s,
                "image.{}=iou:{:.10},f1:{:.10},tp:{},fp:{},fn:{},tn:{}",
                img.id, img.iou, img.f1, img.counts.tp, img.counts.fp, img.counts.fn_, img.counts.tn
            );
        }
        s
    }

    /// Parses a report back from [`to_key_values`](Self::to_key_values).
    pub fn parse_key_values(text: &str) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            text.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| Error::Data(format!("report is missing `{key}`")))
        };
        let real = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Data(format!("report field `{key}` is not a number")))
        };
        let int = |key: &str| -> Result<u64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Data(format!("report field `{key}` is not an integer")))
        };
        let mut per_image = Vec::new();
        for line in text.lines() {
            let Some((id, fields)) = line.strip_prefix("image.").and_then(|r| r.rsplit_once('=')) else {
                continue;
            };
            let bad = || Error::Data(format!("malformed per-image line `{line}`"));
            let mut parts = std::collections::HashMap::new();
            for field in fields.split(',') {
                let (k, v) = field.split_once(':').ok_or_else(bad)?;
                parts.insert(k, v);
            }
            let real = |k: &str| parts.get(k).and_then(|v| v.parse::<f64>().ok()).ok_or_else(bad);
            let int = |k: &str| parts.get(k).and_then(|v| v.parse::<u64>().ok()).ok_or_else(bad);
            per_image.push(ImageScores {
                id: id.to_string(),
                iou: real("iou")?,
                f1: real("f1")?,
                counts: ConfusionCounts {
                    tp: int("tp")?,
                    fp: int("fp")?,
                    fn_: int("fn")?,
                    tn: int("tn")?,
                },
            });
        }
        if per_image.len() as u64 != int("images")? {
            return Err(Error::Data("report image count does not match its per-image lines".into()));
        }
        Ok(Self {
            iou: real("iou")?,
            f1: real("f1")?,
            precision: real("precision")?,
            recall: real("recall")?,
            counts: ConfusionCounts {
                tp: int("tp")?,
                fp: int("fp")?,
                fn_: int("fn")?,
                tn: int("tn")?,
            },
            per_image,
        })
    }

    /// Human-readable summary table with scores in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12}{:>10}", "metric", "value");
        let _ = writeln!(s, "{:<12}{:>10.2}", "IoU (%)", 100.0 * self.iou);
        let _ = writeln!(s, "{:<12}{:>10.2}", "F1 (%)", 100.0 * self.f1);
        let _ = writeln!(s, "{:<12}{:>10.2}", "precision", 100.0 * self.precision);
        let _ = writeln!(s, "{:<12}{:>10.2}", "recall", 100.0 * self.recall);
        let _ = writeln!(s, "{:<12}{:>10}", "images", self.per_image.len());
        s
    }

    /// Writes `metrics.txt` and `metrics_table.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let kv = dir.join("metrics.txt");
        std::fs::write(&kv, self.to_key_values()).map_err(|e| Error::io(&kv, e))?;
        let table = dir.join("metrics_table.txt");
        std::fs::write(&table, self.to_table()).map_err(|e| Error::io(&table, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8], w: usize) -> BinaryMask {
        BinaryMask::from_binary_values(bits.len() / w, w, bits).unwrap()
    }

    #[test]
    fn all_ones() {
        let m = mask(&[1; 16], 4);
        let c = confusion(&m, &m).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 16, fp: 0, fn_: 0, tn: 0 });
    }

    #[test]
    fn complement_has_no_agreement() {
        let a = mask(&[1, 0, 1, 0, 0, 1], 3);
        let b = mask(&[0, 1, 0, 1, 1, 0], 3);
        let c = confusion(&a, &b).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!(iou(&c), 0.0);
        assert_eq!(f1(&c), 0.0);
    }

    #[test]
    fn hand_counted_fixture() {
        let c = ConfusionCounts { tp: 6, fp: 2, fn_: 2, tn: 0 };
        assert_eq!(iou(&c), 0.6);
        assert_eq!(f1(&c), 0.75);
    }

    #[test]
    fn empty_masks_score_one() {
        let z = BinaryMask::zeros(3, 3);
        let c = confusion(&z, &z).unwrap();
        assert_eq!((iou(&c), f1(&c), precision(&c), recall(&c)), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn errors() {
        assert!(matches!(confusion(&BinaryMask::zeros(2, 2), &BinaryMask::zeros(2, 3)), Err(Error::Shape(_))));
        assert!(matches!(BinaryMask::from_binary_values(1, 2, &[0, 2]), Err(Error::Range(_))));
        assert!(merge_instances(&[BinaryMask::zeros(2, 2)], (3, 3)).is_err());
    }

    #[test]
    fn merge() {
        let a = mask(&[1, 0, 0, 0], 2);
        let b = mask(&[0, 0, 0, 1], 2);
        assert_eq!(merge_instances(&[a.clone(), b], (2, 2)).unwrap().count(), 2);
        assert_eq!(merge_instances(&[a.clone(), a], (2, 2)).unwrap().count(), 1);
        assert_eq!(merge_instances(&[], (4, 5)).unwrap(), BinaryMask::zeros(4, 5));
    }

    #[test]
    fn micro_average() {
        let a = ConfusionCounts { tp: 10, fp: 0, fn_: 0, tn: 6 };
        let b = ConfusionCounts { tp: 0, fp: 5, fn_: 5, tn: 6 };
        let r = MetricsReport::aggregate(vec![("a".into(), a), ("b".into(), b)]).unwrap();
        assert_eq!(r.iou, 0.5);
        assert_eq!(r.counts.total(), 32);
        let single = MetricsReport::aggregate(vec![("a".into(), b)]).unwrap();
        assert_eq!(single.iou, single.per_image[0].iou);
        assert!(MetricsReport::aggregate(vec![]).is_err());
    }

    #[test]
    fn key_values_round_trip() {
        let c = ConfusionCounts { tp: 7, fp: 3, fn_: 1, tn: 20 };
        let r = MetricsReport::aggregate(vec![("x".into(), c)]).unwrap();
        let parsed = MetricsReport::parse_key_values(&r.to_key_values()).unwrap();
        assert_eq!(parsed.counts, c);
        assert!((parsed.iou - r.iou).abs() < 1e-9);
        assert_eq!(parsed.per_image.len(), 1);
        assert_eq!(parsed.per_image[0].id, "x");
        assert_eq!(parsed.per_image[0].counts, c);
        let truncated = r.to_key_values().replace("images=1", "images=2");
        assert!(MetricsReport::parse_key_values(&truncated).is_err());
    }

    #[test]
    fn tensor_threshold() {
        let t = Tensor::new(&[[-0.5f32, 0.0], [0.1, 1.0]], &candle_core::Device::Cpu).unwrap();
        let m = BinaryMask::from_tensor(&t, 0.0).unwrap();
        assert_eq!(m.data(), &[false, false, true, true]);
    }
}
