//! Pixel-wise cross-entropy objectives and the BCD/SCD metric suite.
//!
//! ConfusionCounts is a mergeable accumulator: workers tally privately and
//! merge, and metrics over merged tile counts equal whole-image metrics
//! exactly (integer accumulation, f64 ratios).

use ndarray::Array2;

use crate::autodiff::Tensor;
use crate::bitab::ChangeLogits;
use crate::error::{Error, Result};
use crate::ops;
use crate::raster::Mask;

/// Mean pixel-wise cross-entropy with label validation. Errors name the
/// first offending pixel coordinate.
pub fn cross_entropy_loss(logits: &Tensor, labels: &Mask) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 3 {
        return Err(Error::shape("loss expects [K, H, W] logits".to_string()));
    }
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    if (h, w) != labels.data.dim() {
        return Err(Error::shape(format!(
            "logits are {h}x{w} but labels are {:?}",
            labels.data.dim()
        )));
    }
    for ((y, x), &v) in labels.data.indexed_iter() {
        if v as usize >= k {
            return Err(Error::data(format!(
                "label {v} out of range [0, {k}) at pixel ({y}, {x})"
            )));
        }
    }
    Ok(ops::cross_entropy_mean(logits, &labels.data))
}

/// Training loss: the change term plus, for SCD, both segmentation terms
/// with unit weights.
pub fn total_loss(
    logits: &ChangeLogits,
    change_label: &Mask,
    semantic_labels: Option<(&Mask, &Mask)>,
) -> Result<Tensor> {
    let mut terms = vec![cross_entropy_loss(&logits.change, change_label)?];
    if let Some((sem1, sem2)) = &logits.semantic {
        let (l1, l2) = semantic_labels.ok_or_else(|| {
            Error::data("scd logits need semantic labels for both phases".to_string())
        })?;
        terms.push(cross_entropy_loss(sem1, l1)?);
        terms.push(cross_entropy_loss(sem2, l2)?);
    }
    Ok(ops::add_n(&terms))
}

/// TP/FP/FN/TN on the change class, plus an optional K x K semantic
/// confusion accumulated over both temporal phases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
    pub pixel_total: u64,
    pub seg_confusion: Option<Array2<u64>>,
    /// Images whose BCD denominator degenerated (no change in either map).
    pub degenerate_images: u64,
}

impl ConfusionCounts {
    pub fn new_bcd() -> ConfusionCounts {
        ConfusionCounts {
            true_pos: 0,
            false_pos: 0,
            false_neg: 0,
            true_neg: 0,
            pixel_total: 0,
            seg_confusion: None,
            degenerate_images: 0,
        }
    }

    pub fn new_scd(num_classes: usize) -> ConfusionCounts {
        ConfusionCounts {
            seg_confusion: Some(Array2::zeros((num_classes, num_classes))),
            ..ConfusionCounts::new_bcd()
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.seg_confusion.as_ref().map(|m| m.nrows())
    }

    /// Tally one binary prediction/label pair. Maps must be 0/1 valued.
    pub fn update(&mut self, pred: &Mask, label: &Mask) -> Result<()> {
        if pred.data.dim() != label.data.dim() {
            return Err(Error::shape(format!(
                "prediction {:?} and label {:?} differ in size",
                pred.data.dim(),
                label.data.dim()
            )));
        }
        let mut any_change = false;
        for (((y, x), &p), &l) in pred.data.indexed_iter().zip(label.data.iter()) {
            if p > 1 || l > 1 {
                return Err(Error::data(format!(
                    "binary map value out of range at ({y}, {x}): pred {p}, label {l}"
                )));
            }
            match (p, l) {
                (1, 1) => self.true_pos += 1,
                (1, 0) => self.false_pos += 1,
                (0, 1) => self.false_neg += 1,
                (0, 0) => self.true_neg += 1,
                _ => unreachable!(),
            }
            any_change |= p == 1 || l == 1;
            self.pixel_total += 1;
        }
        if !any_change {
            self.degenerate_images += 1;
        }
        Ok(())
    }

    /// Tally one phase's semantic prediction/label pair into the K x K
    /// confusion. Call once per temporal phase.
    pub fn update_seg(&mut self, pred: &Mask, label: &Mask) -> Result<()> {
        let k = self
            .num_classes()
            .ok_or_else(|| Error::config("update_seg on BCD-only counts"))?;
        if pred.data.dim() != label.data.dim() {
            return Err(Error::shape(format!(
                "prediction {:?} and label {:?} differ in size",
                pred.data.dim(),
                label.data.dim()
            )));
        }
        let seg = self.seg_confusion.as_mut().unwrap();
        for ((y, x), &l) in label.data.indexed_iter() {
            let p = pred.data[(y, x)];
            if p as usize >= k || l as usize >= k {
                return Err(Error::data(format!(
                    "semantic value out of range [0, {k}) at ({y}, {x}): pred {p}, label {l}"
                )));
            }
            seg[(l as usize, p as usize)] += 1;
        }
        Ok(())
    }
}

/// Elementwise sum of two accumulators.
pub fn merge_counts(a: &ConfusionCounts, b: &ConfusionCounts) -> Result<ConfusionCounts> {
    let seg_confusion = match (&a.seg_confusion, &b.seg_confusion) {
        (None, None) => None,
        (Some(x), Some(y)) => {
            if x.dim() != y.dim() {
                return Err(Error::config(format!(
                    "cannot merge confusions with {} and {} classes",
                    x.nrows(),
                    y.nrows()
                )));
            }
            Some(x + y)
        }
        _ => {
            return Err(Error::config(
                "cannot merge BCD-only counts with SCD counts",
            ))
        }
    };
    Ok(ConfusionCounts {
        true_pos: a.true_pos + b.true_pos,
        false_pos: a.false_pos + b.false_pos,
        false_neg: a.false_neg + b.false_neg,
        true_neg: a.true_neg + b.true_neg,
        pixel_total: a.pixel_total + b.pixel_total,
        seg_confusion,
        degenerate_images: a.degenerate_images + b.degenerate_images,
    })
}

/// Binary change-detection metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcdMetrics {
    pub iou_c: f64,
    pub f1_c: f64,
    pub precision_c: f64,
    pub recall_c: f64,
    pub oa: f64,
}

/// IoU^c, F1^c, Precision^c, Recall^c, OA on the change class. When
/// TP+FP+FN = 0 (no change in label or prediction anywhere) the change-class
/// ratios are defined as 1.0.
pub fn bcd_metrics(counts: &ConfusionCounts) -> Result<BcdMetrics> {
    if counts.pixel_total == 0 {
        return Err(Error::data("empty confusion counts"));
    }
    let (tp, fp, fn_, tn) = (
        counts.true_pos as f64,
        counts.false_pos as f64,
        counts.false_neg as f64,
        counts.true_neg as f64,
    );
    let change_mass = tp + fp + fn_;
    let (iou_c, f1_c, precision_c, recall_c) = if change_mass == 0.0 {
        (1.0, 1.0, 1.0, 1.0)
    } else {
        let iou = tp / change_mass;
        let f1 = 2.0 * tp / (2.0 * tp + fp + fn_);
        let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let r = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
        (iou, f1, p, r)
    };
    Ok(BcdMetrics {
        iou_c,
        f1_c,
        precision_c,
        recall_c,
        oa: (tp + tn) / (fn_ + fp + tp + tn),
    })
}

/// Semantic change-detection metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScdMetrics {
    pub iou_u: f64,
    pub miou: f64,
    pub kappa: f64,
    pub sek: f64,
    pub score: f64,
    /// Set when p_e = 1 forced kappa to 0.
    pub kappa_degenerate: bool,
}

fn kappa_of(confusion: &Array2<u64>) -> (f64, bool) {
    let total: u64 = confusion.iter().sum();
    if total == 0 {
        return (0.0, true);
    }
    let total = total as f64;
    let k = confusion.nrows();
    let p_o = (0..k).map(|i| confusion[(i, i)] as f64).sum::<f64>() / total;
    let p_e = (0..k)
        .map(|i| {
            let row: f64 = (0..k).map(|j| confusion[(i, j)] as f64).sum();
            let col: f64 = (0..k).map(|j| confusion[(j, i)] as f64).sum();
            row * col
        })
        .sum::<f64>()
        / (total * total);
    if (1.0 - p_e).abs() < f64::EPSILON {
        (0.0, true)
    } else {
        ((p_o - p_e) / (1.0 - p_e), false)
    }
}

/// mIoU, Kappa, Sek and the 0.7/0.3 weighted Score. Kappa runs over the raw
/// bi-temporal segmentation confusion; see [`scd_metrics_excluding_nochange`]
/// for the literature variant that drops the no-change diagonal entry.
pub fn scd_metrics(counts: &ConfusionCounts) -> Result<ScdMetrics> {
    let confusion = counts
        .seg_confusion
        .as_ref()
        .ok_or_else(|| Error::config("scd_metrics needs SCD counts"))?;
    let bcd = bcd_metrics(counts)?;
    let unchanged_mass =
        (counts.true_neg + counts.false_pos + counts.false_neg) as f64;
    let iou_u = if unchanged_mass == 0.0 {
        1.0
    } else {
        counts.true_neg as f64 / unchanged_mass
    };
    let miou = (iou_u + bcd.iou_c) / 2.0;
    let (kappa, kappa_degenerate) = kappa_of(confusion);
    let sek = (bcd.iou_c - 1.0).exp() * kappa;
    Ok(ScdMetrics {
        iou_u,
        miou,
        kappa,
        sek,
        score: 0.7 * sek + 0.3 * miou,
        kappa_degenerate,
    })
}

/// Variant with the class-0 (no-change) diagonal cell zeroed before kappa,
/// as in parts of the Sek literature. Not the default; no claim of
/// equivalence to the headline formulas.
pub fn scd_metrics_excluding_nochange(counts: &ConfusionCounts) -> Result<ScdMetrics> {
    let confusion = counts
        .seg_confusion
        .as_ref()
        .ok_or_else(|| Error::config("scd_metrics needs SCD counts"))?;
    let mut adjusted = confusion.clone();
    adjusted[(0, 0)] = 0;
    let mut counts = counts.clone();
    counts.seg_confusion = Some(adjusted);
    scd_metrics(&counts)
}

/// F1 from precision and recall: 2PR/(P+R).
pub fn f1_from_precision_recall(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// IoU from F1: F1/(2 - F1).
pub fn iou_from_f1(f1: f64) -> f64 {
    f1 / (2.0 - f1)
}

/// Ordered name -> value report with exact text round-tripping.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn from_bcd(m: &BcdMetrics) -> MetricReport {
        MetricReport {
            entries: vec![
                ("precision_c".into(), m.precision_c),
                ("recall_c".into(), m.recall_c),
                ("f1_c".into(), m.f1_c),
                ("iou_c".into(), m.iou_c),
                ("oa".into(), m.oa),
            ],
        }
    }

    pub fn from_scd(b: &BcdMetrics, s: &ScdMetrics) -> MetricReport {
        let mut report = MetricReport::from_bcd(b);
        report.entries.extend([
            ("iou_u".into(), s.iou_u),
            ("miou".into(), s.miou),
            ("kappa".into(), s.kappa),
            ("sek".into(), s.sek),
            ("score".into(), s.score),
        ]);
        report
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Machine-readable key/value lines; f64 Display round-trips exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, value) in &self.entries {
            out.push_str(&format!("{name} {value}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<MetricReport> {
        let mut entries = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (name, value) = line
                .split_once(' ')
                .ok_or_else(|| Error::data(format!("bad metric line: {line}")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::data(format!("bad metric value: {line}")))?;
            entries.push((name.to_string(), value));
        }
        Ok(MetricReport { entries })
    }

    /// Human table, percentages with two decimals.
    pub fn to_table(&self) -> String {
        let mut out = String::from("metric        %\n");
        for (name, value) in &self.entries {
            out.push_str(&format!("{name:<12} {:>7.2}\n", value * 100.0));
        }
        out
    }
}
