//! Classification and detection metrics.

use crate::annotate::{read_yolo_file, AnnotateError, RectF};
use crate::Label;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Confidence cut and IoU used for the scalar precision/recall of a detection summary.
pub const DETECTION_CONFIDENCE: f64 = 0.25;
pub const DETECTION_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction/truth length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("confusion matrix is empty")]
    Empty,
    #[error("no ground-truth boxes")]
    NoGroundTruth,
    #[error("IoU threshold {0} not in (0, 1)")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Labels(#[from] AnnotateError),
}

/// Binary confusion counts with pass as the first class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp_pass: u64,
    /// Pass parts rejected (false alarm).
    pub pass_as_fail: u64,
    /// Fail parts accepted (missed defect).
    pub fail_as_pass: u64,
    pub tp_fail: u64,
}

impl ConfusionMatrix {
    pub fn new(tp_pass: u64, pass_as_fail: u64, fail_as_pass: u64, tp_fail: u64) -> Self {
        Self {
            tp_pass,
            pass_as_fail,
            fail_as_pass,
            tp_fail,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp_pass + self.pass_as_fail + self.fail_as_pass + self.tp_fail
    }

    pub fn add(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Pass, Label::Pass) => self.tp_pass += 1,
            (Label::Pass, Label::Fail) => self.pass_as_fail += 1,
            (Label::Fail, Label::Pass) => self.fail_as_pass += 1,
            (Label::Fail, Label::Fail) => self.tp_fail += 1,
        }
    }

    /// Swaps the roles of the two classes.
    pub fn relabeled(&self) -> Self {
        Self::new(self.tp_fail, self.fail_as_pass, self.pass_as_fail, self.tp_pass)
    }
}

pub fn confusion(predictions: &[Label], truths: &[Label]) -> Result<ConfusionMatrix, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch(predictions.len(), truths.len()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in predictions.iter().zip(truths) {
        cm.add(t, p);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub pass: ClassMetrics,
    pub fail: ClassMetrics,
    pub macro_avg: ClassMetrics,
    pub weighted_avg: ClassMetrics,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub total: u64,
    /// Metrics whose denominator was zero and were reported as 0.
    pub zero_division: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn report(cm: &ConfusionMatrix) -> Result<ClassificationReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let mut flags = Vec::new();
    let support_pass = cm.tp_pass + cm.pass_as_fail;
    let support_fail = cm.fail_as_pass + cm.tp_fail;
    let p_pass = ratio(cm.tp_pass, cm.tp_pass + cm.fail_as_pass, "pass.precision", &mut flags);
    let r_pass = ratio(cm.tp_pass, support_pass, "pass.recall", &mut flags);
    let p_fail = ratio(cm.tp_fail, cm.tp_fail + cm.pass_as_fail, "fail.precision", &mut flags);
    let r_fail = ratio(cm.tp_fail, support_fail, "fail.recall", &mut flags);
    let pass = ClassMetrics {
        precision: p_pass,
        recall: r_pass,
        f1: f1(p_pass, r_pass),
        support: support_pass,
    };
    let fail = ClassMetrics {
        precision: p_fail,
        recall: r_fail,
        f1: f1(p_fail, r_fail),
        support: support_fail,
    };
    let avg = |w_pass: f64, w_fail: f64| ClassMetrics {
        precision: w_pass * pass.precision + w_fail * fail.precision,
        recall: w_pass * pass.recall + w_fail * fail.recall,
        f1: w_pass * pass.f1 + w_fail * fail.f1,
        support: total,
    };
    let macro_avg = avg(0.5, 0.5);
    let weighted_avg = avg(support_pass as f64 / total as f64, support_fail as f64 / total as f64);
    let present: Vec<f64> = [(support_pass, r_pass), (support_fail, r_fail)]
        .iter()
        .filter(|(s, _)| *s > 0)
        .map(|&(_, r)| r)
        .collect();
    let balanced_accuracy = present.iter().sum::<f64>() / present.len() as f64;
    Ok(ClassificationReport {
        pass,
        fail,
        macro_avg,
        weighted_avg,
        accuracy: (cm.tp_pass + cm.tp_fail) as f64 / total as f64,
        balanced_accuracy,
        total,
        zero_division: flags,
    })
}

impl ClassificationReport {
    /// Aligned text table with per-class rows followed by the averages.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>18} {:>10} {:>10} {:>10} {:>10}", "", "precision", "recall", "f1-score", "support");
        let _ = writeln!(s);
        for (name, m) in [("pass", &self.pass), ("fail", &self.fail)] {
            let _ = writeln!(
                s,
                "{:>18} {:>10.3} {:>10.3} {:>10.3} {:>10}",
                name, m.precision, m.recall, m.f1, m.support
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>18} {:>10} {:>10} {:>10.3} {:>10}", "accuracy", "", "", self.accuracy, self.total);
        let _ = writeln!(s, "{:>18} {:>10} {:>10.3} {:>10} {:>10}", "balanced accuracy", "", self.balanced_accuracy, "", self.total);
        for (name, m) in [("macro avg", &self.macro_avg), ("weighted avg", &self.weighted_avg)] {
            let _ = writeln!(
                s,
                "{:>18} {:>10.3} {:>10.3} {:>10.3} {:>10}",
                name, m.precision, m.recall, m.f1, m.support
            );
        }
        if !self.zero_division.is_empty() {
            let _ = writeln!(s, "\nzero division (reported as 0): {}", self.zero_division.join(", "));
        }
        s
    }
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &RectF, b: &RectF) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub rect: RectF,
    pub label: Label,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub rect: RectF,
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub predictions: Vec<Detection>,
    pub ground_truths: Vec<GroundTruth>,
}

/// True-positive flags for one class's predictions in descending-confidence order.
fn match_class(det: &DetectionSet, class: Label, iou_threshold: f64, min_confidence: f64) -> (Vec<bool>, usize) {
    let gts: Vec<&GroundTruth> = det.ground_truths.iter().filter(|g| g.label == class).collect();
    let mut preds: Vec<&Detection> = det
        .predictions
        .iter()
        .filter(|p| p.label == class && p.confidence >= min_confidence)
        .collect();
    preds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut used = vec![false; gts.len()];
    let flags = preds
        .iter()
        .map(|p| {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(i, g)| !used[*i] && g.image_id == p.image_id)
                .map(|(i, g)| (i, iou(&p.rect, &g.rect)))
                .filter(|&(_, v)| v >= iou_threshold)
                .max_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((i, _)) => {
                    used[i] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (flags, gts.len())
}

/// Area under the 101-point interpolated precision/recall curve, or `None` when the
/// class has no ground truth.
pub fn average_precision(det: &DetectionSet, class: Label, iou_threshold: f64) -> Result<Option<f64>, MetricsError> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(MetricsError::InvalidThreshold(iou_threshold));
    }
    let (flags, n_gt) = match_class(det, class, iou_threshold, 0.0);
    if n_gt == 0 {
        return Ok(None);
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(flags.len());
    for (k, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // Precision envelope: running max from the high-recall end.
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        while j < curve.len() && curve[j].0 < r - 1e-12 {
            j += 1;
        }
        if j < curve.len() {
            sum += curve[j].1;
        }
    }
    Ok(Some(sum / 101.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub map50: f64,
    pub map50_95: f64,
    pub precision: f64,
    pub recall: f64,
    /// Classes without ground truth, left out of every mean.
    pub skipped_classes: Vec<Label>,
}

/// mAP at IoU 0.5, mAP averaged over IoU 0.50:0.05:0.95, and precision/recall at the
/// fixed operating point, all averaged over classes that have ground truth.
pub fn map_range(det: &DetectionSet) -> Result<DetectionSummary, MetricsError> {
    if det.ground_truths.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }
    let mut classes = Vec::new();
    let mut skipped = Vec::new();
    for class in [Label::Pass, Label::Fail] {
        if det.ground_truths.iter().any(|g| g.label == class) {
            classes.push(class);
        } else {
            skipped.push(class);
        }
    }
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let (mut map50, mut map50_95, mut precision, mut recall) = (0.0, 0.0, 0.0, 0.0);
    for &class in &classes {
        let aps: Vec<f64> = thresholds
            .iter()
            .map(|&t| average_precision(det, class, t).map(|ap| ap.unwrap_or(0.0)))
            .collect::<Result<_, _>>()?;
        map50 += aps[0];
        map50_95 += aps.iter().sum::<f64>() / aps.len() as f64;
        let (flags, n_gt) = match_class(det, class, DETECTION_IOU, DETECTION_CONFIDENCE);
        let tp = flags.iter().filter(|&&f| f).count();
        precision += if flags.is_empty() { 0.0 } else { tp as f64 / flags.len() as f64 };
        recall += tp as f64 / n_gt as f64;
    }
    let n = classes.len() as f64;
    Ok(DetectionSummary {
        map50: map50 / n,
        map50_95: map50_95 / n,
        precision: precision / n,
        recall: recall / n,
        skipped_classes: skipped,
    })
}

/// Builds a detection set from ground-truth label files and a directory of prediction
/// files named `<image_id>.txt` (missing file means no predictions for that image).
pub fn load_detection_set(
    ground_truth: &[(String, PathBuf)],
    prediction_dir: &Path,
    image_w: u32,
    image_h: u32,
) -> Result<DetectionSet, MetricsError> {
    let mut set = DetectionSet::default();
    for (id, gt_path) in ground_truth {
        for line in read_yolo_file(gt_path, image_w, image_h)? {
            set.ground_truths.push(GroundTruth {
                image_id: id.clone(),
                rect: line.rect,
                label: line.label,
            });
        }
        let pred_path = prediction_dir.join(format!("{id}.txt"));
        if pred_path.is_file() {
            for line in read_yolo_file(&pred_path, image_w, image_h)? {
                set.predictions.push(Detection {
                    image_id: id.clone(),
                    rect: line.rect,
                    label: line.label,
                    confidence: line.confidence.unwrap_or(1.0),
                });
            }
        }
    }
    Ok(set)
}
