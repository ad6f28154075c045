//! Bounding boxes, YOLO label lines and the dataset manifest.

use crate::composite::AugmentParams;
use crate::doe::CompositePlan;
use crate::mask::Mask;
use crate::Label;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("mask has no covered pixels")]
    EmptyMask,
    #[error("invalid box [{0}, {2}) x [{1}, {3})")]
    InvalidBox(u32, u32, u32, u32),
    #[error("malformed label line {line:?}: {reason}")]
    Parse { line: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnnotateError + '_ {
    move |source| AnnotateError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Pixel box, half-open on the max edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self, AnnotateError> {
        if x_min >= x_max || y_min >= y_max {
            return Err(AnnotateError::InvalidBox(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn to_rect(&self) -> RectF {
        RectF {
            x_min: self.x_min as f64,
            y_min: self.y_min as f64,
            x_max: self.x_max as f64,
            y_max: self.y_max as f64,
        }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}) x [{}, {})", self.x_min, self.x_max, self.y_min, self.y_max)
    }
}

/// Continuous box in pixel units, used for predictions and parsed labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectF {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl RectF {
    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub bbox: BBox,
    pub label: Label,
    pub image_path: PathBuf,
    pub confidence: f64,
}

impl Annotation {
    pub fn ground_truth(bbox: BBox, label: Label, image_path: impl Into<PathBuf>) -> Self {
        Self {
            bbox,
            label,
            image_path: image_path.into(),
            confidence: 1.0,
        }
    }
}

/// Tight box over every covered pixel.
pub fn bbox_from_mask(mask: &Mask) -> Result<BBox, AnnotateError> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for (x, y) in mask.covered() {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    if x0 == u32::MAX {
        return Err(AnnotateError::EmptyMask);
    }
    BBox::new(x0, y0, x1, y1)
}

/// `"<class> <cx> <cy> <w> <h>"`, normalized to the image size with six decimals.
pub fn to_yolo_line(ann: &Annotation, image_w: u32, image_h: u32) -> String {
    let b = &ann.bbox;
    let (w, h) = (image_w as f64, image_h as f64);
    let cx = (b.x_min + b.x_max) as f64 / 2.0 / w;
    let cy = (b.y_min + b.y_max) as f64 / 2.0 / h;
    format!(
        "{} {:.6} {:.6} {:.6} {:.6}",
        ann.label.class_index(),
        cx,
        cy,
        b.width() as f64 / w,
        b.height() as f64 / h
    )
}

/// One parsed YOLO line; predictions carry a trailing confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YoloLine {
    pub label: Label,
    pub rect: RectF,
    pub confidence: Option<f64>,
}

pub fn parse_yolo_line(line: &str, image_w: u32, image_h: u32) -> Result<YoloLine, AnnotateError> {
    let bad = |reason: &str| AnnotateError::Parse {
        line: line.to_string(),
        reason: reason.to_string(),
    };
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 && fields.len() != 6 {
        return Err(bad("expected 5 or 6 fields"));
    }
    let class: usize = fields[0].parse().map_err(|_| bad("class is not an integer"))?;
    let label = Label::from_class_index(class).ok_or_else(|| bad("class index out of range"))?;
    let mut nums = [0.0f64; 5];
    for (slot, text) in nums.iter_mut().zip(&fields[1..]) {
        *slot = text.parse().map_err(|_| bad("non-numeric field"))?;
        if !slot.is_finite() {
            return Err(bad("non-finite field"));
        }
    }
    let [cx, cy, bw, bh, conf] = nums;
    if bw < 0.0 || bh < 0.0 {
        return Err(bad("negative extent"));
    }
    let confidence = if fields.len() == 6 {
        if !(0.0..=1.0).contains(&conf) {
            return Err(bad("confidence outside [0, 1]"));
        }
        Some(conf)
    } else {
        None
    };
    let (w, h) = (image_w as f64, image_h as f64);
    Ok(YoloLine {
        label,
        rect: RectF {
            x_min: (cx - bw / 2.0) * w,
            y_min: (cy - bh / 2.0) * h,
            x_max: (cx + bw / 2.0) * w,
            y_max: (cy + bh / 2.0) * h,
        },
        confidence,
    })
}

/// Reads every non-blank line of a YOLO text file.
pub fn read_yolo_file(path: &Path, image_w: u32, image_h: u32) -> Result<Vec<YoloLine>, AnnotateError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_yolo_line(l, image_w, image_h))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    PseudoReal,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::PseudoReal => "pseudo_real",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stratified split: within each label, a seeded shuffle sends `round(n · val_fraction)`
/// items to validation and the rest to training.
pub fn assign_splits(labels: &[Label], val_fraction: f64, seed: u64) -> Vec<Split> {
    let mut splits = vec![Split::Train; labels.len()];
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    for class in [Label::Pass, Label::Fail] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_val = (idx.len() as f64 * val_fraction).round() as usize;
        for &i in &idx[..n_val.min(idx.len())] {
            splits[i] = Split::Val;
        }
    }
    splits
}

/// Relative image and label paths for one dataset item.
pub fn item_paths(split: Split, label: Label, id: u32) -> (PathBuf, PathBuf) {
    let image = PathBuf::from("images")
        .join(split.as_str())
        .join(label.as_str())
        .join(format!("{id:05}.png"));
    let txt = PathBuf::from("labels")
        .join(split.as_str())
        .join(label.as_str())
        .join(format!("{id:05}.txt"));
    (image, txt)
}

/// One generated image. Field order is the serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub plan_id: u32,
    pub image_path: PathBuf,
    pub label_path: PathBuf,
    pub label: Label,
    pub bend_angle_deg: f64,
    pub roughness: f64,
    pub power_watts: f64,
    pub config_id: u32,
    pub background_id: u32,
    pub exposure_index: u32,
    pub exposure_level: f64,
    pub replicate_index: u32,
    pub augment: AugmentParams,
    pub bbox: BBox,
    pub derived_seed: u64,
    pub split: Split,
    pub image_sha256: String,
}

impl ManifestRecord {
    pub fn new(plan: &CompositePlan, augment: AugmentParams, bbox: BBox, split: Split, image_sha256: String) -> Self {
        let (image_path, label_path) = item_paths(split, plan.part.label, plan.plan_id);
        Self {
            plan_id: plan.plan_id,
            image_path,
            label_path,
            label: plan.part.label,
            bend_angle_deg: plan.part.bend_angle_deg,
            roughness: plan.part.roughness,
            power_watts: plan.part.power_watts,
            config_id: plan.part.config_id,
            background_id: plan.background_id,
            exposure_index: plan.exposure_index,
            exposure_level: plan.exposure_level,
            replicate_index: plan.replicate_index,
            augment,
            bbox,
            derived_seed: plan.derived_seed,
            split,
            image_sha256,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub total: usize,
    pub per_class: BTreeMap<String, usize>,
    pub per_split: BTreeMap<String, BTreeMap<String, usize>>,
}

impl ManifestSummary {
    pub fn from_records(records: &[ManifestRecord]) -> Self {
        let mut s = ManifestSummary {
            total: records.len(),
            ..Default::default()
        };
        for label in [Label::Pass, Label::Fail] {
            s.per_class.insert(label.as_str().into(), 0);
        }
        for r in records {
            *s.per_class.entry(r.label.as_str().into()).or_default() += 1;
            let split = s.per_split.entry(r.split.as_str().into()).or_insert_with(|| {
                [Label::Pass, Label::Fail].iter().map(|l| (l.as_str().to_string(), 0)).collect()
            });
            *split.entry(r.label.as_str().into()).or_default() += 1;
        }
        s
    }

    pub fn count(&self, label: Label) -> usize {
        self.per_class.get(label.as_str()).copied().unwrap_or(0)
    }
}

/// Writes `manifest.jsonl` (one record per line) and `summary.json` into `dir`.
pub fn write_manifest(dir: &Path, records: &[ManifestRecord]) -> Result<ManifestSummary, AnnotateError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("manifest records serialize");
        writeln!(w, "{line}").map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    let summary = ManifestSummary::from_records(records);
    let spath = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&spath, text + "\n").map_err(io_err(&spath))?;
    Ok(summary)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, AnnotateError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| AnnotateError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Problems found by [`audit_manifest`]; empty lists mean a clean dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ManifestAudit {
    pub records: usize,
    pub duplicate_plan_ids: Vec<u32>,
    pub missing_files: Vec<PathBuf>,
    pub label_mismatches: Vec<u32>,
}

impl ManifestAudit {
    pub fn is_clean(&self) -> bool {
        self.duplicate_plan_ids.is_empty() && self.missing_files.is_empty() && self.label_mismatches.is_empty()
    }
}

/// Checks plan-id uniqueness, file existence and that each label follows from its angle.
pub fn audit_manifest(root: &Path, records: &[ManifestRecord], classify: impl Fn(f64) -> Label) -> ManifestAudit {
    let mut audit = ManifestAudit {
        records: records.len(),
        ..Default::default()
    };
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.plan_id) {
            audit.duplicate_plan_ids.push(r.plan_id);
        }
        for p in [&r.image_path, &r.label_path] {
            if !root.join(p).is_file() {
                audit.missing_files.push(p.clone());
            }
        }
        if classify(r.bend_angle_deg) != r.label {
            audit.label_mismatches.push(r.plan_id);
        }
    }
    audit
}
