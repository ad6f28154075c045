//! Dataset generation on disk: sprite cache, background library and the parallel,
//! order-preserving image writer.

use crate::annotate::{
    assign_splits, audit_manifest, bbox_from_mask, read_yolo_file, to_yolo_line, write_manifest, AnnotateError, Annotation, BBox, ManifestAudit,
    ManifestRecord, ManifestSummary, Split,
};
use crate::composite::{compose_plan, load_background_file, make_procedural_background, Background, CompositeError};
use crate::doe::{enumerate_composite_plans, enumerate_part_configs, CompositePlan, DoeError, DoeSpec, PartConfig};
use crate::learner::{extract_patch, LearnerError, Patch, PreprocessSpec};
use crate::mask::Mask;
use crate::mesh::classify_angle;
use crate::render::Sprite;
use crate::scene::{Scene, SceneError};
use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ImageEncoder, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Margin kept around the part when caching rendered sprites.
const SPRITE_MARGIN: u32 = 2;

/// Rounding slack when comparing a YOLO label file with its pixel box.
const LABEL_FILE_TOLERANCE_PX: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Doe(#[from] DoeError),
    #[error("part config {config_id}: {source}")]
    Render {
        config_id: u32,
        #[source]
        source: SceneError,
    },
    #[error("part config {0} rendered no visible pixels")]
    EmptyRender(u32),
    #[error(transparent)]
    Composite(#[from] CompositeError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("background id {0} is not in the library")]
    MissingBackground(u32),
    #[error("background directory {dir} has {found} images, need {needed}")]
    TooFewBackgrounds { dir: PathBuf, found: usize, needed: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Backgrounds keyed by id, all the same square size.
#[derive(Debug, Clone, Default)]
pub struct BackgroundLibrary {
    backgrounds: BTreeMap<u32, Background>,
}

impl BackgroundLibrary {
    pub fn procedural(ids: &[u32], seed: u64, size: u32) -> Self {
        let backgrounds = ids
            .par_iter()
            .map(|&id| (id, make_procedural_background(id, seed, size)))
            .collect();
        Self { backgrounds }
    }

    /// Uses the image files of `dir` in file-name order: the `k`-th listed id gets the
    /// `k`-th file.
    pub fn from_dir(dir: &Path, ids: &[u32], size: u32) -> Result<Self, PipelineError> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        if files.len() < ids.len() {
            return Err(PipelineError::TooFewBackgrounds {
                dir: dir.to_path_buf(),
                found: files.len(),
                needed: ids.len(),
            });
        }
        let mut backgrounds = BTreeMap::new();
        for (&id, path) in ids.iter().zip(&files) {
            backgrounds.insert(id, load_background_file(path, id, size)?);
        }
        Ok(Self { backgrounds })
    }

    pub fn get(&self, id: u32) -> Result<&Background, PipelineError> {
        self.backgrounds.get(&id).ok_or(PipelineError::MissingBackground(id))
    }

    pub fn ids(&self) -> Vec<u32> {
        self.backgrounds.keys().copied().collect()
    }
}

/// Renders each part configuration once, cropped to its coverage.
pub fn render_sprites(scene: &Scene, configs: &[PartConfig]) -> Result<HashMap<u32, Sprite>, PipelineError> {
    configs
        .par_iter()
        .map(|c| {
            let sprite = scene
                .render_part(c.bend_angle_deg, c.roughness, c.power_watts)
                .map_err(|source| PipelineError::Render {
                    config_id: c.config_id,
                    source,
                })?;
            let (sprite, _) = sprite
                .crop_to_coverage(SPRITE_MARGIN)
                .ok_or(PipelineError::EmptyRender(c.config_id))?;
            Ok((c.config_id, sprite))
        })
        .collect()
}

/// Deterministic PNG bytes for an RGB image.
pub fn encode_png(rgb: &RgbImage) -> Vec<u8> {
    let mut bytes = Vec::new();
    PngEncoder::new_with_quality(&mut bytes, CompressionType::Fast, FilterType::Sub)
        .write_image(rgb.as_raw(), rgb.width(), rgb.height(), image::ExtendedColorType::Rgb8)
        .expect("in-memory PNG encoding");
    bytes
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One plan that could not be turned into an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFailure {
    pub plan_id: u32,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct GenerationOutcome {
    /// Successful items in plan order.
    pub records: Vec<ManifestRecord>,
    pub failures: Vec<PlanFailure>,
}

fn write_item(root: &Path, plan: &CompositePlan, split: Split, sprite: &Sprite, background: &Background) -> Result<ManifestRecord, PipelineError> {
    let (rgb, comp) = compose_plan(plan, sprite, background)?;
    let bbox = bbox_from_mask(&comp.mask)?;
    let augment = comp.provenance.expect("compose_plan records provenance").augment;
    let png = encode_png(&rgb);
    let record = ManifestRecord::new(plan, augment, bbox, split, sha256_hex(&png));
    let image_path = root.join(&record.image_path);
    let label_path = root.join(&record.label_path);
    for dir in [image_path.parent(), label_path.parent()].into_iter().flatten() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(&image_path, &png).map_err(io_err(&image_path))?;
    let line = to_yolo_line(&Annotation::ground_truth(bbox, plan.part.label, &record.image_path), rgb.width(), rgb.height());
    fs::write(&label_path, line + "\n").map_err(io_err(&label_path))?;
    Ok(record)
}

/// Writes every plan's image and label under `root`. Runs on the current rayon pool;
/// output order and content do not depend on the pool size.
pub fn write_items(
    root: &Path,
    plans: &[CompositePlan],
    splits: &[Split],
    sprites: &HashMap<u32, Sprite>,
    backgrounds: &BackgroundLibrary,
) -> GenerationOutcome {
    let results: Vec<Result<ManifestRecord, PlanFailure>> = plans
        .par_iter()
        .zip(splits.par_iter())
        .map(|(plan, &split)| {
            let run = || -> Result<ManifestRecord, PipelineError> {
                let sprite = sprites.get(&plan.part.config_id).ok_or(PipelineError::EmptyRender(plan.part.config_id))?;
                write_item(root, plan, split, sprite, backgrounds.get(plan.background_id)?)
            };
            run().map_err(|e| PlanFailure {
                plan_id: plan.plan_id,
                error: e.to_string(),
            })
        })
        .collect();
    let mut out = GenerationOutcome::default();
    for r in results {
        match r {
            Ok(rec) => out.records.push(rec),
            Err(f) => out.failures.push(f),
        }
    }
    out
}

/// Runs `f` on a dedicated pool of `workers` threads (0 means one per core).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Inputs of a synthetic generation run.
#[derive(Debug, Clone)]
pub struct SyntheticJob<'a> {
    pub doe: &'a DoeSpec,
    pub scene: &'a Scene,
    pub backgrounds: &'a BackgroundLibrary,
    pub val_fraction: f64,
    pub split_seed: u64,
}

#[derive(Debug, Clone)]
pub struct DatasetOutput {
    pub outcome: GenerationOutcome,
    pub summary: ManifestSummary,
    pub part_configs: usize,
    pub plans: usize,
}

/// Full synthetic dataset: images, labels, `manifest.jsonl` and `summary.json`.
pub fn generate_synthetic(root: &Path, job: &SyntheticJob) -> Result<DatasetOutput, PipelineError> {
    job.doe.validate()?;
    let configs = enumerate_part_configs(job.doe);
    let plans = enumerate_composite_plans(job.doe, &configs);
    let labels: Vec<_> = plans.iter().map(|p| p.part.label).collect();
    let splits = assign_splits(&labels, job.val_fraction, job.split_seed);
    let sprites = render_sprites(job.scene, &configs)?;
    let outcome = write_items(root, &plans, &splits, &sprites, job.backgrounds);
    let summary = write_manifest(root, &outcome.records)?;
    Ok(DatasetOutput {
        outcome,
        summary,
        part_configs: configs.len(),
        plans: plans.len(),
    })
}

/// Loads each record's image and extracts its ground-truth crop.
pub fn load_patches(root: &Path, records: &[ManifestRecord], spec: &PreprocessSpec) -> Result<Vec<Patch>, PipelineError> {
    records
        .par_iter()
        .map(|r| {
            let path = root.join(&r.image_path);
            let img = image::open(&path)
                .map_err(|source| PipelineError::Image { path: path.clone(), source })?
                .to_rgb8();
            Ok(extract_patch(&img, &r.bbox, spec)?)
        })
        .collect()
}

/// Whether `bbox` is the smallest box holding every covered pixel of `mask`.
pub fn is_tight(mask: &Mask, bbox: &BBox) -> bool {
    if bbox.x_max > mask.width() || bbox.y_max > mask.height() || bbox.width() == 0 || bbox.height() == 0 {
        return false;
    }
    let inside = |x: u32, y: u32| x >= bbox.x_min && x < bbox.x_max && y >= bbox.y_min && y < bbox.y_max;
    let mut edges = [false; 4];
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if !mask.get(x, y) {
                continue;
            }
            if !inside(x, y) {
                return false;
            }
            edges[0] |= x == bbox.x_min;
            edges[1] |= x + 1 == bbox.x_max;
            edges[2] |= y == bbox.y_min;
            edges[3] |= y + 1 == bbox.y_max;
        }
    }
    edges.iter().all(|&e| e)
}

/// Result of [`audit_annotations`]; every list holds plan ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AnnotationAudit {
    pub manifest: ManifestAudit,
    pub unknown_plans: Vec<u32>,
    pub non_tight_boxes: Vec<u32>,
    pub label_file_mismatches: Vec<u32>,
    pub hash_mismatches: Vec<u32>,
}

impl AnnotationAudit {
    pub fn is_clean(&self) -> bool {
        self.manifest.is_clean()
            && self.unknown_plans.is_empty()
            && self.non_tight_boxes.is_empty()
            && self.label_file_mismatches.is_empty()
            && self.hash_mismatches.is_empty()
    }
}

/// Exhaustive check of a generated dataset. Each plan is composed again to recover its
/// coverage mask; the recorded box must be tight on it, the label file must encode the
/// same box and class, and the image file must hash to the recorded digest.
pub fn audit_annotations(root: &Path, records: &[ManifestRecord], job: &SyntheticJob) -> Result<AnnotationAudit, PipelineError> {
    let classes = job.doe.angle_classes();
    let manifest = audit_manifest(root, records, |a| classify_angle(a, &classes));
    let configs = enumerate_part_configs(job.doe);
    let plans: HashMap<u32, CompositePlan> = enumerate_composite_plans(job.doe, &configs)
        .into_iter()
        .map(|p| (p.plan_id, p))
        .collect();
    let sprites = render_sprites(job.scene, &configs)?;
    let size = job.scene.config.canvas_size;

    #[derive(Default)]
    struct Flags {
        unknown: bool,
        non_tight: bool,
        label_file: bool,
        hash: bool,
    }
    let flags: Vec<Flags> = records
        .par_iter()
        .map(|r| -> Result<Flags, PipelineError> {
            let mut f = Flags::default();
            let Some(plan) = plans.get(&r.plan_id) else {
                f.unknown = true;
                return Ok(f);
            };
            let sprite = sprites.get(&plan.part.config_id).ok_or(PipelineError::EmptyRender(plan.part.config_id))?;
            let (_, comp) = compose_plan(plan, sprite, job.backgrounds.get(plan.background_id)?)?;
            f.non_tight = !is_tight(&comp.mask, &r.bbox);
            let want = r.bbox.to_rect();
            f.label_file = match read_yolo_file(&root.join(&r.label_path), size, size) {
                Ok(lines) => !(lines.len() == 1 && lines[0].label == r.label && lines[0].label == plan.part.label && {
                    let got = lines[0].rect;
                    [got.x_min - want.x_min, got.y_min - want.y_min, got.x_max - want.x_max, got.y_max - want.y_max]
                        .iter()
                        .all(|d| d.abs() < LABEL_FILE_TOLERANCE_PX)
                }),
                Err(_) => true,
            };
            f.hash = match fs::read(root.join(&r.image_path)) {
                Ok(bytes) => sha256_hex(&bytes) != r.image_sha256,
                Err(_) => true,
            };
            Ok(f)
        })
        .collect::<Result<_, _>>()?;
    let mut audit = AnnotationAudit {
        manifest,
        ..Default::default()
    };
    for (r, f) in records.iter().zip(flags) {
        let id = r.plan_id;
        if f.unknown {
            audit.unknown_plans.push(id);
        }
        if f.non_tight {
            audit.non_tight_boxes.push(id);
        }
        if f.label_file {
            audit.label_file_mismatches.push(id);
        }
        if f.hash {
            audit.hash_mismatches.push(id);
        }
    }
    Ok(audit)
}
