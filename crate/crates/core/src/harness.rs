//! Evaluation harness: pseudo-real holdout set, few-shot baselines and the shot grid.

use crate::annotate::{write_manifest, ManifestRecord, ManifestSummary, Split};
use crate::doe::{derive_seed, CompositePlan, DoeSpec, PartConfig};
use crate::learner::{predict_patch, train_patches, LearnerError, ModelParams, Patch, PreprocessSpec, TrainConfig};
use crate::mesh::{classify_angle, AngleClassSpec};
use crate::metrics::{confusion, report, ConfusionMatrix, MetricsError};
use crate::pipeline::{render_sprites, write_items, BackgroundLibrary, GenerationOutcome, PipelineError};
use crate::scene::Scene;
use crate::Label;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const REPORT_FILE: &str = "experiment.json";
pub const SDG_GRID_FILE: &str = "grid_sdg.csv";
pub const FS_REAL_GRID_FILE: &str = "grid_fs_real.csv";
pub const DIFF_GRID_FILE: &str = "grid_difference.csv";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("pseudo-real spec: {0}")]
    Spec(String),
    #[error("pool has {have} {label} records, {want} requested")]
    InsufficientPool { label: Label, have: usize, want: usize },
    #[error("cell (pass {n_pass}, fail {n_fail}) repetition {repetition}: {source}")]
    Cell {
        n_pass: usize,
        n_fail: usize,
        repetition: usize,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("shot grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoRealSpec {
    pub holdout_angles: Vec<f64>,
    pub roughness_levels: Vec<f64>,
    pub power_levels: Vec<f64>,
    pub background_ids: Vec<u32>,
    pub exposure_levels: Vec<f64>,
    pub pass_count: usize,
    pub fail_count: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PseudoRealSpec {
    fn default() -> Self {
        Self {
            holdout_angles: vec![-2.5, 2.5, 7.5, 17.5, 22.5, 27.5],
            roughness_levels: vec![0.3, 0.5],
            power_levels: vec![7.5, 12.5],
            background_ids: vec![3, 4],
            exposure_levels: vec![0.9, 1.1],
            pass_count: 275,
            fail_count: 25,
            seed: 0,
        }
    }
}

fn overlap<T: PartialEq + Copy>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().copied().filter(|v| b.contains(v)).collect()
}

impl PseudoRealSpec {
    /// Checks counts and that no holdout level appears in the training design.
    pub fn validate(&self, training: &DoeSpec) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Spec(m));
        if self.pass_count == 0 || self.fail_count == 0 {
            return err("pass_count and fail_count must be at least 1".into());
        }
        for (name, empty) in [
            ("holdout_angles", self.holdout_angles.is_empty()),
            ("roughness_levels", self.roughness_levels.is_empty()),
            ("power_levels", self.power_levels.is_empty()),
            ("background_ids", self.background_ids.is_empty()),
            ("exposure_levels", self.exposure_levels.is_empty()),
        ] {
            if empty {
                return err(format!("{name} must not be empty"));
            }
        }
        let train_angles: Vec<f64> = training.pass_angles.iter().chain(&training.fail_angles).copied().collect();
        let checks = [
            ("holdout_angles", overlap(&self.holdout_angles, &train_angles)),
            ("roughness_levels", overlap(&self.roughness_levels, &training.roughness_levels)),
            ("power_levels", overlap(&self.power_levels, &training.power_levels)),
            ("exposure_levels", overlap(&self.exposure_levels, &training.exposure_levels)),
        ];
        for (name, shared) in checks {
            if !shared.is_empty() {
                return err(format!("{name} overlap the training design: {shared:?}"));
            }
        }
        let shared_bg = overlap(&self.background_ids, &training.background_ids);
        if !shared_bg.is_empty() {
            return err(format!("background_ids overlap the training design: {shared_bg:?}"));
        }
        let classes = self.angle_classes(training);
        for label in [Label::Pass, Label::Fail] {
            if !self.holdout_angles.iter().any(|&a| classify_angle(a, &classes) == label) {
                return err(format!("no holdout angle falls in the {label} class"));
            }
        }
        Ok(())
    }

    fn angle_classes(&self, training: &DoeSpec) -> AngleClassSpec {
        training.angle_classes()
    }

    /// Holdout part configurations; ids continue after the training design's.
    pub fn part_configs(&self, training: &DoeSpec) -> Vec<PartConfig> {
        let classes = self.angle_classes(training);
        let offset = ((training.pass_angles.len() + training.fail_angles.len())
            * training.roughness_levels.len()
            * training.power_levels.len()) as u32;
        let mut out = Vec::new();
        for &angle in &self.holdout_angles {
            for &roughness in &self.roughness_levels {
                for &power in &self.power_levels {
                    out.push(PartConfig {
                        config_id: offset + out.len() as u32,
                        bend_angle_deg: angle,
                        roughness,
                        power_watts: power,
                        label: classify_angle(angle, &classes),
                    });
                }
            }
        }
        out
    }

    /// Exactly `pass_count` pass and `fail_count` fail plans. Each class cycles through
    /// a seeded shuffle of its (config, background, exposure) combinations; the cycle
    /// number becomes the replicate index.
    pub fn plans(&self, training: &DoeSpec) -> Vec<CompositePlan> {
        let configs = self.part_configs(training);
        let mut plans = Vec::with_capacity(self.pass_count + self.fail_count);
        for (class, count) in [(Label::Pass, self.pass_count), (Label::Fail, self.fail_count)] {
            let mut combos = Vec::new();
            for c in configs.iter().filter(|c| c.label == class) {
                for &bg in &self.background_ids {
                    for (ei, &level) in self.exposure_levels.iter().enumerate() {
                        combos.push((c, bg, ei, level));
                    }
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[class.class_index() as u64]));
            combos.shuffle(&mut rng);
            for k in 0..count {
                let (part, background_id, ei, level) = combos[k % combos.len()];
                let replicate_index = (k / combos.len()) as u32;
                plans.push(CompositePlan {
                    plan_id: plans.len() as u32,
                    part: part.clone(),
                    background_id,
                    exposure_index: ei as u32,
                    exposure_level: level,
                    replicate_index,
                    derived_seed: derive_seed(
                        self.seed,
                        &[part.config_id as u64, background_id as u64, ei as u64, replicate_index as u64],
                    ),
                });
            }
        }
        plans
    }
}

#[derive(Debug, Clone)]
pub struct PseudoRealOutput {
    pub outcome: GenerationOutcome,
    pub summary: ManifestSummary,
}

/// Renders and writes the holdout set under `root` with split `pseudo_real`.
pub fn generate_pseudo_real(
    root: &Path,
    spec: &PseudoRealSpec,
    training: &DoeSpec,
    scene: &Scene,
    backgrounds: &BackgroundLibrary,
) -> Result<PseudoRealOutput, HarnessError> {
    spec.validate(training)?;
    let configs = spec.part_configs(training);
    let plans = spec.plans(training);
    let splits = vec![Split::PseudoReal; plans.len()];
    let sprites = render_sprites(scene, &configs)?;
    let outcome = write_items(root, &plans, &splits, &sprites, backgrounds);
    let summary = write_manifest(root, &outcome.records).map_err(PipelineError::from)?;
    Ok(PseudoRealOutput { outcome, summary })
}

/// Uniform without-replacement draw of `n_pass` pass and `n_fail` fail ids. The eval
/// list is the rest of the pool in its original order.
pub fn few_shot_sample(pool: &[(u32, Label)], n_pass: usize, n_fail: usize, seed: u64) -> Result<(Vec<u32>, Vec<u32>), HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(n_pass + n_fail);
    for (label, want) in [(Label::Pass, n_pass), (Label::Fail, n_fail)] {
        let ids: Vec<u32> = pool.iter().filter(|(_, l)| *l == label).map(|(id, _)| *id).collect();
        if ids.len() < want {
            return Err(HarnessError::InsufficientPool {
                label,
                have: ids.len(),
                want,
            });
        }
        train.extend(ids.choose_multiple(&mut rng, want).copied());
    }
    let chosen: HashSet<u32> = train.iter().copied().collect();
    let eval = pool.iter().map(|(id, _)| *id).filter(|id| !chosen.contains(id)).collect();
    Ok((train, eval))
}

/// Mean and half-range `(max − min) / 2` of repeated measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatedStat {
    pub values: Vec<f64>,
    pub mean: f64,
    pub half_range: f64,
}

impl RepeatedStat {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let half_range = if values.is_empty() { 0.0 } else { (max - min) / 2.0 };
        Self { values, mean, half_range }
    }
}

/// Plain average of per-shot means, as in a summary "average" row.
pub fn average_of_means(means: &[f64]) -> f64 {
    means.iter().sum::<f64>() / means.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCellResult {
    pub balanced_accuracy: RepeatedStat,
    pub confusions: Vec<ConfusionMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub n_pass: usize,
    pub n_fail: usize,
    pub eval_sizes: Vec<usize>,
    pub sdg: ModelCellResult,
    pub fs_real: ModelCellResult,
    /// SDG mean minus FS-Real mean.
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShotGrid {
    pub pass_shots: Vec<usize>,
    pub fail_shots: Vec<usize>,
    pub repetitions: usize,
    #[serde(skip)]
    pub base_seed: u64,
}

impl Default for ShotGrid {
    fn default() -> Self {
        Self {
            pass_shots: vec![2, 4, 6, 8, 10],
            fail_shots: vec![2, 4, 6, 8, 10],
            repetitions: 5,
            base_seed: 0,
        }
    }
}

impl ShotGrid {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.pass_shots.is_empty() || self.fail_shots.is_empty() {
            return Err(HarnessError::Grid("shot lists must not be empty".into()));
        }
        if self.pass_shots.iter().chain(&self.fail_shots).any(|&s| s == 0) {
            return Err(HarnessError::Grid("shot counts must be at least 1".into()));
        }
        if self.repetitions == 0 {
            return Err(HarnessError::Grid("repetitions must be at least 1".into()));
        }
        if self.cells().is_empty() {
            return Err(HarnessError::Grid("no cell satisfies pass shots >= fail shots".into()));
        }
        Ok(())
    }

    /// Cells with pass shots ≥ fail shots, row-major over the pass list.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for &p in &self.pass_shots {
            for &f in &self.fail_shots {
                if p >= f {
                    out.push((p, f));
                }
            }
        }
        out
    }
}

/// Evaluation pool shared by every cell: pseudo-real crops, labels and the frozen SDG
/// model's predictions.
pub struct EvalPool {
    pub ids: Vec<u32>,
    pub labels: Vec<Label>,
    pub patches: Vec<Patch>,
    pub sdg_predictions: Vec<Label>,
}

impl EvalPool {
    pub fn new(records: &[ManifestRecord], patches: Vec<Patch>, sdg: &ModelParams, spec: &PreprocessSpec) -> Result<Self, HarnessError> {
        assert_eq!(records.len(), patches.len(), "one patch per record");
        let sdg_predictions = patches
            .par_iter()
            .map(|p| predict_patch(sdg, p, spec).map(|(l, _)| l))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            ids: records.iter().map(|r| r.plan_id).collect(),
            labels: records.iter().map(|r| r.label).collect(),
            patches,
            sdg_predictions,
        })
    }

    fn index_of(&self) -> std::collections::HashMap<u32, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    pub fn pairs(&self) -> Vec<(u32, Label)> {
        self.ids.iter().copied().zip(self.labels.iter().copied()).collect()
    }
}

/// Scores a constant or trained model on the eval ids.
fn score(pool: &EvalPool, eval: &[usize], predicted: impl Fn(usize) -> Result<Label, HarnessError>) -> Result<(f64, ConfusionMatrix), HarnessError> {
    let preds = eval.iter().map(|&i| predicted(i)).collect::<Result<Vec<_>, _>>()?;
    let truths: Vec<Label> = eval.iter().map(|&i| pool.labels[i]).collect();
    let cm = confusion(&preds, &truths)?;
    Ok((report(&cm)?.balanced_accuracy, cm))
}

/// One grid cell: per repetition, sample shots, train FS-Real from scratch, and score
/// both models on the same eval ids.
pub fn run_cell(
    pool: &EvalPool,
    n_pass: usize,
    n_fail: usize,
    repetitions: usize,
    base_seed: u64,
    spec: &PreprocessSpec,
    train_cfg: &TrainConfig,
) -> Result<CellResult, HarnessError> {
    let index = pool.index_of();
    let pairs = pool.pairs();
    let (mut sdg_ba, mut fs_ba, mut sdg_cm, mut fs_cm, mut sizes) = (vec![], vec![], vec![], vec![], vec![]);
    for r in 0..repetitions {
        let wrap = |e: HarnessError| HarnessError::Cell {
            n_pass,
            n_fail,
            repetition: r,
            source: Box::new(e),
        };
        let seed = derive_seed(base_seed, &[n_pass as u64, n_fail as u64, r as u64]);
        let (train_ids, eval_ids) = few_shot_sample(&pairs, n_pass, n_fail, seed).map_err(wrap)?;
        let train_idx: Vec<usize> = train_ids.iter().map(|id| index[id]).collect();
        let eval_idx: Vec<usize> = eval_ids.iter().map(|id| index[id]).collect();
        assert!(train_idx.iter().all(|i| !eval_idx.contains(i)), "few-shot train and eval ids overlap");
        let patches: Vec<Patch> = train_idx.iter().map(|&i| pool.patches[i].clone()).collect();
        let labels: Vec<Label> = train_idx.iter().map(|&i| pool.labels[i]).collect();
        let cfg = TrainConfig {
            seed: derive_seed(seed, &[1]),
            ..train_cfg.clone()
        };
        let fs_model = train_patches(&patches, &labels, spec, &cfg).map_err(|e| wrap(e.into()))?;
        let (ba, cm) = score(pool, &eval_idx, |i| Ok(pool.sdg_predictions[i])).map_err(wrap)?;
        sdg_ba.push(ba);
        sdg_cm.push(cm);
        let (ba, cm) = score(pool, &eval_idx, |i| Ok(predict_patch(&fs_model.params, &pool.patches[i], spec)?.0)).map_err(wrap)?;
        fs_ba.push(ba);
        fs_cm.push(cm);
        sizes.push(eval_idx.len());
    }
    let sdg = ModelCellResult {
        balanced_accuracy: RepeatedStat::from_values(sdg_ba),
        confusions: sdg_cm,
    };
    let fs_real = ModelCellResult {
        balanced_accuracy: RepeatedStat::from_values(fs_ba),
        confusions: fs_cm,
    };
    Ok(CellResult {
        n_pass,
        n_fail,
        eval_sizes: sizes,
        difference: sdg.balanced_accuracy.mean - fs_real.balanced_accuracy.mean,
        sdg,
        fs_real,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub pass_shots: Vec<usize>,
    pub fail_shots: Vec<usize>,
    pub repetitions: usize,
    pub cells: Vec<CellResult>,
    /// Row per pass count, column per fail count; `None` where pass < fail.
    pub sdg_means: Vec<Vec<Option<f64>>>,
    pub fs_real_means: Vec<Vec<Option<f64>>>,
    pub difference: Vec<Vec<Option<f64>>>,
    /// Balanced-diagonal summary: averages of the per-shot means over cells with
    /// pass = fail.
    pub diagonal_sdg_average: Option<f64>,
    pub diagonal_fs_real_average: Option<f64>,
}

impl ExperimentReport {
    pub fn cell(&self, n_pass: usize, n_fail: usize) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.n_pass == n_pass && c.n_fail == n_fail)
    }
}

/// Runs every valid cell (in parallel on the current pool) and assembles the grids.
pub fn run_grid(pool: &EvalPool, grid: &ShotGrid, spec: &PreprocessSpec, train_cfg: &TrainConfig) -> Result<ExperimentReport, HarnessError> {
    grid.validate()?;
    let cells = grid
        .cells()
        .par_iter()
        .map(|&(p, f)| run_cell(pool, p, f, grid.repetitions, grid.base_seed, spec, train_cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(assemble_report(grid, cells))
}

pub fn assemble_report(grid: &ShotGrid, cells: Vec<CellResult>) -> ExperimentReport {
    let lookup = |p: usize, f: usize, pick: &dyn Fn(&CellResult) -> f64| {
        cells.iter().find(|c| c.n_pass == p && c.n_fail == f).map(pick)
    };
    let build = |pick: &dyn Fn(&CellResult) -> f64| -> Vec<Vec<Option<f64>>> {
        grid.pass_shots
            .iter()
            .map(|&p| grid.fail_shots.iter().map(|&f| lookup(p, f, pick)).collect())
            .collect()
    };
    let sdg_means = build(&|c| c.sdg.balanced_accuracy.mean);
    let fs_real_means = build(&|c| c.fs_real.balanced_accuracy.mean);
    let difference = build(&|c| c.difference);
    let diag: Vec<&CellResult> = cells.iter().filter(|c| c.n_pass == c.n_fail).collect();
    let diag_avg = |pick: fn(&CellResult) -> f64| {
        (!diag.is_empty()).then(|| average_of_means(&diag.iter().map(|c| pick(c)).collect::<Vec<_>>()))
    };
    ExperimentReport {
        pass_shots: grid.pass_shots.clone(),
        fail_shots: grid.fail_shots.clone(),
        repetitions: grid.repetitions,
        diagonal_sdg_average: diag_avg(|c| c.sdg.balanced_accuracy.mean),
        diagonal_fs_real_average: diag_avg(|c| c.fs_real.balanced_accuracy.mean),
        cells,
        sdg_means,
        fs_real_means,
        difference,
    }
}

/// CSV with a header of fail-shot counts and one row per pass-shot count.
pub fn grid_csv(pass_shots: &[usize], fail_shots: &[usize], grid: &[Vec<Option<f64>>]) -> String {
    let mut s = String::from("pass\\fail");
    for f in fail_shots {
        let _ = write!(s, ",{f}");
    }
    s.push('\n');
    for (p, row) in pass_shots.iter().zip(grid) {
        let _ = write!(s, "{p}");
        for v in row {
            match v {
                Some(v) => {
                    let _ = write!(s, ",{v:.6}");
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

/// Writes the JSON report and the three CSV grids into `dir`.
pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<(), HarnessError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| HarnessError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let files = [
        (REPORT_FILE, serde_json::to_string_pretty(report).expect("report serializes") + "\n"),
        (SDG_GRID_FILE, grid_csv(&report.pass_shots, &report.fail_shots, &report.sdg_means)),
        (FS_REAL_GRID_FILE, grid_csv(&report.pass_shots, &report.fail_shots, &report.fs_real_means)),
        (DIFF_GRID_FILE, grid_csv(&report.pass_shots, &report.fail_shots, &report.difference)),
    ];
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io(&path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool_pairs() -> Vec<(u32, Label)> {
        (0..300).map(|i| (i, if i < 275 { Label::Pass } else { Label::Fail })).collect()
    }

    #[test]
    fn default_spec_is_disjoint_and_sized() {
        let doe = DoeSpec::default();
        let spec = PseudoRealSpec {
            seed: 3,
            ..Default::default()
        };
        spec.validate(&doe).unwrap();
        let plans = spec.plans(&doe);
        assert_eq!(plans.len(), 300);
        assert_eq!(plans.iter().filter(|p| p.part.label == Label::Pass).count(), 275);
        assert_eq!(plans.iter().filter(|p| p.part.label == Label::Fail).count(), 25);
        assert_eq!(plans, spec.plans(&doe));
        let classes = doe.angle_classes();
        assert!(plans.iter().all(|p| classify_angle(p.part.bend_angle_deg, &classes) == p.part.label));
        let seeds: HashSet<u64> = plans.iter().map(|p| p.derived_seed).collect();
        assert_eq!(seeds.len(), 300);
        let training_ids = (doe.pass_angles.len() + doe.fail_angles.len()) * 9;
        assert!(spec.part_configs(&doe).iter().all(|c| c.config_id as usize >= training_ids));
    }

    #[test]
    fn overlapping_levels_rejected() {
        let doe = DoeSpec::default();
        let mut spec = PseudoRealSpec::default();
        spec.holdout_angles.push(20.0);
        let e = spec.validate(&doe).unwrap_err().to_string();
        assert!(e.contains("holdout_angles") && e.contains("20"), "{e}");
        let mut spec = PseudoRealSpec::default();
        spec.background_ids = vec![2, 3];
        assert!(spec.validate(&doe).is_err());
        let mut spec = PseudoRealSpec::default();
        spec.holdout_angles = vec![2.5];
        assert!(spec.validate(&doe).unwrap_err().to_string().contains("pass class"));
    }

    #[test]
    fn few_shot_sampling_contract() {
        let pool = pool_pairs();
        let (t, e) = few_shot_sample(&pool, 0, 0, 1).unwrap();
        assert!(t.is_empty() && e.len() == 300);
        let (t, e) = few_shot_sample(&pool, 10, 10, 1).unwrap();
        assert_eq!((t.len(), e.len()), (20, 280));
        assert!(t.iter().all(|id| !e.contains(id)));
        assert_eq!(t.iter().filter(|&&id| id >= 275).count(), 10);
        assert_eq!(few_shot_sample(&pool, 10, 10, 1).unwrap(), (t.clone(), e));
        let distinct: HashSet<Vec<u32>> = (0..100).map(|s| few_shot_sample(&pool, 4, 2, s).unwrap().0).collect();
        assert!(distinct.len() >= 99);
        assert!(matches!(
            few_shot_sample(&pool, 2, 26, 0),
            Err(HarnessError::InsufficientPool { label: Label::Fail, have: 25, want: 26 })
        ));
    }

    #[test]
    fn repeated_stat_formulas() {
        let s = RepeatedStat::from_values(vec![0.5, 0.9]);
        assert!((s.mean - 0.7).abs() < 1e-12 && (s.half_range - 0.2).abs() < 1e-12);
        assert_eq!(RepeatedStat::from_values(vec![0.8; 5]).half_range, 0.0);
    }

    #[test]
    fn published_per_shot_means_aggregate() {
        let fs_real = [0.549, 0.574, 0.655, 0.796, 0.762];
        let sdg = [0.903, 0.904, 0.896, 0.909, 0.886];
        assert!((average_of_means(&fs_real) - 0.667).abs() <= 0.0005);
        assert!((average_of_means(&sdg) - 0.900).abs() <= 0.0005);
    }

    fn synthetic_pool(n_pass: usize, n_fail: usize) -> EvalPool {
        // One-pixel patches whose red channel separates the classes.
        let spec = tiny_spec();
        let mut patches = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n_pass + n_fail {
            let pass = i < n_pass;
            let v = if pass { 0.8 } else { 0.2 } + 0.001 * (i % 7) as f32;
            patches.push(Patch {
                size: spec.crop_size,
                data: vec![v, 0.5, 0.3],
            });
            labels.push(if pass { Label::Pass } else { Label::Fail });
        }
        let ids: Vec<u32> = (0..labels.len() as u32).collect();
        EvalPool {
            sdg_predictions: vec![Label::Pass; ids.len()],
            ids,
            labels,
            patches,
        }
    }

    fn tiny_spec() -> PreprocessSpec {
        PreprocessSpec {
            crop_size: 1,
            ..Default::default()
        }
    }

    #[test]
    fn cell_scores_both_models_on_same_ids() {
        let pool = synthetic_pool(44, 4);
        let cfg = TrainConfig {
            hidden: 4,
            epochs: 5,
            ..Default::default()
        };
        let cell = run_cell(&pool, 4, 2, 3, 9, &tiny_spec(), &cfg).unwrap();
        assert_eq!(cell.eval_sizes, vec![42; 3]);
        // The frozen all-pass predictor is exactly 0.5 balanced on every repetition.
        assert_eq!(cell.sdg.balanced_accuracy.values, vec![0.5; 3]);
        assert_eq!(cell.sdg.balanced_accuracy.half_range, 0.0);
        for (a, b) in cell.sdg.confusions.iter().zip(&cell.fs_real.confusions) {
            assert_eq!(a.total(), b.total());
        }
        assert_eq!(cell, run_cell(&pool, 4, 2, 3, 9, &tiny_spec(), &cfg).unwrap());
    }

    #[test]
    fn single_cell_grid_and_csv() {
        let pool = synthetic_pool(30, 6);
        let grid = ShotGrid {
            pass_shots: vec![4],
            fail_shots: vec![2],
            repetitions: 2,
            base_seed: 1,
        };
        let cfg = TrainConfig {
            hidden: 4,
            epochs: 3,
            ..Default::default()
        };
        let report = run_grid(&pool, &grid, &tiny_spec(), &cfg).unwrap();
        assert_eq!(report.cells.len(), 1);
        assert_eq!(report.difference.len(), 1);
        assert_eq!(report.difference[0].len(), 1);
        let csv = grid_csv(&report.pass_shots, &report.fail_shots, &report.difference);
        assert!(csv.starts_with("pass\\fail,2\n4,"));
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &report).unwrap();
        let back: ExperimentReport = serde_json::from_str(&fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn grid_cells_respect_pass_at_least_fail() {
        let g = ShotGrid::default();
        let cells = g.cells();
        assert_eq!(cells.len(), 15);
        assert!(cells.iter().all(|(p, f)| p >= f));
        assert!(ShotGrid {
            pass_shots: vec![2],
            fail_shots: vec![4],
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
