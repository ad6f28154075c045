//! Acceptance gate. Runs the shipped default configuration end to end and prints one
//! PASS/FAIL line per criterion; exits nonzero if any criterion fails.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdg_core::annotate::{read_manifest, ManifestRecord, RectF, Split, MANIFEST_FILE};
use sdg_core::config::RunConfig;
use sdg_core::doe::enumerate_part_configs;
use sdg_core::harness::{assemble_report, CellResult, ExperimentReport, ModelCellResult, RepeatedStat, ShotGrid};
use sdg_core::learner::{adamw_step, backward, predict, train, AdamState, ModelParams, TrainConfig};
use sdg_core::metrics::{average_precision, iou, report, ConfusionMatrix, Detection, DetectionSet, GroundTruth};
use sdg_core::pipeline::{audit_annotations, with_workers, BackgroundLibrary, SyntheticJob};
use sdg_core::scene::Scene;
use sdg_core::Label;
use serde_json::Value;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

const TABLE_TOL: f64 = 0.001;
const BALANCED_ACCURACY_REF: f64 = 0.9055;
const AP_ORACLE_TOL: f64 = 1e-9;
const GRAD_REL_TOL: f64 = 1e-4;
const ADAMW_TOL: f64 = 1e-12;
const ZERO_SHOT_MIN_BA: f64 = 0.85;
const AGGREGATE_TOL: f64 = 0.0005;
const GENERATE_BUDGET_S: f64 = 60.0 * 60.0;
const GRID_BUDGET_S: f64 = 20.0 * 60.0;
const JITTER_PX: f64 = 2.0;

struct Gate {
    failed: usize,
}

impl Gate {
    fn check(&mut self, id: u32, name: &str, ok: bool, detail: String) {
        let tag = if ok { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {id}: {name}: {detail}");
        if !ok {
            self.failed += 1;
        }
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn sdg(args: &[&str]) -> (i32, f64) {
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_sdg"))
        .args(args)
        .status()
        .expect("sdg binary runs");
    (status.code().unwrap_or(-1), start.elapsed().as_secs_f64())
}

fn read_json(path: &Path) -> Value {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).expect("valid JSON")
}

fn stage<'a>(run: &'a Value, name: &str) -> Option<&'a Value> {
    run["stages"].as_array()?.iter().find(|s| s["name"] == name)
}

fn criterion_1(gate: &mut Gate, run: &Value, cfg: &RunConfig) {
    let configs = enumerate_part_configs(&cfg.doe);
    let pass_configs = configs.iter().filter(|c| c.label == Label::Pass).count();
    let fail_configs = configs.len() - pass_configs;
    let Some(g) = stage(run, "generate") else {
        gate.check(1, "dataset cardinality", false, "generate stage missing from run.json".into());
        return;
    };
    let d = &g["detail"];
    let seconds = g["seconds"].as_f64().unwrap_or(f64::INFINITY);
    let n = |k: &str| d[k].as_u64().unwrap_or(0);
    let got = (n("images"), n("pass"), n("fail"), n("part_configs"), n("composite_configs"));
    let ok = got == (12_960, 6_480, 6_480, 72, 648)
        && (pass_configs, fail_configs) == (36, 36)
        && seconds < GENERATE_BUDGET_S;
    gate.check(
        1,
        "dataset cardinality",
        ok,
        format!(
            "images {}, pass {}, fail {}, part configs {} ({pass_configs}/{fail_configs}), composite configs {}, generate {seconds:.0} s",
            got.0, got.1, got.2, got.3, got.4
        ),
    );
}

fn criterion_2(gate: &mut Gate) {
    let r = report(&ConfusionMatrix::new(267, 8, 4, 21)).expect("non-empty matrix");
    let expected = [
        ("pass precision", r.pass.precision, 0.985),
        ("pass recall", r.pass.recall, 0.971),
        ("pass f1", r.pass.f1, 0.978),
        ("fail precision", r.fail.precision, 0.724),
        ("fail recall", r.fail.recall, 0.840),
        ("fail f1", r.fail.f1, 0.778),
        ("macro precision", r.macro_avg.precision, 0.855),
        ("macro recall", r.macro_avg.recall, 0.905),
        ("macro f1", r.macro_avg.f1, 0.878),
        ("weighted f1", r.weighted_avg.f1, 0.961),
        ("accuracy", r.accuracy, 0.960),
        ("balanced accuracy", r.balanced_accuracy, BALANCED_ACCURACY_REF),
    ];
    let off: Vec<String> = expected
        .iter()
        .filter(|(_, got, want)| !close(*got, *want, TABLE_TOL))
        .map(|(n, got, want)| format!("{n} {got:.4} != {want}"))
        .collect();
    let detail = if off.is_empty() {
        format!("12 values within {TABLE_TOL}; balanced accuracy {:.4}", r.balanced_accuracy)
    } else {
        off.join(", ")
    };
    gate.check(2, "metrics oracle", off.is_empty(), detail);
}

fn yolo_line(label: Label, r: &RectF, size: f64, confidence: f64) -> String {
    format!(
        "{} {:.6} {:.6} {:.6} {:.6} {confidence}\n",
        label.class_index(),
        (r.x_min + r.x_max) / 2.0 / size,
        (r.y_min + r.y_max) / 2.0 / size,
        (r.x_max - r.x_min) / size,
        (r.y_max - r.y_min) / size
    )
}

fn write_predictions(dir: &Path, records: &[&ManifestRecord], size: f64, shift: f64) {
    fs::create_dir_all(dir).unwrap();
    for r in records {
        let rect = r.bbox.to_rect().translate(shift, shift);
        fs::write(dir.join(format!("{:05}.txt", r.plan_id)), yolo_line(r.label, &rect, size, 0.9)).unwrap();
    }
}

fn eval_detect(out: &Path, preds: &Path) -> Option<Value> {
    let (code, _) = sdg(&["eval-detect", "--out", out.to_str()?, "--predictions", preds.to_str()?]);
    (code == 0).then(|| read_json(&out.join("eval/detection.json"))["summary"].clone())
}

/// Independent AP: recompute the PR point of every ranked prefix from scratch and take
/// the precision envelope at the 101 recall levels.
fn brute_force_ap(det: &DetectionSet, class: Label, thr: f64) -> f64 {
    let gts: Vec<&GroundTruth> = det.ground_truths.iter().filter(|g| g.label == class).collect();
    let mut preds: Vec<&Detection> = det.predictions.iter().filter(|p| p.label == class).collect();
    preds.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    let mut points = Vec::new();
    for k in 1..=preds.len() {
        let mut taken = vec![false; gts.len()];
        let mut tp = 0usize;
        for p in &preds[..k] {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(i, g)| !taken[*i] && g.image_id == p.image_id)
                .map(|(i, g)| (i, iou(&p.rect, &g.rect)))
                .filter(|&(_, v)| v >= thr)
                .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                    Some((_, b)) if b >= v => acc,
                    _ => Some((i, v)),
                });
            if let Some((i, _)) = best {
                taken[i] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / k as f64));
    }
    (0..=100)
        .map(|s| {
            let level = s as f64 / 100.0;
            points
                .iter()
                .filter(|(rec, _)| *rec >= level - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

fn toy_ap_worst_error() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut det = DetectionSet::default();
        for i in 0..6 {
            let label = if rng.gen_bool(0.5) { Label::Pass } else { Label::Fail };
            let (x, y) = (rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0));
            let g = RectF {
                x_min: x,
                y_min: y,
                x_max: x + 25.0,
                y_max: y + 20.0,
            };
            det.ground_truths.push(GroundTruth {
                image_id: i.to_string(),
                rect: g,
                label,
            });
            for _ in 0..rng.gen_range(0..4) {
                det.predictions.push(Detection {
                    image_id: i.to_string(),
                    rect: g.translate(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)),
                    label: if rng.gen_bool(0.85) { label } else { label.other() },
                    confidence: rng.gen_range(0.0..1.0),
                });
            }
        }
        for class in Label::ALL {
            for thr in [0.5, 0.65, 0.8, 0.95] {
                if let Ok(Some(ap)) = average_precision(&det, class, thr) {
                    worst = worst.max((ap - brute_force_ap(&det, class, thr)).abs());
                }
            }
        }
    }
    worst
}

fn criterion_3(gate: &mut Gate, out: &Path, cfg: &RunConfig) {
    let synthetic = out.join("synthetic");
    let records = read_manifest(&synthetic.join(MANIFEST_FILE)).unwrap_or_default();
    let val: Vec<&ManifestRecord> = records.iter().filter(|r| r.split == Split::Val).collect();
    let size = cfg.scene.canvas_size as f64;
    let perfect_dir = out.join("acceptance/perfect");
    let jitter_dir = out.join("acceptance/jitter");
    write_predictions(&perfect_dir, &val, size, 0.0);
    write_predictions(&jitter_dir, &val, size, JITTER_PX);
    let perfect = eval_detect(out, &perfect_dir);
    let jitter = eval_detect(out, &jitter_dir);
    let worst = toy_ap_worst_error();
    let num = |v: &Option<Value>, k: &str| v.as_ref().and_then(|s| s[k].as_f64()).unwrap_or(f64::NAN);
    let perfect_ok = ["map50", "map50_95", "precision", "recall"].iter().all(|k| num(&perfect, k) == 1.0);
    let jitter_ok = num(&jitter, "map50") == 1.0 && num(&jitter, "map50_95") < 1.0;
    gate.check(
        3,
        "detection metrics",
        !val.is_empty() && perfect_ok && jitter_ok && worst <= AP_ORACLE_TOL,
        format!(
            "{} val images; perfect mAP50 {:.4} mAP50-95 {:.4} P {:.4} R {:.4}; {JITTER_PX} px jitter mAP50 {:.4} mAP50-95 {:.4}; toy AP worst |diff| {worst:.1e}",
            val.len(),
            num(&perfect, "map50"),
            num(&perfect, "map50_95"),
            num(&perfect, "precision"),
            num(&perfect, "recall"),
            num(&jitter, "map50"),
            num(&jitter, "map50_95"),
        ),
    );
}

fn random_params(d: usize, h: usize, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = ModelParams::zeros(d, h);
    for block in p.blocks_mut() {
        block.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    p
}

fn worst_gradient_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (d, h) = (7, 6);
    let p = random_params(d, h, &mut rng);
    let xs: Vec<Vec<f64>> = (0..6).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let ys: Vec<Label> = (0..6).map(|i| if i % 3 == 0 { Label::Pass } else { Label::Fail }).collect();
    let loss = |q: &ModelParams| backward(q, &refs, &ys).expect("valid batch").1;
    let (g, _) = backward(&p, &refs, &ys).expect("valid batch");
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    for b in 0..4 {
        for i in 0..p.blocks()[b].len() {
            let mut plus = p.clone();
            plus.blocks_mut()[b][i] += step;
            let mut minus = p.clone();
            minus.blocks_mut()[b][i] -= step;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let analytic = g.blocks()[b][i];
            let scale = analytic.abs().max(numeric.abs());
            if scale > 1e-7 {
                worst = worst.max((analytic - numeric).abs() / scale);
            }
        }
    }
    worst
}

fn criterion_4(gate: &mut Gate) {
    let grad = worst_gradient_error();

    let cfg = TrainConfig {
        learning_rate: 1e-3,
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut p = ModelParams::zeros(1, 1);
    let mut g = ModelParams::zeros(1, 1);
    g.b2[0] = 1.0;
    let mut state = AdamState::new(&p);
    adamw_step(&mut p, &g, &mut state, 1, &cfg);
    // m̂ = g and v̂ = g², so the step is lr·g/(|g| + ε).
    let adam_err = (p.b2[0] - (-1e-3 / (1.0 + 1e-8))).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..80 {
        let label = if i % 2 == 0 { Label::Pass } else { Label::Fail };
        let centre = if label == Label::Pass { 1.5 } else { -1.5 };
        xs.push((0..4).map(|_| centre + rng.gen_range(-0.5..0.5)).collect::<Vec<f64>>());
        ys.push(label);
    }
    let toy_cfg = TrainConfig {
        epochs: 20,
        hidden: 8,
        seed: 3,
        ..TrainConfig::default()
    };
    let acc = match train(&xs, &ys, &toy_cfg) {
        Ok(outcome) => {
            let right = xs
                .iter()
                .zip(&ys)
                .filter(|(x, y)| predict(&outcome.params, x).map(|(l, _)| l == **y).unwrap_or(false))
                .count();
            right as f64 / xs.len() as f64
        }
        Err(_) => 0.0,
    };
    gate.check(
        4,
        "learner numerics",
        grad < GRAD_REL_TOL && adam_err <= ADAMW_TOL && acc == 1.0,
        format!("worst gradient relative error {grad:.2e}; AdamW first-step error {adam_err:.1e}; toy train accuracy {acc:.3}"),
    );
}

fn file_hashes(root: &Path, records: &[ManifestRecord]) -> Vec<String> {
    use sdg_core::pipeline::sha256_hex;
    records
        .iter()
        .map(|r| fs::read(root.join(&r.image_path)).map(|b| sha256_hex(&b)).unwrap_or_default())
        .collect()
}

fn criterion_5(gate: &mut Gate, a: &Path, b: &Path, code_b: i32) {
    let ma = fs::read(a.join("synthetic").join(MANIFEST_FILE)).unwrap_or_default();
    let mb = fs::read(b.join("synthetic").join(MANIFEST_FILE)).unwrap_or_default();
    let ra = read_manifest(&a.join("synthetic").join(MANIFEST_FILE)).unwrap_or_default();
    let rb = read_manifest(&b.join("synthetic").join(MANIFEST_FILE)).unwrap_or_default();
    let ha = file_hashes(&a.join("synthetic"), &ra);
    let hb = file_hashes(&b.join("synthetic"), &rb);
    let recorded_match = ra.iter().zip(&ha).all(|(r, h)| &r.image_sha256 == h);
    let ok = code_b == 0 && !ma.is_empty() && ma == mb && ha == hb && recorded_match;
    gate.check(
        5,
        "determinism across worker counts",
        ok,
        format!(
            "manifests {} bytes vs {} bytes, identical: {}; {} image hashes identical: {}; on-disk hashes match manifest: {recorded_match}",
            ma.len(),
            mb.len(),
            ma == mb,
            ha.len(),
            ha == hb
        ),
    );
}

fn criterion_6(gate: &mut Gate, out: &Path, run: &Value) {
    let zero = out.join("experiment/zero_shot.json");
    let exp = out.join("experiment/experiment.json");
    let ba = zero
        .is_file()
        .then(|| read_json(&zero)["balanced_accuracy"].as_f64())
        .flatten()
        .unwrap_or(f64::NAN);
    let cell = exp
        .is_file()
        .then(|| serde_json::from_value::<ExperimentReport>(read_json(&exp)).ok())
        .flatten()
        .and_then(|r| r.cell(10, 2).cloned());
    let seconds = stage(run, "experiment").and_then(|s| s["seconds"].as_f64()).unwrap_or(f64::INFINITY);
    let (diff, reps) = cell
        .as_ref()
        .map(|c| (c.difference, c.sdg.balanced_accuracy.values.len()))
        .unwrap_or((f64::NAN, 0));
    gate.check(
        6,
        "sim-to-real proxy",
        ba >= ZERO_SHOT_MIN_BA && diff > 0.0 && reps == 5 && seconds < GRID_BUDGET_S,
        format!(
            "zero-shot balanced accuracy {ba:.4} (>= {ZERO_SHOT_MIN_BA}); cell (10, 2) SDG minus FS-Real {diff:+.4} over {reps} repetitions; experiment {seconds:.0} s"
        ),
    );
}

fn model_cell(mean: f64) -> ModelCellResult {
    ModelCellResult {
        balanced_accuracy: RepeatedStat::from_values(vec![mean]),
        confusions: Vec::new(),
    }
}

fn criterion_7(gate: &mut Gate) {
    let fs_real = [0.549, 0.574, 0.655, 0.796, 0.762];
    let sdg_means = [0.903, 0.904, 0.896, 0.909, 0.886];
    let grid = ShotGrid {
        repetitions: 1,
        ..ShotGrid::default()
    };
    let cells: Vec<CellResult> = grid
        .pass_shots
        .iter()
        .zip(fs_real.iter().zip(&sdg_means))
        .map(|(&n, (&f, &s))| CellResult {
            n_pass: n,
            n_fail: n,
            eval_sizes: Vec::new(),
            sdg: model_cell(s),
            fs_real: model_cell(f),
            difference: s - f,
        })
        .collect();
    let r = assemble_report(&grid, cells);
    let f = r.diagonal_fs_real_average.unwrap_or(f64::NAN);
    let s = r.diagonal_sdg_average.unwrap_or(f64::NAN);
    gate.check(
        7,
        "aggregation oracle",
        close(f, 0.667, AGGREGATE_TOL) && close(s, 0.900, AGGREGATE_TOL),
        format!("FS-Real average {f:.4}, SDG average {s:.4}"),
    );
}

fn criterion_8(gate: &mut Gate, out: &Path, cfg: &RunConfig) {
    let root = out.join("synthetic");
    let records = read_manifest(&root.join(MANIFEST_FILE)).unwrap_or_default();
    let scene = Scene::new(cfg.scene.clone()).expect("default scene");
    let backgrounds = BackgroundLibrary::procedural(&cfg.doe.background_ids, cfg.stream_seeds().backgrounds, cfg.scene.canvas_size);
    let job = SyntheticJob {
        doe: &cfg.doe,
        scene: &scene,
        backgrounds: &backgrounds,
        val_fraction: cfg.val_fraction,
        split_seed: cfg.stream_seeds().split,
    };
    match with_workers(0, || audit_annotations(&root, &records, &job)) {
        Ok(Ok(a)) => gate.check(
            8,
            "annotation integrity",
            !records.is_empty() && a.is_clean(),
            format!(
                "{} records; label/angle mismatches {}, non-tight boxes {}, label-file mismatches {}, hash mismatches {}, missing files {}, duplicate ids {}",
                a.manifest.records,
                a.manifest.label_mismatches.len(),
                a.non_tight_boxes.len(),
                a.label_file_mismatches.len(),
                a.hash_mismatches.len(),
                a.manifest.missing_files.len(),
                a.manifest.duplicate_plan_ids.len()
            ),
        ),
        Ok(Err(e)) => gate.check(8, "annotation integrity", false, format!("audit failed: {e}")),
        Err(e) => gate.check(8, "annotation integrity", false, format!("worker pool: {e}")),
    }
}

fn main() {
    // libtest flags such as --nocapture or a name filter are accepted and ignored.
    let tmp = tempfile::tempdir().expect("temporary directory");
    let a: PathBuf = tmp.path().join("run_a");
    let b: PathBuf = tmp.path().join("run_b");
    let cfg = RunConfig::default();
    let mut gate = Gate { failed: 0 };

    criterion_2(&mut gate);
    criterion_4(&mut gate);
    criterion_7(&mut gate);

    let (code_a, secs_a) = sdg(&["all", "--workers", "1", "--out", a.to_str().unwrap()]);
    println!("acceptance: `sdg all --workers 1` exited {code_a} after {secs_a:.0} s");
    let run_json = a.join("run.json");
    let run = if run_json.is_file() { read_json(&run_json) } else { Value::Null };
    criterion_1(&mut gate, &run, &cfg);
    criterion_6(&mut gate, &a, &run);
    criterion_3(&mut gate, &a, &cfg);
    criterion_8(&mut gate, &a, &cfg);

    let (code_b, secs_b) = sdg(&["generate", "--workers", "2", "--out", b.to_str().unwrap()]);
    println!("acceptance: `sdg generate --workers 2` exited {code_b} after {secs_b:.0} s");
    criterion_5(&mut gate, &a, &b, code_b);

    println!("acceptance: {} of 8 criteria failed", gate.failed);
    if gate.failed > 0 {
        std::process::exit(1);
    }
}
