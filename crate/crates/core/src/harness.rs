//! Experiment configs, single runs, sweeps and their on-disk records.
//!
//! A run directory holds `run.json` (the full [`RunRecord`]),
//! `metrics.jsonl` (logged steps plus the final evaluation, no timings) and
//! `checkpoint.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{detect, evaluate, EvalConfig, EvalReport};
use crate::mean_teacher::{build_images, Checkpoint, Dataset, StepReport, Trainer, TrainerConfig, TrainingImage};
use crate::model::ToyModel;
use crate::scenes::{generate_scene, scene_rng, split_labeled, RenderConfig, SceneConfig};

pub const RUN_RECORD: &str = "run.json";
pub const METRICS: &str = "metrics.jsonl";
pub const CHECKPOINT: &str = "checkpoint.json";

const TEST_STREAM_OFFSET: u64 = 1 << 32;

pub fn version_string() -> String {
    option_env!("SOOD_GIT_DESCRIBE")
        .map(str::to_string)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Drives scene generation, the labeled split, rendering and training.
    #[serde(default)]
    pub seed: u64,
    pub labeled_fraction: f64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default)]
    pub scenes: SceneConfig,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_run_id() -> String {
    "run".to_string()
}

fn default_log_every() -> u64 {
    50
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled_fraction must be in (0,1], got {}",
                self.labeled_fraction
            )));
        }
        if self.train_scenes == 0 || self.test_scenes == 0 {
            return Err(Error::Config("train_scenes and test_scenes must be >= 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid run_id {:?}", self.run_id)));
        }
        self.scenes.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.render.noise_sigma >= 0.0 && self.render.gain_spread >= 0.0) {
            return Err(Error::Config("render noise and gain spread must be >= 0".into()));
        }
        self.resolved().trainer.validate()?;
        self.eval.validate()
    }

    /// Copy with the top-level seed pushed into the sub-configs.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.scenes.seed = self.seed;
        c.trainer.seed = self.seed;
        c
    }

    /// Hash of the semantic content: everything except `run_id` and
    /// `out_dir`, as JSON with sorted keys.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self.resolved()).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("run_id");
            m.remove("out_dir");
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs")).join(&self.run_id)
    }
}

/// Training and held-out images for a config.
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Vec<TrainingImage>,
}

pub fn build_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let cfg = cfg.resolved();
    let sc = &cfg.scenes;
    let grid = sc.grid();
    let k = sc.num_classes;
    let gen = |offset: u64, n: usize| -> Result<Vec<_>> {
        (0..n)
            .into_par_iter()
            .map(|i| generate_scene(sc, &mut scene_rng(sc.seed, offset + i as u64)))
            .collect()
    };
    let train_scenes = gen(0, cfg.train_scenes)?;
    let test_scenes = gen(TEST_STREAM_OFFSET, cfg.test_scenes)?;
    let train = build_images(&train_scenes, grid, k, &cfg.render, cfg.seed);
    let test = build_images(&test_scenes, grid, k, &cfg.render, cfg.seed ^ TEST_STREAM_OFFSET);
    let (lab, unl) = split_labeled(train.len(), cfg.labeled_fraction, cfg.seed)?;
    Ok(ExperimentData {
        train: Dataset {
            labeled: lab.iter().map(|&i| train[i].clone()).collect(),
            unlabeled: unl.iter().map(|&i| train[i].clone()).collect(),
        },
        test,
    })
}

pub fn evaluate_model(model: &ToyModel, images: &[TrainingImage], cfg: &EvalConfig) -> Result<EvalReport> {
    let pairs = images
        .par_iter()
        .map(|img| Ok((detect(model, &img.features, cfg)?, img.scene.boxes.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate(&pairs, model.num_classes, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Every `log_every`-th step and the last one.
    pub steps: Vec<StepReport>,
    pub final_eval: EvalReport,
    pub wall_clock_s: f64,
}

#[derive(Serialize)]
struct FinalLine<'a> {
    final_eval: &'a EvalReport,
}

#[derive(Serialize)]
struct DivergenceLine<'a> {
    divergence: DivergenceInfo<'a>,
}

#[derive(Serialize)]
struct DivergenceInfo<'a> {
    iteration: u64,
    reason: &'a str,
}

fn write_metrics(path: &Path, steps: &[StepReport], tail: &impl Serialize) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for s in steps {
        let line = serde_json::to_string(s).expect("step serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    writeln!(w, "{}", serde_json::to_string(tail).expect("record serializes")).map_err(io)?;
    w.flush().map_err(io)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("record serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Burn-in, semi-supervised training and evaluation of the final teacher;
/// writes the run directory.
pub fn run(config: &ExperimentConfig) -> Result<RunRecord> {
    config.validate()?;
    let start = Instant::now();
    let cfg = config.resolved();
    let dir = config.run_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let data = build_data(&cfg)?;
    let mut trainer = Trainer::new(cfg.trainer.clone(), data.train.num_features(), cfg.scenes.num_classes)?;
    let mut steps = Vec::new();
    while !trainer.is_finished() {
        match trainer.step(&data.train) {
            Ok(r) => {
                let last = trainer.is_finished();
                if r.iteration % cfg.log_every == 0 || last {
                    log::info!(
                        "[{}] it {} loss {:.4} (sup {:.4} unsup {:.4}) pairs {}",
                        cfg.run_id,
                        r.iteration,
                        r.losses.total,
                        r.losses.sup,
                        r.losses.unsup,
                        r.num_pairs
                    );
                    steps.push(r);
                }
            }
            Err(Error::Divergence { iteration, reason }) => {
                let line = DivergenceLine {
                    divergence: DivergenceInfo {
                        iteration,
                        reason: &reason,
                    },
                };
                write_metrics(&dir.join(METRICS), &steps, &line)?;
                return Err(Error::Divergence { iteration, reason });
            }
            Err(e) => return Err(e),
        }
    }
    let final_eval = evaluate_model(&trainer.teacher, &data.test, &cfg.eval)?;
    write_metrics(&dir.join(METRICS), &steps, &FinalLine { final_eval: &final_eval })?;
    trainer.checkpoint().save(&dir.join(CHECKPOINT))?;
    let record = RunRecord {
        config_hash: config.hash(),
        version: version_string(),
        seed: cfg.seed,
        config: config.clone(),
        steps,
        final_eval,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    write_json(&dir.join(RUN_RECORD), &record)?;
    Ok(record)
}

pub fn load_record(path: &Path) -> Result<RunRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Re-evaluates the teacher stored next to a run record on freshly rebuilt
/// held-out scenes.
pub fn reevaluate(record_path: &Path) -> Result<(RunRecord, EvalReport)> {
    let record = load_record(record_path)?;
    let dir = record_path.parent().unwrap_or(Path::new("."));
    let ck = Checkpoint::load(&dir.join(CHECKPOINT))?;
    let data = build_data(&record.config)?;
    let report = evaluate_model(&ck.teacher, &data.test, &record.config.eval)?;
    Ok((record, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub name: String,
    /// Dotted config paths set together, e.g. `trainer.use_raw`.
    pub keys: Vec<String>,
    /// One entry per level, each with one value per key.
    pub values: Vec<Vec<toml::Value>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub seeds: Vec<u64>,
    #[serde(rename = "axis")]
    pub axes: Vec<SweepAxis>,
    /// Worker threads; 0 uses the rayon default.
    #[serde(default)]
    pub jobs: usize,
}

impl SweepGrid {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let g: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if g.seeds.is_empty() || g.axes.is_empty() {
            return Err(Error::Config("sweep grid needs at least one seed and one axis".into()));
        }
        for a in &g.axes {
            if a.keys.is_empty() || a.values.is_empty() {
                return Err(Error::Config(format!("axis {} has no keys or values", a.name)));
            }
            if let Some(v) = a.values.iter().find(|v| v.len() != a.keys.len()) {
                return Err(Error::Config(format!(
                    "axis {}: level {v:?} has {} values for {} keys",
                    a.name,
                    v.len(),
                    a.keys.len()
                )));
            }
        }
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

fn level_label(values: &[toml::Value]) -> String {
    values
        .iter()
        .map(|v| match v {
            toml::Value::String(s) => s.clone(),
            other => other.to_string(),
        })
        .collect::<Vec<_>>()
        .join("+")
}

fn set_path(root: &mut serde_json::Value, key: &str, value: serde_json::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("sweep key {key}: {p} is not inside a table")))?;
        if !obj.contains_key(*p) {
            return Err(Error::Config(format!("sweep key {key}: unknown field {p}")));
        }
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*p).expect("checked above");
    }
    Err(Error::Config(format!("empty sweep key {key:?}")))
}

/// One variant of a sweep: a level per axis and a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub levels: Vec<usize>,
    pub seed: u64,
    pub config: ExperimentConfig,
}

/// Expands the Cartesian product of axes and seeds into configs; every key
/// and value is checked before anything runs.
pub fn expand_sweep(base: &ExperimentConfig, grid: &SweepGrid, out_dir: &Path) -> Result<Vec<SweepRun>> {
    // Serialize with explicit nulls so optional fields are addressable.
    let base_value = serde_json::to_value(base).expect("config serializes");
    let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
    for a in &grid.axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                (0..a.values.len()).map(move |l| {
                    let mut c = c.clone();
                    c.push(l);
                    c
                })
            })
            .collect();
    }
    let mut runs = Vec::new();
    for combo in &combos {
        for &seed in &grid.seeds {
            let mut v = base_value.clone();
            let mut name = Vec::new();
            for (a, &l) in grid.axes.iter().zip(combo) {
                for (k, val) in a.keys.iter().zip(&a.values[l]) {
                    let jv = serde_json::to_value(val).map_err(|e| Error::Config(e.to_string()))?;
                    set_path(&mut v, k, jv)?;
                }
                name.push(format!("{}={}", a.name, level_label(&a.values[l])));
            }
            set_path(&mut v, "seed", seed.into())?;
            let mut cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::Config(format!("{name:?}: {e}")))?;
            cfg.run_id = format!("{}_seed{seed}", name.join("_"));
            cfg.out_dir = Some(out_dir.join("runs"));
            cfg.validate().map_err(|e| Error::Config(format!("{}: {e}", cfg.run_id)))?;
            runs.push(SweepRun {
                levels: combo.clone(),
                seed,
                config: cfg,
            });
        }
    }
    Ok(runs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub run_id: String,
    pub levels: Vec<usize>,
    pub seed: u64,
    pub map: f64,
    pub config_hash: String,
}

/// Runs every variant (reusing finished runs with a matching config hash
/// when `reuse` is set) and writes `runs.csv` plus one `axis_<name>.csv`
/// per axis under `out_dir`.
pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid, out_dir: &Path, reuse: bool) -> Result<Vec<SweepResult>> {
    let runs = expand_sweep(base, grid, out_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let work = || -> Result<Vec<SweepResult>> {
        runs.par_iter()
            .map(|r| {
                let hash = r.config.hash();
                let cached = reuse
                    .then(|| load_record(&r.config.run_dir().join(RUN_RECORD)).ok())
                    .flatten()
                    .filter(|rec| rec.config_hash == hash);
                let rec = match cached {
                    Some(rec) => rec,
                    None => run(&r.config)?,
                };
                Ok(SweepResult {
                    run_id: r.config.run_id.clone(),
                    levels: r.levels.clone(),
                    seed: r.seed,
                    map: rec.final_eval.map,
                    config_hash: hash,
                })
            })
            .collect()
    };
    let results = if grid.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(grid.jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work)?
    } else {
        work()?
    };
    write_sweep_tables(grid, &results, out_dir)?;
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisRow {
    pub level: String,
    pub runs: usize,
    pub mean_map: f64,
    pub std_map: f64,
    pub min_map: f64,
    pub max_map: f64,
}

/// Per-level mAP statistics for one axis, pooled over seeds and the other
/// axes.
pub fn axis_summary(grid: &SweepGrid, results: &[SweepResult], axis: usize) -> Vec<AxisRow> {
    let a = &grid.axes[axis];
    (0..a.values.len())
        .map(|l| {
            let maps: Vec<f64> = results.iter().filter(|r| r.levels[axis] == l).map(|r| r.map).collect();
            let n = maps.len().max(1) as f64;
            let mean = maps.iter().sum::<f64>() / n;
            let var = maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
            AxisRow {
                level: level_label(&a.values[l]),
                runs: maps.len(),
                mean_map: mean,
                std_map: var.sqrt(),
                min_map: maps.iter().copied().fold(f64::INFINITY, f64::min),
                max_map: maps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_sweep_tables(grid: &SweepGrid, results: &[SweepResult], out_dir: &Path) -> Result<()> {
    let path = out_dir.join("runs.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let mut header = vec!["run_id".to_string(), "seed".to_string()];
    header.extend(grid.axes.iter().map(|a| a.name.clone()));
    header.extend(["map".to_string(), "config_hash".to_string()]);
    w.write_record(&header).map_err(csv_err(&path))?;
    for r in results {
        let mut row = vec![r.run_id.clone(), r.seed.to_string()];
        row.extend(grid.axes.iter().zip(&r.levels).map(|(a, &l)| level_label(&a.values[l])));
        row.extend([format!("{:.6}", r.map), r.config_hash.clone()]);
        w.write_record(&row).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    for (i, a) in grid.axes.iter().enumerate() {
        let path = out_dir.join(format!("axis_{}.csv", a.name));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        w.write_record([a.name.as_str(), "runs", "mean_map", "std_map", "min_map", "max_map"])
            .map_err(csv_err(&path))?;
        for row in axis_summary(grid, results, i) {
            w.write_record([
                row.level,
                row.runs.to_string(),
                format!("{:.6}", row.mean_map),
                format!("{:.6}", row.std_map),
                format!("{:.6}", row.min_map),
                format!("{:.6}", row.max_map),
            ])
            .map_err(csv_err(&path))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Per-seed mAP for each level of one axis, keyed by seed.
pub fn paired_maps(results: &[SweepResult], axis: usize, level: usize) -> BTreeMap<u64, f64> {
    results
        .iter()
        .filter(|r| r.levels[axis] == level)
        .map(|r| (r.seed, r.map))
        .collect()
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `n` fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut c = 1.0f64;
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += c;
        }
        c = c * (n - k) as f64 / (k + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig::from_toml_str(
            r#"
            labeled_fraction = 0.5
            train_scenes = 4
            test_scenes = 2
            log_every = 2
            [scenes]
            canvas_height = 64.0
            canvas_width = 64.0
            count_min = 1
            count_max = 2
            size_min = 16.0
            size_max = 22.0
            num_classes = 2
            [trainer]
            total_iters = 6
            burn_in_iters = 2
            hidden = 4
            score_threshold = 0.01
            "#,
        )
        .unwrap()
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_toml_str("labeled_fraction = 0.1\ntrain_scenes = 2\ntest_scenes = 1\nlabled = 3\n");
        assert!(matches!(err, Err(Error::Config(_))));
        let err = ExperimentConfig::from_toml_str("labeled_fraction = 0.1\ntrain_scenes = 2\ntest_scenes = 1\n[trainer]\nalpah = 3\n");
        assert!(matches!(err, Err(Error::Config(_))));
        let err = ExperimentConfig::from_toml_str("labeled_fraction = 1.5\ntrain_scenes = 2\ntest_scenes = 1\n");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_field_order_and_naming() {
        let a = ExperimentConfig::from_toml_str("labeled_fraction = 0.1\ntrain_scenes = 2\ntest_scenes = 1\nseed = 3\n").unwrap();
        let b = ExperimentConfig::from_toml_str("seed = 3\ntest_scenes = 1\nrun_id = \"other\"\ntrain_scenes = 2\nlabeled_fraction = 0.1\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig { seed: 4, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
        // the top-level seed wins over nested ones
        let mut d = a.clone();
        d.trainer.seed = 99;
        assert_eq!(a.hash(), d.hash());
    }

    #[test]
    fn run_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.out_dir = Some(dir.path().to_path_buf());
        cfg.run_id = "a".into();
        let ra = run(&cfg).unwrap();
        cfg.run_id = "b".into();
        let rb = run(&cfg).unwrap();
        let ma = fs::read(dir.path().join("a").join(METRICS)).unwrap();
        let mb = fs::read(dir.path().join("b").join(METRICS)).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ra.final_eval, rb.final_eval);
        assert_eq!(ra.config_hash, rb.config_hash);
        let (_, again) = reevaluate(&dir.path().join("a").join(RUN_RECORD)).unwrap();
        assert_eq!(again, ra.final_eval);
    }

    #[test]
    fn full_supervision_baseline_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.out_dir = Some(dir.path().to_path_buf());
        cfg.labeled_fraction = 1.0;
        cfg.trainer.use_raw = false;
        cfg.trainer.use_gc = false;
        let rec = run(&cfg).unwrap();
        assert!(rec.steps.iter().all(|s| s.num_pairs == 0));
        assert!((0.0..=1.0).contains(&rec.final_eval.map));
    }

    #[test]
    fn sweep_expansion_and_tables() {
        let grid = SweepGrid::from_toml_str(
            r#"
            seeds = [0, 1]
            [[axis]]
            name = "variant"
            keys = ["trainer.use_raw", "trainer.use_gc"]
            values = [[false, false], [true, true]]
            [[axis]]
            name = "alpha"
            keys = ["trainer.alpha"]
            values = [[1.0], [50.0]]
            "#,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let runs = expand_sweep(&tiny_config(), &grid, dir.path()).unwrap();
        assert_eq!(runs.len(), 8);
        assert!(runs.iter().any(|r| r.config.trainer.alpha == 1.0 && r.config.trainer.use_raw && r.seed == 1));
        let ids: std::collections::BTreeSet<_> = runs.iter().map(|r| r.config.run_id.clone()).collect();
        assert_eq!(ids.len(), 8);
        let res = sweep(&tiny_config(), &grid, dir.path(), false).unwrap();
        assert_eq!(res.len(), 8);
        let alpha = fs::read_to_string(dir.path().join("axis_alpha.csv")).unwrap();
        assert_eq!(alpha.lines().count(), 3);
        assert!(alpha.starts_with("alpha,runs,mean_map"));
        assert!(dir.path().join("axis_variant.csv").exists());
        // cached rerun returns the same numbers
        let again = sweep(&tiny_config(), &grid, dir.path(), true).unwrap();
        assert_eq!(res, again);
    }

    #[test]
    fn invalid_sweep_key_rejected_before_running() {
        let grid = SweepGrid::from_toml_str("seeds = [0]\n[[axis]]\nname = \"x\"\nkeys = [\"trainer.alhpa\"]\nvalues = [[1.0]]\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(sweep(&tiny_config(), &grid, dir.path(), false), Err(Error::Config(_))));
        assert!(!dir.path().join("runs").exists());
        let bad_len = SweepGrid::from_toml_str("seeds = [0]\n[[axis]]\nname = \"x\"\nkeys = [\"a\", \"b\"]\nvalues = [[1.0]]\n");
        assert!(bad_len.is_err());
    }

    #[test]
    fn sign_test_values() {
        assert_abs_diff_eq!(sign_test_p(5, 5), 1.0 / 32.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sign_test_p(0, 5), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sign_test_p(8, 10), 56.0 / 1024.0, epsilon = 1e-15);
    }
}
