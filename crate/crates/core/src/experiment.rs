//! Config-driven experiment grids.
//!
//! One JSON document describes a model, a data source, the grid axes and the
//! attack settings. Every `(cell, repeat)` pair builds a victim, captures its
//! gradient, runs the attack and scores the result. Per-run artifacts go to
//! `<out>/<cell>/<repeat>/`; the aggregate `summary.csv` and `metrics.csv`
//! are written by the coordinator after all runs finish.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig, DummyInit, ReconstructionResult, RunStatus};
use crate::data::{builtin_patterns, load_image_dir, Dataset, PatternKind};
use crate::distance::{make_q_weights, DistanceConfig, DistanceKind};
use crate::metrics::{match_batch, unbatch, MetricReport};
use crate::model::{init_weights, InitScheme, ModelSpec, WeightInit};
use crate::optim::OptimizerKind;
use crate::parallel::{map_indexed, ExecMode};
use crate::pnm;
use crate::tensor::Tensor;
use crate::victim::{capture, train, TrainOptions};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config {path}: {msg}")]
    Config { path: String, msg: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        ExperimentError::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Builtin {
        #[serde(default = "all_patterns")]
        patterns: Vec<PatternKind>,
        size: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
    },
    ImageDir {
        path: PathBuf,
        num_classes: usize,
    },
}

fn all_patterns() -> Vec<PatternKind> {
    PatternKind::ALL.to_vec()
}
fn default_per_class() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitName {
    Uniform,
    XavierNormal,
}

/// A grid value given either by name (with default parameters) or in full.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitChoice {
    Name(InitName),
    Full(InitScheme),
}

impl InitChoice {
    pub fn scheme(self) -> InitScheme {
        match self {
            InitChoice::Name(InitName::Uniform) => WeightInit::uniform(0).scheme,
            InitChoice::Name(InitName::XavierNormal) => WeightInit::xavier_normal(0).scheme,
            InitChoice::Full(s) => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DistanceChoice {
    Name(DistanceKind),
    Full(DistanceConfig),
}

impl DistanceChoice {
    pub fn config(self) -> DistanceConfig {
        match self {
            DistanceChoice::Name(DistanceKind::Sapag) => DistanceConfig::sapag(),
            DistanceChoice::Name(DistanceKind::Euclidean) => DistanceConfig::euclidean(),
            DistanceChoice::Full(c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default = "default_distance")]
    pub distance: Vec<DistanceChoice>,
    #[serde(default = "default_init")]
    pub init: Vec<InitChoice>,
    #[serde(default = "default_optimizer")]
    pub optimizer: Vec<OptimizerKind>,
    #[serde(default = "default_epochs")]
    pub epochs: Vec<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: Vec<usize>,
}

fn default_distance() -> Vec<DistanceChoice> {
    vec![DistanceChoice::Name(DistanceKind::Sapag)]
}
fn default_init() -> Vec<InitChoice> {
    vec![InitChoice::Name(InitName::XavierNormal)]
}
fn default_optimizer() -> Vec<OptimizerKind> {
    vec![OptimizerKind::adamw(1e-3)]
}
fn default_epochs() -> Vec<usize> {
    vec![0]
}
fn default_batch() -> Vec<usize> {
    vec![1]
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            distance: default_distance(),
            init: default_init(),
            optimizer: default_optimizer(),
            epochs: default_epochs(),
            batch_size: default_batch(),
        }
    }
}

/// Attack settings shared by every cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSettings {
    #[serde(default = "default_dummy")]
    pub dummy_init: DummyInit,
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_stop_tol")]
    pub stop_tol: f64,
}

fn default_dummy() -> DummyInit {
    DummyInit::Normal
}
fn default_log_every() -> usize {
    10
}
fn default_stop_tol() -> f64 {
    1e-10
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            dummy_init: default_dummy(),
            max_iters: None,
            log_every: default_log_every(),
            stop_tol: default_stop_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repeat")]
    pub repeat: usize,
    pub model: ModelSpec,
    pub data: DataSource,
    #[serde(default)]
    pub grid: Grid,
    #[serde(default)]
    pub attack: AttackSettings,
    #[serde(default = "default_train_lr")]
    pub train_lr: f64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

fn default_repeat() -> usize {
    1
}
fn default_train_lr() -> f64 {
    TrainOptions::default().lr
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// One point of the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub index: usize,
    pub id: String,
    pub distance: DistanceConfig,
    pub init: InitScheme,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
}

pub fn expand_grid(grid: &Grid) -> Vec<Cell> {
    let mut cells = Vec::new();
    for d in &grid.distance {
        for i in &grid.init {
            for o in &grid.optimizer {
                for &e in &grid.epochs {
                    for &b in &grid.batch_size {
                        let index = cells.len();
                        let (d, i) = (d.config(), i.scheme());
                        cells.push(Cell {
                            id: format!(
                                "c{index:02}_{}_{}_{}_e{e}_b{b}",
                                d.distance.label(),
                                i.label(),
                                o.label()
                            ),
                            index,
                            distance: d,
                            init: i,
                            optimizer: *o,
                            epochs: e,
                            batch_size: b,
                        });
                    }
                }
            }
        }
    }
    cells
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Independent stream seed for `key` and `repeat` under `master`.
pub fn derive_seed(master: u64, key: &str, repeat: usize) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(key.as_bytes()) ^ splitmix64(repeat as u64)))
}

/// Parses a config and reports the JSON path of the first bad field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ExperimentError::config(if path == "." { "$".into() } else { path }, e.into_inner().to_string())
    })
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| ExperimentError::config(path.display().to_string(), e.to_string()))?;
    parse_config(&text)
}

fn axis_nonempty<T>(v: &[T], name: &str) -> Result<()> {
    if v.is_empty() {
        return Err(ExperimentError::config(format!("grid.{name}"), "axis must list at least one value"));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Checks everything that can be checked before any run starts.
    pub fn validate(&self) -> Result<()> {
        if self.repeat == 0 {
            return Err(ExperimentError::config("repeat", "must be at least 1"));
        }
        self.model
            .validate()
            .map_err(|e| ExperimentError::config("model", e.to_string()))?;
        if !(self.train_lr >= 0.0) {
            return Err(ExperimentError::config("train_lr", "must be non-negative"));
        }
        let g = &self.grid;
        axis_nonempty(&g.distance, "distance")?;
        axis_nonempty(&g.init, "init")?;
        axis_nonempty(&g.optimizer, "optimizer")?;
        axis_nonempty(&g.epochs, "epochs")?;
        axis_nonempty(&g.batch_size, "batch_size")?;
        for (i, d) in g.distance.iter().enumerate() {
            let d = d.config();
            if d.distance == DistanceKind::Sapag {
                make_q_weights(1, d.schedule())
                    .map_err(|e| ExperimentError::config(format!("grid.distance[{i}]"), e.to_string()))?;
            }
            if !(d.sigma_floor > 0.0) {
                return Err(ExperimentError::config(
                    format!("grid.distance[{i}].sigma_floor"),
                    "must be positive",
                ));
            }
        }
        for (i, s) in g.init.iter().enumerate() {
            WeightInit {
                scheme: s.scheme(),
                seed: 0,
            }
            .validate()
            .map_err(|e| ExperimentError::config(format!("grid.init[{i}]"), e.to_string()))?;
        }
        for (i, o) in g.optimizer.iter().enumerate() {
            o.validate()
                .map_err(|e| ExperimentError::config(format!("grid.optimizer[{i}]"), e))?;
        }
        if let Some(i) = g.batch_size.iter().position(|&b| b == 0) {
            return Err(ExperimentError::config(format!("grid.batch_size[{i}]"), "must be at least 1"));
        }
        if self.attack.max_iters == Some(0) {
            return Err(ExperimentError::config("attack.max_iters", "must be at least 1"));
        }
        if self.attack.log_every == 0 {
            return Err(ExperimentError::config("attack.log_every", "must be at least 1"));
        }
        match &self.data {
            DataSource::Builtin { patterns, size, per_class } => {
                if ![4, 8, 16].contains(size) {
                    return Err(ExperimentError::config("data.size", "must be 4, 8 or 16"));
                }
                if patterns.is_empty() || *per_class == 0 {
                    return Err(ExperimentError::config("data", "needs at least one pattern and sample"));
                }
            }
            DataSource::ImageDir { path, num_classes } => {
                if !path.is_dir() {
                    return Err(ExperimentError::config(
                        "data.path",
                        format!("{} is not a directory", path.display()),
                    ));
                }
                if *num_classes == 0 {
                    return Err(ExperimentError::config("data.num_classes", "must be at least 1"));
                }
            }
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<Dataset> {
        let data = match &self.data {
            DataSource::Builtin {
                patterns,
                size,
                per_class,
            } => builtin_patterns(patterns, *size, *per_class, derive_seed(self.seed, "data", 0)),
            DataSource::ImageDir { path, num_classes } => load_image_dir(path, *num_classes),
        }
        .map_err(|e| ExperimentError::config("data", e.to_string()))?;
        if data.item_shape() != self.model.input_shape.as_slice() {
            return Err(ExperimentError::config(
                "model.input_shape",
                format!("{:?} does not match data items {:?}", self.model.input_shape, data.item_shape()),
            ));
        }
        if data.num_classes > self.model.num_classes {
            return Err(ExperimentError::config(
                "model.num_classes",
                format!("data has {} classes", data.num_classes),
            ));
        }
        if let Some(&b) = self.grid.batch_size.iter().find(|&&b| b > data.len()) {
            return Err(ExperimentError::config(
                "grid.batch_size",
                format!("batch of {b} exceeds the {} available items", data.len()),
            ));
        }
        Ok(data)
    }
}

/// Outcome of one `(cell, repeat)` run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub cell: Cell,
    pub repeat: usize,
    pub run_id: String,
    pub status: String,
    pub iters: usize,
    pub best_distance: f64,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn failed(&self) -> bool {
        self.status != "converged" && self.status != "completed"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    pub output_dir: PathBuf,
}

impl ExperimentOutcome {
    pub fn any_failed(&self) -> bool {
        self.records.iter().any(RunRecord::failed)
    }

    /// 0 when every run finished, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.any_failed() {
            2
        } else {
            0
        }
    }
}

fn status_label(s: &RunStatus) -> &'static str {
    match s {
        RunStatus::Converged => "converged",
        RunStatus::Completed => "completed",
        RunStatus::Aborted { .. } => "aborted",
    }
}

fn fmt_f(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v}")
    }
}

fn image_of_batch(items: &[Tensor]) -> Tensor {
    if items.len() == 1 {
        items[0].clone()
    } else {
        pnm::tile_horizontal(items)
    }
}

struct RunArtifacts<'a> {
    cfg: &'a ExperimentConfig,
    cell: &'a Cell,
    repeat: usize,
    attack: &'a AttackConfig,
    indices: &'a [usize],
    labels: Vec<usize>,
    result: &'a ReconstructionResult,
    report: &'a MetricReport,
    truth: Vec<Tensor>,
}

impl RunArtifacts<'_> {
    fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        let r = self.result;
        let manifest = serde_json::json!({
            "experiment": self.cfg.name,
            "master_seed": self.cfg.seed,
            "cell": self.cell,
            "repeat": self.repeat,
            "model": self.cfg.model,
            "data": self.cfg.data,
            "train_lr": self.cfg.train_lr,
            "batch_indices": self.indices,
            "true_labels": self.labels,
            "attack": self.attack,
            "status": r.status,
            "iters_run": r.iters_run,
            "best_iter": r.best_iter,
            "best_distance": r.best_distance,
            "predicted_label": r.predicted_label,
            "metrics": self.report,
            "wall_seconds": r.wall_seconds,
        });
        fs::write(dir.join("result.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        let mut trace = String::from("iter,distance\n");
        for p in &r.loss_trace {
            let _ = writeln!(trace, "{},{}", p.iter, p.distance);
        }
        fs::write(dir.join("trace.csv"), trace)?;
        fs::write(dir.join("metrics.json"), self.report.to_json() + "\n")?;
        // reconstructions reordered to line up with the truth strip
        let recon = unbatch(&r.x_recon);
        let mut ordered = recon.clone();
        for (i, &j) in self.report.assignment.iter().enumerate() {
            ordered[j] = recon[i].clone();
        }
        let recon_img = image_of_batch(&ordered);
        let truth_img = image_of_batch(&self.truth);
        let ext = pnm::extension_for(&truth_img);
        let io = |e: pnm::PnmError| std::io::Error::other(e.to_string());
        pnm::save_image(dir.join(format!("recon.{ext}")), &recon_img).map_err(io)?;
        pnm::save_image(dir.join(format!("truth.{ext}")), &truth_img).map_err(io)?;
        Ok(())
    }
}

fn run_one(cfg: &ExperimentConfig, data: &Dataset, cell: &Cell, repeat: usize, out: &Path) -> RunRecord {
    let run_id = format!("{}/{}", cell.id, repeat);
    let mut record = RunRecord {
        cell: cell.clone(),
        repeat,
        run_id,
        status: "error".into(),
        iters: 0,
        best_distance: f64::NAN,
        report: None,
        error: None,
    };
    // The victim depends only on the initialisation and the repeat, so cells
    // that differ in distance or optimizer attack the same target.
    let victim_seed = derive_seed(cfg.seed, &format!("victim/{}", cell.init.label()), repeat);
    let attack_seed = derive_seed(cfg.seed, "attack", repeat);
    let outcome = (|| -> std::result::Result<(AttackConfig, Vec<usize>, ReconstructionResult, MetricReport), String> {
        let mut weights = init_weights(
            &cfg.model,
            &WeightInit {
                scheme: cell.init,
                seed: victim_seed,
            },
        )
        .map_err(|e| e.to_string())?;
        if cell.epochs > 0 {
            let opts = TrainOptions {
                epochs: cell.epochs,
                lr: cfg.train_lr,
                ..TrainOptions::default()
            };
            weights = train(&cfg.model, &weights, data, &opts).map_err(|e| e.to_string())?.0;
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batch", repeat)));
        let idx: Vec<usize> = order[..cell.batch_size].to_vec();
        let (x, y) = data.batch(&idx);
        let mut snapshot = capture(&cfg.model, &weights, &x, &y).map_err(|e| e.to_string())?;
        snapshot.meta.epochs = cell.epochs;
        snapshot.meta.seed = victim_seed;
        let attack = AttackConfig {
            dummy_init: cfg.attack.dummy_init,
            optimizer: cell.optimizer,
            max_iters: cfg.attack.max_iters,
            distance: cell.distance,
            seed: attack_seed,
            log_every: cfg.attack.log_every,
            stop_tol: cfg.attack.stop_tol,
        };
        let result = run_attack(&cfg.model, &weights, &snapshot, &attack).map_err(|e| e.to_string())?;
        let report = match_batch(&unbatch(&result.x_recon), &unbatch(&x)).map_err(|e| e.to_string())?;
        Ok((attack, idx, result, report))
    })();
    match outcome {
        Ok((attack, idx, result, report)) => {
            let truth: Vec<Tensor> = idx.iter().map(|&i| data.items[i].clone()).collect();
            let artifacts = RunArtifacts {
                cfg,
                cell,
                repeat,
                attack: &attack,
                indices: &idx,
                labels: idx.iter().map(|&i| data.labels[i]).collect(),
                result: &result,
                report: &report,
                truth,
            };
            record.status = status_label(&result.status).into();
            record.iters = result.iters_run;
            record.best_distance = result.best_distance;
            if let RunStatus::Aborted { iter, reason } = &result.status {
                record.error = Some(format!("iteration {iter}: {reason}"));
            }
            if let Err(e) = artifacts.write(&out.join(&cell.id).join(repeat.to_string())) {
                record.status = "error".into();
                record.error = Some(format!("writing artifacts: {e}"));
            }
            record.report = Some(report);
        }
        Err(e) => record.error = Some(e),
    }
    record
}

pub fn summary_csv(records: &[RunRecord]) -> String {
    let mut s = String::from(
        "cell_id,repeat,run_id,distance_kind,init_scheme,optimizer,epochs,batch_size,status,iters,best_distance,mse,psnr,ssim\n",
    );
    for r in records {
        let (mse, psnr, ssim) = r
            .report
            .as_ref()
            .map_or((f64::NAN, f64::NAN, f64::NAN), |m| (m.mse, m.psnr, m.ssim));
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.cell.id,
            r.repeat,
            r.run_id,
            r.cell.distance.distance.label(),
            r.cell.init.label(),
            r.cell.optimizer.label(),
            r.cell.epochs,
            r.cell.batch_size,
            r.status,
            r.iters,
            fmt_f(r.best_distance),
            fmt_f(mse),
            fmt_f(psnr),
            fmt_f(ssim)
        );
    }
    s
}

pub fn metrics_csv(records: &[RunRecord]) -> String {
    let mut s = String::from("run_id,distance_kind,init_scheme,epochs,mse,psnr,ssim\n");
    for r in records {
        if let Some(m) = &r.report {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.run_id,
                r.cell.distance.distance.label(),
                r.cell.init.label(),
                r.cell.epochs,
                fmt_f(m.mse),
                fmt_f(m.psnr),
                fmt_f(m.ssim)
            );
        }
    }
    s
}

/// Runs every `(cell, repeat)` pair and writes all artifacts under
/// `cfg.output_dir`.
pub fn run_experiment_config(cfg: &ExperimentConfig, mode: ExecMode) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = cfg.load_data()?;
    let cells = expand_grid(&cfg.grid);
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.repeat).map(move |r| (c, r)))
        .collect();
    let records = map_indexed(&jobs, mode, |_, &(c, r)| run_one(cfg, &data, &cells[c], r, &out));
    fs::write(out.join("summary.csv"), summary_csv(&records))?;
    fs::write(out.join("metrics.csv"), metrics_csv(&records))?;
    Ok(ExperimentOutcome {
        records,
        output_dir: out,
    })
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

pub fn run_experiment(config_path: impl AsRef<Path>, overrides: &Overrides, mode: ExecMode) -> Result<ExperimentOutcome> {
    let mut cfg = load_config(config_path)?;
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(o) = &overrides.output_dir {
        cfg.output_dir = o.clone();
    }
    run_experiment_config(&cfg, mode)
}
