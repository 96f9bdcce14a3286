//! Gradient-matching reconstruction.
//!
//! Dummy inputs `X′` and soft labels `Y′` are optimised so that the gradient
//! they induce on the victim's weights matches the observed snapshot under a
//! chosen distance. Image pixels are clamped to `[0, 1]` after every step;
//! embeddings are left unconstrained.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distance::{distance, DistanceConfig, DistanceError, DistanceSpec};
use crate::model::{forward, soft_cross_entropy, ModelError, ModelSpec, Weights};
use crate::optim::{Eval, OptimizerKind, Optimizer, StepOutcome};
use crate::tensor::{grad, Tape, Tensor, TensorError, Var};
use crate::victim::GradientSnapshot;

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("snapshot was taken on different weights (checksum {snapshot:016x}, weights {weights:016x})")]
    Checksum { snapshot: u64, weights: u64 },
    #[error("snapshot model does not match the attacked model")]
    ModelMismatch,
    #[error("dummy batch size {dummy} differs from snapshot batch size {snapshot}")]
    BatchSize { dummy: usize, snapshot: usize },
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Distance(#[from] DistanceError),
}

impl From<TensorError> for AttackError {
    fn from(e: TensorError) -> Self {
        AttackError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, AttackError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DummyInit {
    /// i.i.d. N(0, 1), clamped into the pixel range on the image path.
    Normal,
    Constant {
        #[serde(default = "half")]
        value: f64,
    },
}

fn half() -> f64 {
    0.5
}

impl DummyInit {
    pub fn label(&self) -> &'static str {
        match self {
            DummyInit::Normal => "normal",
            DummyInit::Constant { .. } => "constant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "default_dummy")]
    pub dummy_init: DummyInit,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// Defaults to the optimizer's usual budget when absent.
    #[serde(default)]
    pub max_iters: Option<usize>,
    pub distance: DistanceConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_stop_tol")]
    pub stop_tol: f64,
}

fn default_dummy() -> DummyInit {
    DummyInit::Normal
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::adamw(1e-3)
}
fn default_log_every() -> usize {
    10
}
fn default_stop_tol() -> f64 {
    1e-10
}

impl AttackConfig {
    pub fn new(distance: DistanceConfig, optimizer: OptimizerKind, seed: u64) -> Self {
        Self {
            dummy_init: default_dummy(),
            optimizer,
            max_iters: None,
            distance,
            seed,
            log_every: default_log_every(),
            stop_tol: default_stop_tol(),
        }
    }

    pub fn with_max_iters(mut self, n: usize) -> Self {
        self.max_iters = Some(n);
        self
    }

    pub fn iterations(&self) -> usize {
        self.max_iters.unwrap_or_else(|| self.optimizer.default_max_iters())
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations() == 0 {
            return Err(AttackError::Config("max_iters must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(AttackError::Config("log_every must be at least 1".into()));
        }
        if !(self.stop_tol >= 0.0) {
            return Err(AttackError::Config("stop_tol must be non-negative".into()));
        }
        self.optimizer.validate().map_err(AttackError::Config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iter: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    /// Distance fell below `stop_tol`.
    Converged,
    /// Iteration budget exhausted.
    Completed,
    /// Stopped early on a non-finite value.
    Aborted { iter: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub x_recon: Tensor,
    pub y_recon: Tensor,
    pub predicted_label: Vec<usize>,
    pub loss_trace: Vec<TracePoint>,
    pub iters_run: usize,
    pub best_iter: usize,
    pub best_distance: f64,
    pub wall_seconds: f64,
    pub status: RunStatus,
}

/// Initial dummy values. Normal draws are clamped into `[0, 1]`.
pub fn init_dummy(shape: &[usize], mode: DummyInit, seed: u64) -> Tensor {
    match mode {
        DummyInit::Constant { value } => Tensor::full(shape.to_vec(), value),
        DummyInit::Normal => normal_tensor(shape, &mut ChaCha8Rng::seed_from_u64(seed)).map(|v| v.clamp(0.0, 1.0)),
    }
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

fn argmax_rows(y: &Tensor) -> Vec<usize> {
    let c = *y.shape().last().unwrap_or(&1);
    y.data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0
        })
        .collect()
}

/// Whether the dummy input is projected into the pixel range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputDomain {
    Pixels,
    Embedding,
}

struct Problem<'a> {
    spec: &'a ModelSpec,
    weights: &'a Weights,
    snapshot: &'a GradientSnapshot,
    dist: DistanceSpec,
    x_shape: Vec<usize>,
    y_shape: Vec<usize>,
}

impl Problem<'_> {
    fn split(&self, flat: &[f64]) -> (Tensor, Tensor) {
        let nx: usize = self.x_shape.iter().product();
        (
            Tensor::new(self.x_shape.clone(), flat[..nx].to_vec()).expect("x size"),
            Tensor::new(self.y_shape.clone(), flat[nx..].to_vec()).expect("y size"),
        )
    }

    /// Distance between the dummy gradient and the snapshot, and its
    /// gradient with respect to `(X′, Y′)` flattened.
    fn eval(&self, flat: &[f64]) -> std::result::Result<Eval, AttackError> {
        let (x, y) = self.split(flat);
        let tape = Tape::new();
        let params = self.weights.to_leaves(&tape);
        let xv = tape.leaf(x);
        let yv = tape.leaf(y);
        let logits = forward(self.spec, &params, &xv)?;
        let loss = soft_cross_entropy(&logits, &yv)?;
        let refs: Vec<&Var> = params.iter().collect();
        let dummy_grads = grad(&loss, &refs, true)?;
        let d = distance(&dummy_grads, self.snapshot, &self.dist)?;
        let g = grad(&d, &[&xv, &yv], false)?;
        let mut flat_g = g[0].value().data().to_vec();
        flat_g.extend_from_slice(g[1].value().data());
        Ok((d.item(), flat_g))
    }
}

fn check_target(spec: &ModelSpec, weights: &Weights, snapshot: &GradientSnapshot) -> Result<()> {
    if snapshot.model != *spec {
        return Err(AttackError::ModelMismatch);
    }
    let w = weights.checksum();
    if snapshot.weight_checksum != w {
        return Err(AttackError::Checksum {
            snapshot: snapshot.weight_checksum,
            weights: w,
        });
    }
    Ok(())
}

/// Reconstructs the batch behind `snapshot` from fresh seeded dummies.
pub fn run_attack(
    spec: &ModelSpec,
    weights: &Weights,
    snapshot: &GradientSnapshot,
    cfg: &AttackConfig,
) -> Result<ReconstructionResult> {
    run_attack_in(spec, weights, snapshot, cfg, InputDomain::Pixels)
}

/// Joint reconstruction of a `batch_size`-item batch; the order of the
/// recovered items is arbitrary.
pub fn run_attack_batched(
    spec: &ModelSpec,
    weights: &Weights,
    snapshot: &GradientSnapshot,
    cfg: &AttackConfig,
    batch_size: usize,
) -> Result<ReconstructionResult> {
    if batch_size != snapshot.meta.batch_size {
        return Err(AttackError::BatchSize {
            dummy: batch_size,
            snapshot: snapshot.meta.batch_size,
        });
    }
    run_attack(spec, weights, snapshot, cfg)
}

pub fn run_attack_in(
    spec: &ModelSpec,
    weights: &Weights,
    snapshot: &GradientSnapshot,
    cfg: &AttackConfig,
    domain: InputDomain,
) -> Result<ReconstructionResult> {
    let b = snapshot.meta.batch_size;
    let mut x_shape = vec![b];
    x_shape.extend_from_slice(&spec.input_shape);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x0 = match cfg.dummy_init {
        DummyInit::Constant { value } => Tensor::full(x_shape, value),
        DummyInit::Normal => {
            let raw = normal_tensor(&x_shape, &mut rng);
            match domain {
                InputDomain::Pixels => raw.map(|v| v.clamp(0.0, 1.0)),
                InputDomain::Embedding => raw,
            }
        }
    };
    let y0 = normal_tensor(&[b, spec.num_classes], &mut rng);
    run_attack_from(spec, weights, snapshot, cfg, domain, x0, y0)
}

/// Runs the optimisation from the given starting point.
pub fn run_attack_from(
    spec: &ModelSpec,
    weights: &Weights,
    snapshot: &GradientSnapshot,
    cfg: &AttackConfig,
    domain: InputDomain,
    x0: Tensor,
    y0: Tensor,
) -> Result<ReconstructionResult> {
    let start = Instant::now();
    cfg.validate()?;
    check_target(spec, weights, snapshot)?;
    let b = snapshot.meta.batch_size;
    let mut x_shape = vec![b];
    x_shape.extend_from_slice(&spec.input_shape);
    if x0.shape() != x_shape.as_slice() {
        return Err(AttackError::BatchSize {
            dummy: x0.shape().first().copied().unwrap_or(0),
            snapshot: b,
        });
    }
    if y0.shape() != [b, spec.num_classes] {
        return Err(AttackError::Config(format!(
            "label init has shape {:?}, expected [{b}, {}]",
            y0.shape(),
            spec.num_classes
        )));
    }
    let problem = Problem {
        spec,
        weights,
        snapshot,
        dist: cfg.distance.resolve(snapshot)?,
        x_shape,
        y_shape: y0.shape().to_vec(),
    };
    let nx = x0.numel();
    let clamp_pixels = domain == InputDomain::Pixels;
    let project = move |v: &mut [f64]| {
        if clamp_pixels {
            v[..nx].iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        }
    };

    let mut x: Vec<f64> = x0.into_data();
    x.extend_from_slice(y0.data());
    project(&mut x);

    let (mut f, mut g) = problem.eval(&x)?;
    let mut best = (f, x.clone(), 0usize);
    let mut trace = vec![TracePoint { iter: 0, distance: f }];
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let max_iters = cfg.iterations();
    let mut iters_run = 0;
    let mut status = RunStatus::Completed;
    let mut eval = |p: &[f64]| -> std::result::Result<Eval, AttackError> { problem.eval(p) };

    while iters_run < max_iters {
        if f < cfg.stop_tol {
            status = RunStatus::Converged;
            break;
        }
        let outcome = optimizer.step(&mut x, f, &g, &mut eval, &project);
        iters_run += 1;
        let next = match outcome {
            Ok(StepOutcome::Moved) => eval(&x),
            Ok(StepOutcome::Evaluated(e)) | Ok(StepOutcome::Fallback(e)) => Ok(e),
            Err(e) => Err(e),
        };
        match next {
            Ok((fv, gv)) if fv.is_finite() && gv.iter().all(|v| v.is_finite()) => {
                f = fv;
                g = gv;
            }
            Ok(_) => {
                status = RunStatus::Aborted {
                    iter: iters_run,
                    reason: "non-finite distance".into(),
                };
                break;
            }
            Err(AttackError::Model(ModelError::Tensor(TensorError::NonFinite { op }))) => {
                status = RunStatus::Aborted {
                    iter: iters_run,
                    reason: format!("non-finite value in {op}"),
                };
                break;
            }
            Err(e) => return Err(e),
        }
        let improved = f < best.0;
        if improved {
            best = (f, x.clone(), iters_run);
        }
        if improved || iters_run % cfg.log_every == 0 {
            trace.push(TracePoint {
                iter: iters_run,
                distance: f,
            });
        }
    }
    if status == RunStatus::Completed && best.0 < cfg.stop_tol {
        status = RunStatus::Converged;
    }

    let (x_recon, y_recon) = problem.split(&best.1);
    Ok(ReconstructionResult {
        predicted_label: argmax_rows(&y_recon),
        x_recon,
        y_recon,
        loss_trace: trace,
        iters_run,
        best_iter: best.2,
        best_distance: best.0,
        wall_seconds: start.elapsed().as_secs_f64(),
        status,
    })
}
