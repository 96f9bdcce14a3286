//! Gradient-matching distances.
//!
//! The kernel distance sums, over layers `l`,
//!
//! ```text
//! Q_l · (1 − exp(−‖∇W′_l − ∇W_l‖² / σ²_l))
//! ```
//!
//! with `σ²_l` taken from the variance of the observed gradients and `Q_l`
//! a non-increasing layer weight. The Euclidean baseline is
//! `Σ_l ‖∇W′_l − ∇W_l‖²`.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError, Var};
use crate::victim::GradientSnapshot;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DistanceError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("layer mismatch: {0}")]
    Misaligned(String),
    #[error("invalid distance parameters: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DistanceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceKind {
    #[serde(rename = "sapag")]
    Sapag,
    #[serde(rename = "dlg", alias = "euclidean")]
    Euclidean,
}

impl DistanceKind {
    pub fn label(self) -> &'static str {
        match self {
            DistanceKind::Sapag => "sapag",
            DistanceKind::Euclidean => "dlg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    #[default]
    PerLayer,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QSchedule {
    Constant,
    Harmonic,
    Geometric(f64),
}

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-8;

/// Fully resolved distance: kind plus per-layer σ² and Q.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSpec {
    pub kind: DistanceKind,
    pub sigma2: Vec<f64>,
    pub q_weights: Vec<f64>,
    pub sigma_floor: f64,
}

impl DistanceSpec {
    pub fn euclidean(num_layers: usize) -> Self {
        Self {
            kind: DistanceKind::Euclidean,
            sigma2: Vec::new(),
            q_weights: vec![1.0; num_layers],
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DistanceError::Invalid(m));
        if !(self.sigma_floor > 0.0) {
            return bad(format!("sigma_floor must be positive, got {}", self.sigma_floor));
        }
        if self.q_weights.iter().any(|&q| !(q > 0.0)) {
            return bad("Q weights must be positive".into());
        }
        if self.q_weights.windows(2).any(|w| w[1] > w[0]) {
            return bad("Q weights must be non-increasing from the input side".into());
        }
        if self.kind == DistanceKind::Sapag {
            if self.sigma2.len() != self.q_weights.len() {
                return bad(format!(
                    "{} σ² values for {} Q weights",
                    self.sigma2.len(),
                    self.q_weights.len()
                ));
            }
            if self.sigma2.iter().any(|&s| !(s >= self.sigma_floor)) {
                return bad("σ² below sigma_floor".into());
            }
        }
        Ok(())
    }
}

/// Distance settings as they appear in configuration files. σ² is filled in
/// from the observed snapshot by [`DistanceConfig::resolve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceConfig {
    pub distance: DistanceKind,
    #[serde(default)]
    pub sigma_mode: SigmaMode,
    #[serde(default = "default_q")]
    pub q_schedule: QScheduleName,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_floor")]
    pub sigma_floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QScheduleName {
    Constant,
    Harmonic,
    Geometric,
}

fn default_q() -> QScheduleName {
    QScheduleName::Harmonic
}
fn default_gamma() -> f64 {
    0.5
}
fn default_floor() -> f64 {
    DEFAULT_SIGMA_FLOOR
}

impl DistanceConfig {
    pub fn sapag() -> Self {
        Self {
            distance: DistanceKind::Sapag,
            sigma_mode: SigmaMode::PerLayer,
            q_schedule: QScheduleName::Harmonic,
            gamma: 0.5,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        }
    }

    pub fn euclidean() -> Self {
        Self {
            distance: DistanceKind::Euclidean,
            ..Self::sapag()
        }
    }

    pub fn schedule(&self) -> QSchedule {
        match self.q_schedule {
            QScheduleName::Constant => QSchedule::Constant,
            QScheduleName::Harmonic => QSchedule::Harmonic,
            QScheduleName::Geometric => QSchedule::Geometric(self.gamma),
        }
    }

    /// Builds the distance for one attack target. σ² depends only on the
    /// snapshot, never on the dummy gradients.
    pub fn resolve(&self, snapshot: &GradientSnapshot) -> Result<DistanceSpec> {
        let n = snapshot.num_layers();
        let spec = match self.distance {
            DistanceKind::Euclidean => DistanceSpec {
                sigma_floor: self.sigma_floor,
                ..DistanceSpec::euclidean(n)
            },
            DistanceKind::Sapag => DistanceSpec {
                kind: DistanceKind::Sapag,
                sigma2: estimate_sigma2(snapshot, self.sigma_mode, self.sigma_floor),
                q_weights: make_q_weights(n, self.schedule())?,
                sigma_floor: self.sigma_floor,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn pop_variance(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Kernel bandwidth per layer from the population variance of the observed
/// gradients, clamped below at `floor`.
pub fn estimate_sigma2(snapshot: &GradientSnapshot, mode: SigmaMode, floor: f64) -> Vec<f64> {
    match mode {
        SigmaMode::PerLayer => snapshot
            .grads()
            .map(|g| pop_variance(g.data()).max(floor))
            .collect(),
        SigmaMode::Global => {
            let all: Vec<f64> = snapshot.grads().flat_map(|g| g.data().iter().copied()).collect();
            let v = pop_variance(&all).max(floor);
            vec![v; snapshot.num_layers()]
        }
    }
}

/// Layer weights `Q_l` for `l = 1..=n`; the first (input-side) layer always
/// has the largest weight.
pub fn make_q_weights(num_layers: usize, schedule: QSchedule) -> Result<Vec<f64>> {
    if num_layers == 0 {
        return Err(DistanceError::Invalid("need at least one layer".into()));
    }
    Ok(match schedule {
        QSchedule::Constant => vec![1.0; num_layers],
        QSchedule::Harmonic => (1..=num_layers).map(|l| 1.0 / l as f64).collect(),
        QSchedule::Geometric(g) => {
            if !(g > 0.0 && g < 1.0) {
                return Err(DistanceError::Invalid(format!("geometric γ must be in (0, 1), got {g}")));
            }
            (0..num_layers).map(|l| g.powi(l as i32)).collect()
        }
    })
}

/// Differentiable distance between dummy gradients and observed gradients.
pub fn distance_to(grads_dummy: &[Var], target: &[&Tensor], spec: &DistanceSpec) -> Result<Var> {
    if grads_dummy.len() != target.len() || grads_dummy.len() != spec.q_weights.len() {
        return Err(DistanceError::Misaligned(format!(
            "{} dummy layers, {} target layers, {} weights",
            grads_dummy.len(),
            target.len(),
            spec.q_weights.len()
        )));
    }
    let first = grads_dummy
        .first()
        .ok_or_else(|| DistanceError::Misaligned("no layers".into()))?;
    let tape = first.tape();
    let mut total: Option<Var> = None;
    for (l, (g, t)) in grads_dummy.iter().zip(target).enumerate() {
        if g.shape() != t.shape() {
            return Err(DistanceError::Misaligned(format!(
                "layer {l}: dummy {:?} vs target {:?}",
                g.shape(),
                t.shape()
            )));
        }
        let sq = g.sub(&tape.constant((*t).clone()))?.square()?.sum()?;
        let term = match spec.kind {
            DistanceKind::Euclidean => sq,
            DistanceKind::Sapag => sq
                .mul_scalar(-1.0 / spec.sigma2[l])?
                .exp()?
                .neg()?
                .add_scalar(1.0)?
                .mul_scalar(spec.q_weights[l])?,
        };
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.expect("at least one layer"))
}

pub fn distance(grads_dummy: &[Var], snapshot: &GradientSnapshot, spec: &DistanceSpec) -> Result<Var> {
    let target: Vec<&Tensor> = snapshot.grads().collect();
    distance_to(grads_dummy, &target, spec)
}

/// Closed-form `∂D/∂∇W′` for one layer: `2Q·(Δ/σ²)·exp(−‖Δ‖²/σ²)`.
pub fn analytic_first_derivative(delta: &Tensor, q: f64, sigma2: f64) -> Tensor {
    let k = (-delta.data().iter().map(|d| d * d).sum::<f64>() / sigma2).exp();
    delta.map(|d| 2.0 * q * d / sigma2 * k)
}

/// Diagonal of the Hessian of one layer's kernel term:
/// `2Q·(σ² − 2Δ_i²)/σ⁴ · exp(−‖Δ‖²/σ²)`.
///
/// For a scalar layer this vanishes at `Δ² = σ²/2`, where `|∂D/∂∇W′|` peaks.
pub fn analytic_second_derivative(delta: &Tensor, q: f64, sigma2: f64) -> Tensor {
    let k = (-delta.data().iter().map(|d| d * d).sum::<f64>() / sigma2).exp();
    delta.map(|d| 2.0 * q * (sigma2 - 2.0 * d * d) / (sigma2 * sigma2) * k)
}
