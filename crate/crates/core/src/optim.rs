//! First-order optimizers over a flat parameter vector.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam {
        #[serde(default = "adam_lr")]
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "eps")]
        eps: f64,
    },
    Adamw {
        #[serde(default = "adam_lr")]
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "eps")]
        eps: f64,
        #[serde(default = "weight_decay")]
        weight_decay: f64,
    },
    LbfgsLite {
        #[serde(default = "lbfgs_lr")]
        lr: f64,
        #[serde(default = "history")]
        history: usize,
        #[serde(default = "max_halvings")]
        max_halvings: usize,
    },
}

fn adam_lr() -> f64 {
    1e-3
}
fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}
fn weight_decay() -> f64 {
    0.01
}
fn lbfgs_lr() -> f64 {
    1.0
}
fn history() -> usize {
    20
}
fn max_halvings() -> usize {
    20
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: eps(),
        }
    }

    pub fn adamw(lr: f64) -> Self {
        OptimizerKind::Adamw {
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: eps(),
            weight_decay: weight_decay(),
        }
    }

    pub fn lbfgs_lite() -> Self {
        OptimizerKind::LbfgsLite {
            lr: lbfgs_lr(),
            history: history(),
            max_halvings: max_halvings(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::Adamw { .. } => "adamw",
            OptimizerKind::LbfgsLite { .. } => "lbfgs_lite",
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Adam { lr, .. } | OptimizerKind::Adamw { lr, .. } | OptimizerKind::LbfgsLite { lr, .. } => lr,
        }
    }

    pub fn default_max_iters(&self) -> usize {
        match self {
            OptimizerKind::LbfgsLite { .. } => 500,
            _ => 20_000,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr() > 0.0) {
            return Err(format!("lr must be positive, got {}", self.lr()));
        }
        match *self {
            OptimizerKind::Adam { beta1, beta2, eps, .. } | OptimizerKind::Adamw { beta1, beta2, eps, .. } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err("betas must lie in [0, 1)".into());
                }
                if !(eps > 0.0) {
                    return Err("eps must be positive".into());
                }
            }
            OptimizerKind::LbfgsLite { history, .. } => {
                if history == 0 {
                    return Err("history must be at least 1".into());
                }
            }
        }
        if let OptimizerKind::Adamw { weight_decay, .. } = *self {
            if !(weight_decay >= 0.0) {
                return Err("weight_decay must be non-negative".into());
            }
        }
        Ok(())
    }
}

/// Objective value and gradient at a point.
pub type Eval = (f64, Vec<f64>);

/// What a single step produced.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    /// The caller must evaluate the objective at the new point.
    Moved,
    /// The optimizer already evaluated the new point (line search).
    Evaluated(Eval),
    /// Line search failed; a small projected gradient step was taken instead.
    Fallback(Eval),
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    s_hist: Vec<Vec<f64>>,
    y_hist: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
            s_hist: Vec::new(),
            y_hist: Vec::new(),
        }
    }

    pub fn kind(&self) -> &OptimizerKind {
        &self.kind
    }

    /// Advances `x` given its current value `f` and gradient `g`.
    ///
    /// `eval` computes the objective at a trial point and `project` maps a
    /// point back into the feasible set. Adam-family steps never call `eval`.
    pub fn step<E>(
        &mut self,
        x: &mut [f64],
        f: f64,
        g: &[f64],
        eval: &mut dyn FnMut(&[f64]) -> Result<Eval, E>,
        project: &dyn Fn(&mut [f64]),
    ) -> Result<StepOutcome, E> {
        match self.kind {
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                self.adam_step(x, g, lr, beta1, beta2, eps, 0.0);
                project(x);
                Ok(StepOutcome::Moved)
            }
            OptimizerKind::Adamw {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                self.adam_step(x, g, lr, beta1, beta2, eps, weight_decay);
                project(x);
                Ok(StepOutcome::Moved)
            }
            OptimizerKind::LbfgsLite {
                lr,
                history,
                max_halvings,
            } => self.lbfgs_step(x, f, g, lr, history, max_halvings, eval, project),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn adam_step(&mut self, x: &mut [f64], g: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) {
        if self.m.len() != x.len() {
            self.m = vec![0.0; x.len()];
            self.v = vec![0.0; x.len()];
        }
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            if wd > 0.0 {
                x[i] -= lr * wd * x[i];
            }
            x[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }

    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let k = self.s_hist.len();
        let mut q = g.to_vec();
        let mut alpha = vec![0.0; k];
        let rho: Vec<f64> = (0..k).map(|i| 1.0 / dot(&self.y_hist[i], &self.s_hist[i])).collect();
        for i in (0..k).rev() {
            alpha[i] = rho[i] * dot(&self.s_hist[i], &q);
            for (qj, yj) in q.iter_mut().zip(&self.y_hist[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        if k > 0 {
            let gamma = dot(&self.s_hist[k - 1], &self.y_hist[k - 1]) / dot(&self.y_hist[k - 1], &self.y_hist[k - 1]);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..k {
            let beta = rho[i] * dot(&self.y_hist[i], &q);
            for (qj, sj) in q.iter_mut().zip(&self.s_hist[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    #[allow(clippy::too_many_arguments)]
    fn lbfgs_step<E>(
        &mut self,
        x: &mut [f64],
        f: f64,
        g: &[f64],
        lr: f64,
        history: usize,
        max_halvings: usize,
        eval: &mut dyn FnMut(&[f64]) -> Result<Eval, E>,
        project: &dyn Fn(&mut [f64]),
    ) -> Result<StepOutcome, E> {
        let mut d = self.direction(g);
        if dot(&d, g) >= 0.0 {
            self.s_hist.clear();
            self.y_hist.clear();
            d = g.iter().map(|v| -v).collect();
        }
        let mut t = if self.s_hist.is_empty() {
            let l1: f64 = g.iter().map(|v| v.abs()).sum();
            lr * (1.0 / l1.max(f64::MIN_POSITIVE)).min(1.0)
        } else {
            lr
        };
        let mut trial = vec![0.0; x.len()];
        for _ in 0..=max_halvings {
            for i in 0..x.len() {
                trial[i] = x[i] + t * d[i];
            }
            project(&mut trial);
            let moved: f64 = trial.iter().zip(x.iter()).zip(g).map(|((a, b), gi)| (a - b) * gi).sum();
            let (fn_, gn) = eval(&trial)?;
            if fn_.is_finite() && fn_ <= f + 1e-4 * moved && trial.iter().zip(x.iter()).any(|(a, b)| a != b) {
                let s: Vec<f64> = trial.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = gn.iter().zip(g).map(|(a, b)| a - b).collect();
                if dot(&s, &y) > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                    if self.s_hist.len() == history {
                        self.s_hist.remove(0);
                        self.y_hist.remove(0);
                    }
                    self.s_hist.push(s);
                    self.y_hist.push(y);
                }
                x.copy_from_slice(&trial);
                return Ok(StepOutcome::Evaluated((fn_, gn)));
            }
            t *= 0.5;
        }
        // stalled: drop curvature memory and take the smallest tried gradient step
        self.s_hist.clear();
        self.y_hist.clear();
        let gn2 = dot(g, g).sqrt().max(f64::MIN_POSITIVE);
        for i in 0..x.len() {
            x[i] -= t * g[i] / gn2;
        }
        project(x);
        let e = eval(x)?;
        Ok(StepOutcome::Fallback(e))
    }
}
