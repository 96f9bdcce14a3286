//! The honest participant: holds private `(X, Y)`, optionally trains, and
//! publishes the averaged batch gradient that the adversary observes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::{forward, soft_cross_entropy, ModelError, ModelSpec, Weights};
use crate::tensor::{grad, read_container, write_container, Container, ContainerError, Tape, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum VictimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("{0}")]
    Invalid(String),
}

impl From<crate::tensor::TensorError> for VictimError {
    fn from(e: crate::tensor::TensorError) -> Self {
        VictimError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, VictimError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

/// Per-layer gradients of the victim's loss, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSnapshot {
    pub layer_grads: Vec<(String, Tensor)>,
    pub model: ModelSpec,
    pub weight_checksum: u64,
    pub meta: SnapshotMeta,
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    kind: String,
    model: ModelSpec,
    weight_checksum: String,
    meta: SnapshotMeta,
}

impl GradientSnapshot {
    pub fn grads(&self) -> impl Iterator<Item = &Tensor> {
        self.layer_grads.iter().map(|(_, t)| t)
    }

    pub fn num_layers(&self) -> usize {
        self.layer_grads.len()
    }

    pub fn to_container(&self) -> Container {
        let header = SnapshotHeader {
            kind: "gradient_snapshot".into(),
            model: self.model.clone(),
            weight_checksum: format!("{:016x}", self.weight_checksum),
            meta: self.meta,
        };
        Container {
            meta: serde_json::to_value(header).expect("snapshot header serialises"),
            tensors: self.layer_grads.clone(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let h: SnapshotHeader = serde_json::from_value(c.meta)
            .map_err(|e| VictimError::Invalid(format!("snapshot header: {e}")))?;
        if h.kind != "gradient_snapshot" {
            return Err(VictimError::Invalid(format!("expected a gradient snapshot, found {}", h.kind)));
        }
        let weight_checksum = u64::from_str_radix(&h.weight_checksum, 16)
            .map_err(|e| VictimError::Invalid(format!("weight checksum: {e}")))?;
        Ok(Self {
            layer_grads: c.tensors,
            model: h.model,
            weight_checksum,
            meta: h.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(write_container(path, &self.to_container())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(read_container(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    kind: String,
    model: ModelSpec,
}

pub fn save_model(path: impl AsRef<Path>, spec: &ModelSpec, weights: &Weights) -> Result<()> {
    let meta = serde_json::to_value(WeightsHeader {
        kind: "model_weights".into(),
        model: spec.clone(),
    })
    .expect("weights header serialises");
    Ok(write_container(
        path,
        &Container {
            meta,
            tensors: weights.entries().to_vec(),
        },
    )?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelSpec, Weights)> {
    let c = read_container(path)?;
    let h: WeightsHeader = serde_json::from_value(c.meta)
        .map_err(|e| VictimError::Invalid(format!("model header: {e}")))?;
    if h.kind != "model_weights" {
        return Err(VictimError::Invalid(format!("expected model weights, found {}", h.kind)));
    }
    let layout = h.model.param_layout();
    if layout.len() != c.tensors.len()
        || layout
            .iter()
            .zip(&c.tensors)
            .any(|(p, (n, t))| p.name != *n || p.shape != t.shape())
    {
        return Err(VictimError::Invalid("weights do not match the model layout".into()));
    }
    Ok((h.model, Weights::new(c.tensors)))
}

fn loss_and_params(spec: &ModelSpec, weights: &Weights, x: &Tensor, y: &Tensor) -> Result<(Var, Vec<Var>)> {
    let tape = Tape::new();
    let params = weights.to_leaves(&tape);
    let logits = forward(spec, &params, &tape.constant(x.clone()))?;
    let loss = soft_cross_entropy(&logits, &tape.constant(y.clone()))?;
    Ok((loss, params))
}

/// Loss value of `(x, y)` under `weights`.
pub fn victim_loss(spec: &ModelSpec, weights: &Weights, x: &Tensor, y: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let params = weights.to_constants(&tape);
    let logits = forward(spec, &params, &tape.constant(x.clone()))?;
    Ok(soft_cross_entropy(&logits, &tape.constant(y.clone()))?.item())
}

/// Batch-averaged gradients of the loss on `(x, y)` with respect to every
/// parameter. `weights` are not modified.
pub fn capture(spec: &ModelSpec, weights: &Weights, x: &Tensor, y: &Tensor) -> Result<GradientSnapshot> {
    if y.ndim() != 2 || x.shape().first() != y.shape().first() {
        return Err(VictimError::Invalid(format!(
            "labels {:?} do not match batch {:?}",
            y.shape(),
            x.shape()
        )));
    }
    let (loss, params) = loss_and_params(spec, weights, x, y)?;
    let refs: Vec<&Var> = params.iter().collect();
    let grads = grad(&loss, &refs, false)?;
    let layer_grads = weights
        .entries()
        .iter()
        .zip(grads)
        .map(|((n, _), g)| (n.clone(), g.value().clone()))
        .collect();
    Ok(GradientSnapshot {
        layer_grads,
        model: spec.clone(),
        weight_checksum: weights.checksum(),
        meta: SnapshotMeta {
            batch_size: x.shape()[0],
            epochs: 0,
            seed: 0,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 0,
            lr: 0.01,
            batch_size: 1,
        }
    }
}

/// Plain mini-batch SGD over the dataset in order. Returns the updated
/// weights and the full-dataset loss after each epoch.
pub fn train(spec: &ModelSpec, weights: &Weights, data: &Dataset, opts: &TrainOptions) -> Result<(Weights, Vec<f64>)> {
    if opts.batch_size == 0 {
        return Err(VictimError::Invalid("batch_size must be ≥ 1".into()));
    }
    let mut w = weights.clone();
    let mut history = Vec::with_capacity(opts.epochs);
    let all: Vec<usize> = (0..data.len()).collect();
    let (x_all, y_all) = data.batch(&all);
    for _ in 0..opts.epochs {
        for chunk in all.chunks(opts.batch_size) {
            let (x, y) = data.batch(chunk);
            let (loss, params) = loss_and_params(spec, &w, &x, &y)?;
            let refs: Vec<&Var> = params.iter().collect();
            let grads = grad(&loss, &refs, false)?;
            let mut entries = w.into_entries();
            for ((_, t), g) in entries.iter_mut().zip(&grads) {
                for (p, d) in t.data_mut().iter_mut().zip(g.value().data()) {
                    *p -= opts.lr * d;
                }
            }
            w = Weights::new(entries);
        }
        history.push(victim_loss(spec, &w, &x_all, &y_all)?);
    }
    Ok((w, history))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStats {
    pub name: String,
    pub mean: f64,
    pub variance: f64,
    pub max_abs: f64,
}

/// Population mean, variance and max-abs of each layer's gradient.
pub fn gradient_stats(snapshot: &GradientSnapshot) -> Vec<LayerStats> {
    snapshot
        .layer_grads
        .iter()
        .map(|(name, t)| {
            let n = t.numel() as f64;
            let mean = t.sum() / n;
            let variance = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            LayerStats {
                name: name.clone(),
                mean,
                variance,
                max_abs: t.max_abs(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, one_hot, WeightInit};
    use crate::tensor::finite_difference;

    fn zero_weights(spec: &ModelSpec) -> Weights {
        Weights::new(
            spec.param_layout()
                .into_iter()
                .map(|p| (p.name, Tensor::zeros(p.shape)))
                .collect(),
        )
    }

    #[test]
    fn zero_mlp_last_bias_gradient() {
        let spec = ModelSpec::mlp(vec![1, 2, 2], vec![3], 4);
        let w = zero_weights(&spec);
        let x = Tensor::from_fn([2, 1, 2, 2], |i| i as f64 / 8.0);
        let y = one_hot(&[1, 3], 4);
        let snap = capture(&spec, &w, &x, &y).unwrap();
        let gb = &snap.layer_grads[3].1;
        // softmax(0) is uniform; softmax(one-hot) puts e/(e+3) on the hot class
        let e = std::f64::consts::E;
        let hot = e / (e + 3.0);
        let cold = 1.0 / (e + 3.0);
        for c in 0..4 {
            let sy: f64 = [1usize, 3].iter().map(|&l| if l == c { hot } else { cold }).sum::<f64>() / 2.0;
            assert!((gb.data()[c] - (0.25 - sy)).abs() < 1e-12);
        }
    }

    #[test]
    fn capture_is_deterministic_and_leaves_weights() {
        let spec = ModelSpec::lenet_lite(vec![1, 8, 8], 4);
        let w = init_weights(&spec, &WeightInit::xavier_normal(1)).unwrap();
        let before = w.clone();
        let x = Tensor::from_fn([1, 1, 8, 8], |i| (i % 3) as f64 / 2.0);
        let y = one_hot(&[2], 4);
        let a = capture(&spec, &w, &x, &y).unwrap();
        let b = capture(&spec, &w, &x, &y).unwrap();
        assert_eq!(a, b);
        assert_eq!(w, before);
        assert!(a.grads().all(|g| g.is_finite()));
        assert_eq!(a.weight_checksum, w.checksum());
    }

    #[test]
    fn snapshot_matches_finite_differences() {
        let spec = ModelSpec::mlp(vec![1, 2, 3], vec![4], 3);
        let w = init_weights(&spec, &WeightInit::uniform(7)).unwrap();
        let x = Tensor::from_fn([2, 1, 2, 3], |i| ((i * 5) % 7) as f64 / 7.0);
        let y = one_hot(&[0, 2], 3);
        let snap = capture(&spec, &w, &x, &y).unwrap();
        for (li, (name, g)) in snap.layer_grads.iter().enumerate() {
            let fd = finite_difference(
                |p| {
                    let mut ww = w.clone();
                    *ww.get_mut(name).unwrap() = p.clone();
                    victim_loss(&spec, &ww, &x, &y).unwrap()
                },
                &w.entries()[li].1,
                1e-5,
            );
            for (a, b) in g.data().iter().zip(fd.data()) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
                assert!(rel < 1e-4 || (a - b).abs() < 1e-8, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn snapshot_roundtrip_bit_exact() {
        let spec = ModelSpec::mlp(vec![1, 2, 2], vec![3], 2);
        let w = init_weights(&spec, &WeightInit::xavier_normal(3)).unwrap();
        let mut snap = capture(&spec, &w, &Tensor::full([1, 1, 2, 2], 0.3), &one_hot(&[1], 2)).unwrap();
        snap.meta.epochs = 5;
        snap.meta.seed = 99;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("snap.bin");
        snap.save(&p).unwrap();
        assert_eq!(GradientSnapshot::load(&p).unwrap(), snap);
        let mp = dir.path().join("model.bin");
        save_model(&mp, &spec, &w).unwrap();
        assert!(GradientSnapshot::load(&mp).is_err());
        let (s2, w2) = load_model(&mp).unwrap();
        assert_eq!((s2, w2), (spec, w));
    }

    fn two_point_set() -> Dataset {
        Dataset {
            items: vec![Tensor::new([1, 1, 2], vec![1.0, 0.0]).unwrap(), Tensor::new([1, 1, 2], vec![0.0, 1.0]).unwrap()],
            labels: vec![0, 1],
            num_classes: 2,
        }
    }

    #[test]
    fn zero_epochs_and_zero_lr_are_identity() {
        let spec = ModelSpec::mlp(vec![1, 1, 2], vec![], 2);
        let w = init_weights(&spec, &WeightInit::uniform(1)).unwrap();
        let data = two_point_set();
        let (w0, h0) = train(&spec, &w, &data, &TrainOptions { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(w0, w);
        assert!(h0.is_empty());
        let (w1, h1) = train(&spec, &w, &data, &TrainOptions { epochs: 4, lr: 0.0, batch_size: 1 }).unwrap();
        assert_eq!(w1, w);
        assert_eq!(h1.len(), 4);
        assert!(h1.iter().all(|&l| l == h1[0]));
    }

    #[test]
    fn linear_model_loss_strictly_decreases() {
        let spec = ModelSpec::mlp(vec![1, 1, 2], vec![], 2);
        let w = init_weights(&spec, &WeightInit::uniform(2)).unwrap();
        let (_, hist) = train(&spec, &w, &two_point_set(), &TrainOptions { epochs: 30, lr: 0.1, batch_size: 2 }).unwrap();
        assert_eq!(hist.len(), 30);
        for pair in hist.windows(2) {
            assert!(pair[1] < pair[0], "{:?}", hist);
        }
    }

    #[test]
    fn stats_examples() {
        let snap = GradientSnapshot {
            layer_grads: vec![
                ("a".into(), Tensor::zeros([3])),
                ("b".into(), Tensor::new([2], vec![1.0, -1.0]).unwrap()),
            ],
            model: ModelSpec::mlp(vec![1], vec![1], 1),
            weight_checksum: 0,
            meta: SnapshotMeta { batch_size: 1, epochs: 0, seed: 0 },
        };
        let s = gradient_stats(&snap);
        assert_eq!((s[0].mean, s[0].variance, s[0].max_abs), (0.0, 0.0, 0.0));
        assert_eq!((s[1].mean, s[1].variance, s[1].max_abs), (0.0, 1.0, 1.0));
    }

    #[test]
    fn stats_match_two_pass_reference() {
        let t = Tensor::from_fn([50], |i| ((i * 7919) % 101) as f64 / 37.0 - 1.3);
        let snap = GradientSnapshot {
            layer_grads: vec![("x".into(), t.clone())],
            model: ModelSpec::mlp(vec![1], vec![1], 1),
            weight_checksum: 0,
            meta: SnapshotMeta { batch_size: 1, epochs: 0, seed: 0 },
        };
        let s = &gradient_stats(&snap)[0];
        let mut sum = 0.0;
        for v in t.data() {
            sum += v;
        }
        let m = sum / 50.0;
        let mut ss = 0.0;
        for v in t.data() {
            ss += (v - m) * (v - m);
        }
        assert!((s.mean - m).abs() < 1e-12);
        assert!((s.variance - ss / 50.0).abs() < 1e-12);
    }
}
