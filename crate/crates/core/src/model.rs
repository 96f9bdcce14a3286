//! Victim network definitions: MLP, LeNet-lite CNN and a one-block
//! transformer-lite text classifier, their weight initialisers and the
//! soft-label cross-entropy training loss.
//!
//! Parameters are always handled as an ordered list. The order is fixed by
//! [`ModelSpec::param_layout`] (input side first) and doubles as the layer
//! index used when weighting per-layer gradient distances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("expected {expected} parameter tensors, got {got}")]
    ParamCount { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Gelu,
}

impl Activation {
    fn apply(self, x: &Var) -> std::result::Result<Var, TensorError> {
        match self {
            Activation::Sigmoid => x.sigmoid(),
            Activation::Gelu => x.gelu(),
        }
    }
}

/// How the transformer-lite turns `seq_len × d` features into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    /// Concatenate all positions; keeps per-position information.
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Fully connected layers; `hidden` lists the hidden widths.
    Mlp { hidden: Vec<usize> },
    /// `conv_layers` convolutions (same padding) followed by one linear layer.
    LenetLite {
        channels: usize,
        kernel: usize,
        stride: usize,
        conv_layers: usize,
    },
    /// Sinusoidal position encoding, optionally one encoder block
    /// (multi-head self-attention and a feed-forward net, both residual),
    /// pooling and a linear head. Input is `seq_len × embed_dim` per item.
    TransformerLite {
        vocab: usize,
        heads: usize,
        ff_dim: usize,
        encoder: bool,
        position_encoding: bool,
        pooling: Pooling,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub activation: Activation,
    pub num_classes: usize,
    /// Shape of one input item: `[C, H, W]` for images, `[seq_len, d]` for text.
    pub input_shape: Vec<usize>,
}

/// What a parameter tensor is, for initialisation purposes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamRole {
    Weight { fan_in: usize, fan_out: usize },
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

fn param(name: impl Into<String>, shape: Vec<usize>, role: ParamRole) -> ParamInfo {
    ParamInfo {
        name: name.into(),
        shape,
        role,
    }
}

fn linear(out: &mut Vec<ParamInfo>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(param(
        format!("{prefix}.weight"),
        vec![fan_in, fan_out],
        ParamRole::Weight { fan_in, fan_out },
    ));
    out.push(param(format!("{prefix}.bias"), vec![fan_out], ParamRole::Bias));
}

impl ModelSpec {
    pub fn mlp(input_shape: Vec<usize>, hidden: Vec<usize>, num_classes: usize) -> Self {
        Self {
            arch: Architecture::Mlp { hidden },
            activation: Activation::Sigmoid,
            num_classes,
            input_shape,
        }
    }

    /// Two 5×5 stride-1 convolutions with 12 channels and a linear head.
    pub fn lenet_lite(input_shape: Vec<usize>, num_classes: usize) -> Self {
        Self {
            arch: Architecture::LenetLite {
                channels: 12,
                kernel: 5,
                stride: 1,
                conv_layers: 2,
            },
            activation: Activation::Sigmoid,
            num_classes,
            input_shape,
        }
    }

    pub fn transformer_lite(
        seq_len: usize,
        embed_dim: usize,
        vocab: usize,
        heads: usize,
        ff_dim: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            arch: Architecture::TransformerLite {
                vocab,
                heads,
                ff_dim,
                encoder: true,
                position_encoding: true,
                pooling: Pooling::Mean,
            },
            activation: Activation::Gelu,
            num_classes,
            input_shape: vec![seq_len, embed_dim],
        }
    }

    /// Linear classifier applied directly to the flattened token embeddings.
    pub fn embedding_head(seq_len: usize, embed_dim: usize, vocab: usize, num_classes: usize) -> Self {
        Self {
            arch: Architecture::TransformerLite {
                vocab,
                heads: 1,
                ff_dim: 1,
                encoder: false,
                position_encoding: false,
                pooling: Pooling::Flatten,
            },
            activation: Activation::Gelu,
            num_classes,
            input_shape: vec![seq_len, embed_dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if self.num_classes < 1 || self.input_shape.contains(&0) {
            return bad(format!(
                "num_classes {} and input dims {:?} must be positive",
                self.num_classes, self.input_shape
            ));
        }
        match &self.arch {
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return bad("MLP widths must be ≥ 1".into());
                }
            }
            Architecture::LenetLite {
                channels,
                kernel,
                stride,
                conv_layers,
            } => {
                if self.input_shape.len() != 3 {
                    return bad(format!("LeNet-lite needs [C,H,W] input, got {:?}", self.input_shape));
                }
                if *channels == 0 || *kernel == 0 || *stride == 0 || *conv_layers == 0 {
                    return bad("LeNet-lite channels, kernel, stride and depth must be ≥ 1".into());
                }
            }
            Architecture::TransformerLite { heads, ff_dim, vocab, .. } => {
                if self.input_shape.len() != 2 {
                    return bad(format!("transformer-lite needs [seq, d] input, got {:?}", self.input_shape));
                }
                let d = self.input_shape[1];
                if *heads == 0 || !d.is_multiple_of(*heads) {
                    return bad(format!("embed dim {} not divisible by {} heads", d, heads));
                }
                if *ff_dim == 0 || *vocab == 0 {
                    return bad("transformer-lite ff_dim and vocab must be ≥ 1".into());
                }
            }
        }
        Ok(())
    }

    fn conv_out_hw(&self) -> (usize, usize) {
        let Architecture::LenetLite {
            kernel,
            stride,
            conv_layers,
            ..
        } = &self.arch
        else {
            unreachable!()
        };
        let pad = kernel / 2;
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for _ in 0..*conv_layers {
            h = (h + 2 * pad - kernel) / stride + 1;
            w = (w + 2 * pad - kernel) / stride + 1;
        }
        (h, w)
    }

    /// Ordered parameter layout, input side first.
    pub fn param_layout(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let in_dim: usize = self.input_shape.iter().product();
        match &self.arch {
            Architecture::Mlp { hidden } => {
                let mut prev = in_dim;
                for (i, &h) in hidden.iter().enumerate() {
                    linear(&mut out, &format!("fc{}", i + 1), prev, h);
                    prev = h;
                }
                linear(&mut out, &format!("fc{}", hidden.len() + 1), prev, self.num_classes);
            }
            Architecture::LenetLite {
                channels,
                kernel,
                conv_layers,
                ..
            } => {
                let mut c_in = self.input_shape[0];
                for i in 0..*conv_layers {
                    let kk = kernel * kernel;
                    out.push(param(
                        format!("conv{}.weight", i + 1),
                        vec![*channels, c_in, *kernel, *kernel],
                        ParamRole::Weight {
                            fan_in: c_in * kk,
                            fan_out: channels * kk,
                        },
                    ));
                    out.push(param(format!("conv{}.bias", i + 1), vec![*channels], ParamRole::Bias));
                    c_in = *channels;
                }
                let (h, w) = self.conv_out_hw();
                linear(&mut out, "fc", channels * h * w, self.num_classes);
            }
            Architecture::TransformerLite {
                ff_dim,
                encoder,
                pooling,
                ..
            } => {
                let (seq, d) = (self.input_shape[0], self.input_shape[1]);
                if *encoder {
                    for p in ["attn.q", "attn.k", "attn.v", "attn.out"] {
                        linear(&mut out, p, d, d);
                    }
                    linear(&mut out, "ff1", d, *ff_dim);
                    linear(&mut out, "ff2", *ff_dim, d);
                }
                let pooled = match pooling {
                    Pooling::Mean => d,
                    Pooling::Flatten => seq * d,
                };
                linear(&mut out, "head", pooled, self.num_classes);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitScheme {
    Uniform { lo: f64, hi: f64 },
    XavierNormal { gain: f64 },
}

impl InitScheme {
    pub fn label(&self) -> &'static str {
        match self {
            InitScheme::Uniform { .. } => "uniform",
            InitScheme::XavierNormal { .. } => "xavier_normal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightInit {
    pub scheme: InitScheme,
    pub seed: u64,
}

impl WeightInit {
    pub fn uniform(seed: u64) -> Self {
        Self {
            scheme: InitScheme::Uniform { lo: -0.5, hi: 0.5 },
            seed,
        }
    }

    pub fn xavier_normal(seed: u64) -> Self {
        Self {
            scheme: InitScheme::XavierNormal { gain: 1.0 },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.scheme {
            InitScheme::Uniform { lo, hi } if !(lo < hi) => Err(ModelError::InvalidSpec(format!(
                "uniform init needs lo < hi, got ({lo}, {hi})"
            ))),
            InitScheme::XavierNormal { gain } if !(gain > 0.0) => Err(ModelError::InvalidSpec(
                format!("xavier gain must be positive, got {gain}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Ordered named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    entries: Vec<(String, Tensor)>,
}

impl Weights {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// 64-bit FNV-1a over the little-endian bytes of every entry, in order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.data() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Leaves on `tape`, one per parameter.
    pub fn to_leaves(&self, tape: &Tape) -> Vec<Var> {
        self.tensors().map(|t| tape.leaf(t.clone())).collect()
    }

    pub fn to_constants(&self, tape: &Tape) -> Vec<Var> {
        self.tensors().map(|t| tape.constant(t.clone())).collect()
    }
}

pub fn init_weights(spec: &ModelSpec, init: &WeightInit) -> Result<Weights> {
    spec.validate()?;
    init.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
    let entries = spec
        .param_layout()
        .into_iter()
        .map(|p| {
            let t = match (p.role, init.scheme) {
                (ParamRole::Bias, _) => Tensor::zeros(p.shape),
                (ParamRole::Weight { .. }, InitScheme::Uniform { lo, hi }) => {
                    Tensor::from_fn(p.shape, |_| rng.random_range(lo..=hi))
                }
                (ParamRole::Weight { fan_in, fan_out }, InitScheme::XavierNormal { gain }) => {
                    let std = gain * (2.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_fn(p.shape, |_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        std * z
                    })
                }
            };
            (p.name, t)
        })
        .collect();
    Ok(Weights { entries })
}

/// `seq_len × d` sinusoidal position table.
pub fn position_encoding(seq_len: usize, d: usize) -> Tensor {
    Tensor::from_fn([seq_len, d], |i| {
        let (pos, j) = (i / d, i % d);
        let angle = pos as f64 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn affine(x: &Var, w: &Var, b: &Var) -> std::result::Result<Var, TensorError> {
    x.matmul(w)?.add(b)
}

/// Multi-head scaled dot-product self-attention over a `B×S×d` input.
///
/// `params` holds `[wq, bq, wk, bk, wv, bv, wo, bo]`.
pub fn multi_head_attention(x: &Var, params: &[Var], heads: usize) -> Result<Var> {
    let (b, s, d) = match x.shape() {
        &[b, s, d] => (b, s, d),
        other => {
            return Err(ModelError::InvalidSpec(format!(
                "attention input must be B×S×d, got {other:?}"
            )))
        }
    };
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(ModelError::InvalidSpec(format!("d={d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let flat = x.reshape(&[b * s, d])?;
    let split = |t: Var| -> std::result::Result<Var, TensorError> {
        t.reshape(&[b, s, heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * heads, s, dh])
    };
    let q = split(affine(&flat, &params[0], &params[1])?)?;
    let k = split(affine(&flat, &params[2], &params[3])?)?;
    let v = split(affine(&flat, &params[4], &params[5])?)?;
    let scores = q.matmul(&k.transpose()?)?.mul_scalar(1.0 / (dh as f64).sqrt())?;
    let ctx = scores.softmax()?.matmul(&v)?;
    let merged = ctx
        .reshape(&[b, heads, s, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * s, d])?;
    Ok(affine(&merged, &params[6], &params[7])?.reshape(&[b, s, d])?)
}

/// Logits `B×num_classes` for a batch `x` of shape `B × input_shape`.
pub fn forward(spec: &ModelSpec, params: &[Var], x: &Var) -> Result<Var> {
    let expected = spec.param_layout().len();
    if params.len() != expected {
        return Err(ModelError::ParamCount {
            expected,
            got: params.len(),
        });
    }
    let xs = x.shape();
    if xs.len() != spec.input_shape.len() + 1 || xs[1..] != spec.input_shape[..] {
        return Err(TensorError::ShapeMismatch {
            op: "forward",
            lhs: xs.to_vec(),
            rhs: spec.input_shape.clone(),
        }
        .into());
    }
    let batch = xs[0];
    let act = spec.activation;
    match &spec.arch {
        Architecture::Mlp { .. } => {
            let mut h = x.reshape(&[batch, spec.input_shape.iter().product()])?;
            let n_layers = params.len() / 2;
            for (i, wb) in params.chunks(2).enumerate() {
                h = affine(&h, &wb[0], &wb[1])?;
                if i + 1 < n_layers {
                    h = act.apply(&h)?;
                }
            }
            Ok(h)
        }
        Architecture::LenetLite {
            channels,
            kernel,
            stride,
            conv_layers,
        } => {
            let mut h = x.clone();
            for i in 0..*conv_layers {
                let (w, b) = (&params[2 * i], &params[2 * i + 1]);
                let bias = b.reshape(&[1, *channels, 1, 1])?;
                h = act.apply(&h.conv2d(w, *stride, kernel / 2)?.add(&bias)?)?;
            }
            let flat_dim = h.shape()[1..].iter().product();
            let h = h.reshape(&[batch, flat_dim])?;
            let n = params.len();
            Ok(affine(&h, &params[n - 2], &params[n - 1])?)
        }
        Architecture::TransformerLite {
            heads,
            encoder,
            position_encoding: use_pe,
            pooling,
            ..
        } => transformer_lite_forward(spec, params, x, *heads, *encoder, *use_pe, *pooling),
    }
}

fn transformer_lite_forward(
    spec: &ModelSpec,
    params: &[Var],
    x: &Var,
    heads: usize,
    encoder: bool,
    use_pe: bool,
    pooling: Pooling,
) -> Result<Var> {
    let (b, s, d) = (x.shape()[0], spec.input_shape[0], spec.input_shape[1]);
    let mut h = x.clone();
    if use_pe {
        let pe = x.tape().constant(position_encoding(s, d).reshape([1, s, d])?);
        h = h.add(&pe)?;
    }
    if encoder {
        let attn = multi_head_attention(&h, &params[..8], heads)?;
        let h1 = h.add(&attn)?.reshape(&[b * s, d])?;
        let ff = spec.activation.apply(&affine(&h1, &params[8], &params[9])?)?;
        let ff = affine(&ff, &params[10], &params[11])?;
        h = h1.add(&ff)?.reshape(&[b, s, d])?;
    }
    let pooled = match pooling {
        Pooling::Mean => h.mean_axis(1)?.reshape(&[b, d])?,
        Pooling::Flatten => h.reshape(&[b, s * d])?,
    };
    let n = params.len();
    Ok(affine(&pooled, &params[n - 2], &params[n - 1])?)
}

/// Mean over the batch of `−Σ_c softmax(y)_c · log softmax(logits)_c`.
///
/// `y` is an unconstrained label-score matrix; a one-hot row is turned into a
/// (smoothed) distribution by the same softmax.
pub fn soft_cross_entropy(logits: &Var, y: &Var) -> Result<Var> {
    if logits.shape() != y.shape() || logits.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "loss",
            lhs: logits.shape().to_vec(),
            rhs: y.shape().to_vec(),
        }
        .into());
    }
    let batch = logits.shape()[0] as f64;
    let ce = y.softmax()?.mul(&logits.log_softmax()?)?.sum()?;
    Ok(ce.mul_scalar(-1.0 / batch)?)
}

/// One-hot rows for class indices.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Tensor {
    Tensor::from_fn([labels.len(), num_classes], |i| {
        if labels[i / num_classes] == i % num_classes {
            1.0
        } else {
            0.0
        }
    })
}
