//! Token recovery from reconstructed embeddings.
//!
//! The attack runs in embedding space without any range constraint. Each
//! recovered embedding row is then mapped to vocabulary scores through the
//! Moore–Penrose pseudoinverse of the embedding matrix.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attack::{run_attack_in, AttackConfig, AttackError, InputDomain, ReconstructionResult};
use crate::model::{init_weights, one_hot, ModelSpec, WeightInit, Weights};
use crate::tensor::Tensor;
use crate::victim::{capture, GradientSnapshot};

#[derive(Debug, thiserror::Error)]
pub enum TextError {
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("vocabulary file: {0}")]
    Io(#[from] std::io::Error),
    #[error("normal matrix is singular (condition estimate {condition:.3e})")]
    Singular { condition: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

pub type Result<T> = std::result::Result<T, TextError>;

/// Ridge added to `WᵀW` before solving.
pub const RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    /// `vocab × d`, one embedding row per token.
    embed: Tensor,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, embed: Tensor) -> Result<Self> {
        if embed.ndim() != 2 || embed.shape()[0] != tokens.len() {
            return Err(TextError::Vocab(format!(
                "embedding shape {:?} does not fit {} tokens",
                embed.shape(),
                tokens.len()
            )));
        }
        if tokens.len() <= embed.shape()[1] {
            return Err(TextError::Vocab(format!(
                "vocabulary size {} must exceed embedding width {}",
                tokens.len(),
                embed.shape()[1]
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = tokens.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(TextError::Vocab(format!("duplicate token {dup:?}")));
        }
        Ok(Self { tokens, embed })
    }

    /// Embedding rows drawn i.i.d. from U(−0.5, 0.5).
    pub fn with_uniform_embedding(tokens: Vec<String>, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Tensor::from_fn([tokens.len(), dim], |_| rng.random_range(-0.5..0.5));
        Self::new(tokens, embed)
    }

    /// Tokens `t0, t1, …` with a seeded uniform embedding.
    pub fn synthetic(size: usize, dim: usize, seed: u64) -> Result<Self> {
        Self::with_uniform_embedding((0..size).map(|i| format!("t{i}")).collect(), dim, seed)
    }

    /// One token per non-empty line; the line order gives the index.
    pub fn load(path: impl AsRef<Path>, dim: usize, seed: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        Self::with_uniform_embedding(tokens, dim, seed)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embed.shape()[1]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embed
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    /// `seq × d` embedding of a token sequence.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        let d = self.dim();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= self.len() {
                return Err(TextError::Vocab(format!("token id {i} out of range")));
            }
            data.extend_from_slice(&self.embed.data()[i * d..(i + 1) * d]);
        }
        Ok(Tensor::new([ids.len(), d], data).expect("row count matches"))
    }
}

fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    Tensor::from_fn([n, m], |k| a.data()[(k % m) * n + k / m])
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b.data()[p * n + j];
            }
        }
    }
    Tensor::new([m, n], out).expect("matmul shape")
}

/// `(WᵀW + λI)⁻¹Wᵀ` for a tall `W`, via a Cholesky solve.
pub fn pseudoinverse(w: &Tensor) -> Result<Tensor> {
    if w.ndim() != 2 {
        return Err(TextError::Dimension(format!("expected a matrix, got {:?}", w.shape())));
    }
    let wt = transpose(w);
    let mut a = matmul(&wt, w);
    let n = a.shape()[0];
    for i in 0..n {
        a.data_mut()[i * n + i] += RIDGE;
    }
    // Cholesky A = L Lᵀ
    let mut l = vec![0.0; n * n];
    let a = a.data();
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                // pivot lost almost all of its diagonal: rank deficient
                if !(d > 1e-10 * a[i * n + i]) {
                    return Err(TextError::Singular {
                        condition: if d > 0.0 { a[i * n + i] / d } else { f64::INFINITY },
                    });
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    // forward and back substitution, one column of Wᵀ at a time
    let m = wt.shape()[1];
    let mut x = wt.clone();
    let xd = x.data_mut();
    for c in 0..m {
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[i * n + k] * xd[k * m + c]).sum();
            xd[i * m + c] = (xd[i * m + c] - s) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[k * n + i] * xd[k * m + c]).sum();
            xd[i * m + c] = (xd[i * m + c] - s) / l[i * n + i];
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TextReconstruction {
    pub recovered: Vec<usize>,
    pub recovered_tokens: Vec<String>,
    /// Per-position vocabulary scores.
    #[serde(skip)]
    pub token_scores: Vec<Vec<f64>>,
    pub truth: Option<Vec<usize>>,
    pub match_mask: Option<Vec<bool>>,
}

#[derive(Serialize)]
struct Position<'a> {
    recovered: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<&'a str>,
    #[serde(rename = "match", skip_serializing_if = "Option::is_none")]
    matched: Option<bool>,
}

impl TextReconstruction {
    pub fn matches(&self) -> usize {
        self.match_mask.as_ref().map_or(0, |m| m.iter().filter(|&&b| b).count())
    }

    pub fn with_truth(mut self, truth: &[usize]) -> Self {
        self.match_mask = Some(self.recovered.iter().zip(truth).map(|(a, b)| a == b).collect());
        self.truth = Some(truth.to_vec());
        self
    }

    pub fn to_json(&self, vocab: &Vocabulary) -> String {
        let positions: Vec<Position> = self
            .recovered_tokens
            .iter()
            .enumerate()
            .map(|(i, r)| Position {
                recovered: r,
                truth: self.truth.as_ref().map(|t| vocab.tokens[t[i]].as_str()),
                matched: self.match_mask.as_ref().map(|m| m[i]),
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({ "positions": positions })).expect("serialisable")
    }

    /// Recovered tokens separated by spaces; matches with the truth are
    /// wrapped in `[…]`.
    pub fn render(&self) -> String {
        self.recovered_tokens
            .iter()
            .enumerate()
            .map(|(i, t)| match &self.match_mask {
                Some(m) if m[i] => format!("[{t}]"),
                _ => t.clone(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Maps embedding rows (`seq × d`, or `B × seq × d` flattened over positions)
/// to tokens.
///
/// Scores are `E·W⁺` with column `j` divided by `√P_jj`, `P = W W⁺`. An exact
/// embedding row `w_t` then scores `P_tj/√P_jj ≤ √P_tt`, so its argmax is `t`.
/// Ties go to the lowest index.
pub fn recover_tokens(e_recon: &Tensor, vocab: &Vocabulary) -> Result<TextReconstruction> {
    let d = vocab.dim();
    if e_recon.shape().last() != Some(&d) {
        return Err(TextError::Dimension(format!(
            "embedding width {:?} vs vocabulary width {d}",
            e_recon.shape().last()
        )));
    }
    let rows = e_recon.numel() / d;
    let e = e_recon.reshape([rows, d]).expect("rows × d");
    let pinv = pseudoinverse(&vocab.embed)?;
    let v = vocab.len();
    let proj_diag: Vec<f64> = (0..v)
        .map(|j| {
            let row = &vocab.embed.data()[j * d..(j + 1) * d];
            (0..d).map(|k| row[k] * pinv.data()[k * v + j]).sum::<f64>()
        })
        .collect();
    let raw = matmul(&e, &pinv);
    let mut scores = Vec::with_capacity(rows);
    let mut recovered = Vec::with_capacity(rows);
    for r in 0..rows {
        let s: Vec<f64> = (0..v)
            .map(|j| raw.data()[r * v + j] / proj_diag[j].max(f64::MIN_POSITIVE).sqrt())
            .collect();
        let best = s
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (j, &x)| if x > b.1 { (j, x) } else { b })
            .0;
        recovered.push(best);
        scores.push(s);
    }
    Ok(TextReconstruction {
        recovered_tokens: recovered.iter().map(|&i| vocab.tokens[i].clone()).collect(),
        recovered,
        token_scores: scores,
        truth: None,
        match_mask: None,
    })
}

/// Class label used for text batches: token-id sum modulo the class count.
pub fn text_label(ids: &[usize], num_classes: usize) -> usize {
    ids.iter().sum::<usize>() % num_classes
}

/// `n` token ids drawn uniformly from a vocabulary of `vocab_len`.
pub fn random_ids(vocab_len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    (0..n).map(|_| rng.random_range(0..vocab_len)).collect()
}

/// A single-sequence text victim: a classifier over embedded tokens with
/// uniformly initialised weights, and the gradient it shares.
#[derive(Debug, Clone)]
pub struct TextVictim {
    pub spec: ModelSpec,
    pub weights: Weights,
    pub ids: Vec<usize>,
    pub snapshot: GradientSnapshot,
}

impl TextVictim {
    /// `encoder` selects the one-block transformer over the plain linear head.
    pub fn build(vocab: &Vocabulary, ids: &[usize], num_classes: usize, encoder: bool, seed: u64) -> Result<Self> {
        let (n, d) = (ids.len(), vocab.dim());
        if n == 0 {
            return Err(TextError::Dimension("empty token sequence".into()));
        }
        let spec = if encoder {
            ModelSpec::transformer_lite(n, d, vocab.len(), 2, 2 * d, num_classes)
        } else {
            ModelSpec::embedding_head(n, d, vocab.len(), num_classes)
        };
        let attack = |e: crate::model::ModelError| TextError::Attack(AttackError::Model(e));
        let weights = init_weights(&spec, &WeightInit::uniform(seed)).map_err(attack)?;
        let x = vocab
            .embed(ids)?
            .reshape([1, n, d])
            .map_err(|e| TextError::Dimension(e.to_string()))?;
        let y = one_hot(&[text_label(ids, num_classes)], num_classes);
        let snapshot = capture(&spec, &weights, &x, &y).map_err(|e| TextError::Dimension(e.to_string()))?;
        Ok(Self {
            spec,
            weights,
            ids: ids.to_vec(),
            snapshot,
        })
    }

    pub fn attack(&self, vocab: &Vocabulary, cfg: &AttackConfig) -> Result<(TextReconstruction, ReconstructionResult)> {
        run_text_attack(&self.spec, &self.weights, vocab, &self.snapshot, cfg, Some(&self.ids))
    }
}

/// Reconstructs the token embeddings behind `snapshot` and decodes them.
pub fn run_text_attack(
    spec: &ModelSpec,
    weights: &Weights,
    vocab: &Vocabulary,
    snapshot: &GradientSnapshot,
    cfg: &AttackConfig,
    truth: Option<&[usize]>,
) -> Result<(TextReconstruction, ReconstructionResult)> {
    if spec.input_shape.len() != 2 || spec.input_shape[1] != vocab.dim() {
        return Err(TextError::Dimension(format!(
            "model input {:?} does not take width-{} embeddings",
            spec.input_shape,
            vocab.dim()
        )));
    }
    let result = run_attack_in(spec, weights, snapshot, cfg, InputDomain::Embedding)?;
    let mut text = recover_tokens(&result.x_recon, vocab)?;
    if let Some(t) = truth {
        if t.len() != text.recovered.len() {
            return Err(TextError::Dimension(format!(
                "{} truth tokens for {} positions",
                t.len(),
                text.recovered.len()
            )));
        }
        text = text.with_truth(t);
    }
    Ok((text, result))
}
