//! Reconstruction quality: MSE, PSNR, global SSIM and batch assignment.

use serde::{Serialize, Serializer};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("batch size mismatch: {0} vs {1}")]
    BatchSize(usize, usize),
    #[error("empty batch")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricError>;

const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Dynamic range of normalised pixels.
const L: f64 = 1.0;
/// Batches up to this size are matched by exhaustive search.
pub const EXHAUSTIVE_MAX: usize = 8;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MetricError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

pub fn mse(recon: &Tensor, truth: &Tensor) -> Result<f64> {
    same_shape(recon, truth)?;
    Ok(recon.sq_dist(truth) / recon.numel().max(1) as f64)
}

/// Peak signal-to-noise ratio in dB; `+∞` for a perfect match.
pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * max_value.log10() - 10.0 * mse.log10()
    }
}

pub fn psnr(recon: &Tensor, truth: &Tensor, max_value: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(recon, truth)?, max_value))
}

fn ssim_plane(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    let c1 = (K1 * L).powi(2);
    let c2 = (K2 * L).powi(2);
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Single-window SSIM with whole-image population moments. For `C×H×W`
/// inputs the value is the mean over channels; other shapes are treated as
/// one plane.
pub fn ssim(recon: &Tensor, truth: &Tensor) -> Result<f64> {
    same_shape(recon, truth)?;
    if recon.numel() == 0 {
        return Err(MetricError::Empty);
    }
    let channels = if recon.ndim() == 3 { recon.shape()[0] } else { 1 };
    let plane = recon.numel() / channels;
    let total: f64 = recon
        .data()
        .chunks(plane)
        .zip(truth.data().chunks(plane))
        .map(|(a, b)| ssim_plane(a, b))
        .sum();
    Ok(total / channels as f64)
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemMetrics {
    pub mse: f64,
    #[serde(rename = "psnr_db", serialize_with = "ser_db")]
    pub psnr: f64,
    pub ssim: f64,
}

impl ItemMetrics {
    pub fn compute(recon: &Tensor, truth: &Tensor) -> Result<Self> {
        let m = mse(recon, truth)?;
        Ok(Self {
            mse: m,
            psnr: psnr_from_mse(m, 1.0),
            ssim: ssim(recon, truth)?,
        })
    }
}

/// Post-assignment metrics for a batch; `assignment[i]` is the truth index
/// matched to reconstruction `i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub mse: f64,
    #[serde(rename = "psnr_db", serialize_with = "ser_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub per_item: Vec<ItemMetrics>,
    pub assignment: Vec<usize>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Calls `f` with every permutation of `0..n` (Heap's algorithm).
pub fn for_each_permutation(n: usize, mut f: impl FnMut(&[usize])) {
    let mut p: Vec<usize> = (0..n).collect();
    let mut c = vec![0; n];
    f(&p);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            f(&p);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Total MSE of an assignment under a cost matrix `cost[recon][truth]`.
pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

fn best_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n <= EXHAUSTIVE_MAX {
        let mut best = (f64::INFINITY, (0..n).collect::<Vec<_>>());
        for_each_permutation(n, |p| {
            let c = assignment_cost(cost, p);
            if c < best.0 {
                best = (c, p.to_vec());
            }
        });
        best.1
    } else {
        let mut taken = vec![false; n];
        let mut out = vec![0; n];
        for (i, row) in cost.iter().enumerate() {
            let j = (0..n)
                .filter(|&j| !taken[j])
                .min_by(|&a, &b| row[a].total_cmp(&row[b]))
                .expect("an unmatched item remains");
            taken[j] = true;
            out[i] = j;
        }
        out
    }
}

/// Pairwise per-item MSE between a reconstructed and a true batch.
pub fn cost_matrix(recon: &[Tensor], truth: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    recon
        .iter()
        .map(|r| truth.iter().map(|t| mse(r, t)).collect())
        .collect()
}

/// Aligns reconstructed items to truth items by minimum total MSE, then
/// scores each pair. Batch metrics are per-item means.
pub fn match_batch(recon: &[Tensor], truth: &[Tensor]) -> Result<MetricReport> {
    if recon.len() != truth.len() {
        return Err(MetricError::BatchSize(recon.len(), truth.len()));
    }
    if recon.is_empty() {
        return Err(MetricError::Empty);
    }
    let cost = cost_matrix(recon, truth)?;
    let assignment = best_assignment(&cost);
    let per_item = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| ItemMetrics::compute(&recon[i], &truth[j]))
        .collect::<Result<Vec<_>>>()?;
    let n = per_item.len() as f64;
    let mse = per_item.iter().map(|m| m.mse).sum::<f64>() / n;
    Ok(MetricReport {
        mse,
        psnr: psnr_from_mse(mse, 1.0),
        ssim: per_item.iter().map(|m| m.ssim).sum::<f64>() / n,
        per_item,
        assignment,
    })
}

/// Splits a `B×…` tensor into its `B` items.
pub fn unbatch(t: &Tensor) -> Vec<Tensor> {
    (0..t.shape()[0]).map(|i| t.index_outer(i)).collect()
}
