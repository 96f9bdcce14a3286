//! Labelled image sets: synthetic patterns and image directories.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::one_hot;
use crate::pnm::{self, PnmError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `C×H×W` items, all the same shape.
    pub items: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item_shape(&self) -> &[usize] {
        self.items[0].shape()
    }

    /// Stacked inputs and one-hot labels for the given indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let xs: Vec<Tensor> = idx.iter().map(|&i| self.items[i].clone()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::stack(&xs).expect("dataset items share a shape"),
            one_hot(&labels, self.num_classes),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Stripes,
    Checkerboard,
    Disk,
    Gradient,
}

impl PatternKind {
    pub const ALL: [PatternKind; 4] = [
        PatternKind::Stripes,
        PatternKind::Checkerboard,
        PatternKind::Disk,
        PatternKind::Gradient,
    ];
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("pattern size must be 4, 8 or 16, got {0}")]
    Size(usize),
    #[error("no kinds or samples requested")]
    Empty,
    #[error("{path}: {source}")]
    Image { path: String, source: PnmError },
    #[error("image directory: {0}")]
    Io(#[from] std::io::Error),
    #[error("image {0} has a different shape from the first image")]
    ShapeMismatch(String),
}

fn render(kind: PatternKind, size: usize, variant: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = size as f64;
    match kind {
        PatternKind::Checkerboard => {
            let (cell, phase) = if variant == 0 {
                (1, 0)
            } else {
                (rng.random_range(1..=(size / 4).max(1)), rng.random_range(0..2))
            };
            Tensor::from_fn([1, size, size], |i| {
                let (y, x) = (i / size, i % size);
                ((y / cell + x / cell + phase) % 2) as f64
            })
        }
        PatternKind::Stripes => {
            let (vertical, period, phase) = if variant == 0 {
                (true, 2, 0)
            } else {
                let period = rng.random_range(2..=(size / 2).max(2));
                (rng.random_bool(0.5), period, rng.random_range(0..period))
            };
            Tensor::from_fn([1, size, size], |i| {
                let (y, x) = (i / size, i % size);
                let t = if vertical { x } else { y };
                if ((t + phase) % period) < period.div_ceil(2) {
                    1.0
                } else {
                    0.0
                }
            })
        }
        PatternKind::Disk => {
            let (cy, cx, r) = if variant == 0 {
                ((n - 1.0) / 2.0, (n - 1.0) / 2.0, n / 3.0)
            } else {
                (
                    rng.random_range(0.25 * n..0.75 * n),
                    rng.random_range(0.25 * n..0.75 * n),
                    rng.random_range(0.2 * n..0.4 * n),
                )
            };
            Tensor::from_fn([1, size, size], |i| {
                let (y, x) = ((i / size) as f64, (i % size) as f64);
                if (y - cy).powi(2) + (x - cx).powi(2) <= r * r {
                    1.0
                } else {
                    0.0
                }
            })
        }
        PatternKind::Gradient => {
            let theta: f64 = if variant == 0 {
                0.0
            } else {
                rng.random_range(0.0..std::f64::consts::TAU)
            };
            let (c, s) = (theta.cos(), theta.sin());
            let half = (n - 1.0) / 2.0;
            let span = (c.abs() + s.abs()) * half.max(0.5);
            Tensor::from_fn([1, size, size], |i| {
                let (y, x) = ((i / size) as f64 - half, (i % size) as f64 - half);
                (0.5 + 0.5 * (c * x + s * y) / span).clamp(0.0, 1.0)
            })
        }
    }
}

/// Deterministic synthetic classes, one per entry of `kinds`, with
/// `per_class` samples each. The first sample of every class is the
/// canonical pattern (e.g. a pixel-alternating checkerboard); the rest are
/// seeded random variants.
pub fn builtin_patterns(
    kinds: &[PatternKind],
    size: usize,
    per_class: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    if ![4, 8, 16].contains(&size) {
        return Err(DataError::Size(size));
    }
    if kinds.is_empty() || per_class == 0 {
        return Err(DataError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(kinds.len() * per_class);
    let mut labels = Vec::with_capacity(items.capacity());
    for v in 0..per_class {
        for (label, &kind) in kinds.iter().enumerate() {
            items.push(render(kind, size, v, &mut rng));
            labels.push(label);
        }
    }
    Ok(Dataset {
        items,
        labels,
        num_classes: kinds.len(),
    })
}

/// Loads every `.pgm`/`.ppm` in `dir`, sorted by file name. A file name that
/// starts with digits followed by `_` takes that number as its label,
/// otherwise the label is 0.
pub fn load_image_dir(dir: impl AsRef<Path>, num_classes: usize) -> Result<Dataset, DataError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DataError::Empty);
    }
    let mut items = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let shown = p.display().to_string();
        let img = pnm::load_image(&p).map_err(|source| DataError::Image {
            path: shown.clone(),
            source,
        })?;
        if let Some(first) = items.first() {
            if Tensor::shape(first) != img.shape() {
                return Err(DataError::ShapeMismatch(shown));
            }
        }
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let label = stem
            .split_once('_')
            .and_then(|(n, _)| n.parse::<usize>().ok())
            .unwrap_or(0)
            % num_classes.max(1);
        items.push(img);
        labels.push(label);
    }
    Ok(Dataset {
        items,
        labels,
        num_classes,
    })
}
