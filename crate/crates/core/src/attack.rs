//! Label-recovery attacks run by the passive party on the gradient rows it
//! receives, plus the spectral outlier score reused as a real-vs-synthetic
//! detector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::auc;
use crate::numerics::{dot_unchecked, mean_rows, norm2_unchecked, top_singular_direction, Mat, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Inner,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Norm,
    Hint { n_hints: usize, similarity: Similarity },
    Spectral,
}

impl AttackKind {
    /// Column name suffix, e.g. `norm`, `hint5_inner`.
    pub fn name(&self) -> String {
        match self {
            AttackKind::Norm => "norm".into(),
            AttackKind::Hint {
                n_hints,
                similarity,
            } => {
                let s = match similarity {
                    Similarity::Inner => "inner",
                    Similarity::Cosine => "cosine",
                };
                format!("hint{n_hints}_{s}")
            }
            AttackKind::Spectral => "spectral".into(),
        }
    }
}

/// One `[[attacks]]` entry of the experiment config.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub attack: String,
    pub n_hints: Option<usize>,
    pub similarity: Option<Similarity>,
}

impl AttackSection {
    pub fn to_kind(&self) -> Result<AttackKind> {
        match self.attack.as_str() {
            "norm" => Ok(AttackKind::Norm),
            "spectral" => Ok(AttackKind::Spectral),
            "hint" => {
                let n_hints = self.n_hints.unwrap_or(5);
                if n_hints == 0 {
                    return Err(Error::Config("n_hints must be >= 1".into()));
                }
                Ok(AttackKind::Hint {
                    n_hints,
                    similarity: self.similarity.unwrap_or(Similarity::Inner),
                })
            }
            other => Err(Error::Config(format!("unknown attack `{other}`"))),
        }
    }
}

/// Score = row norm.
pub fn norm_attack(grads: &Mat) -> Vec<f64> {
    grads.row_iter().map(norm2_unchecked).collect()
}

fn similarity(a: &[f64], b: &[f64], sim: Similarity) -> f64 {
    let ip = dot_unchecked(a, b);
    match sim {
        Similarity::Inner => ip,
        Similarity::Cosine => {
            let n = norm2_unchecked(a) * norm2_unchecked(b);
            if n == 0.0 {
                0.0
            } else {
                ip / n
            }
        }
    }
}

/// Scores every non-hint row by its largest similarity to any hint row.
/// Returns `(row index, score)` pairs in row order.
pub fn hint_attack(grads: &Mat, hints: &[usize], sim: Similarity) -> Result<Vec<(usize, f64)>> {
    if hints.is_empty() {
        return Err(Error::arg("hint attack needs at least one hint"));
    }
    if let Some(&h) = hints.iter().find(|&&h| h >= grads.rows()) {
        return Err(Error::arg(format!("hint index {h} out of range")));
    }
    Ok((0..grads.rows())
        .filter(|i| !hints.contains(i))
        .map(|i| {
            let s = hints
                .iter()
                .map(|&h| similarity(grads.row(i), grads.row(h), sim))
                .fold(f64::NEG_INFINITY, f64::max);
            (i, s)
        })
        .collect())
}

/// Outlier score `|<x_i - mean, v>|` with `v` the top principal direction.
pub fn spectral_attack(x: &Mat) -> Result<Vec<f64>> {
    if x.rows() < 3 {
        return Err(Error::arg("spectral attack needs at least three rows"));
    }
    let mu = mean_rows(x)?;
    let v = top_singular_direction(x, 1000, 1e-9)?;
    Ok(x
        .row_iter()
        .map(|r| {
            r.iter()
                .zip(&mu)
                .zip(&v)
                .map(|((a, m), vi)| (a - m) * vi)
                .sum::<f64>()
                .abs()
        })
        .collect())
}

/// Spectral detector over the joint (embedding, label) distribution: the
/// label is appended as one extra coordinate scaled by the embeddings'
/// average coordinate standard deviation.
pub fn joint_spectral_attack(embeddings: &Mat, labels: &[f64]) -> Result<Vec<f64>> {
    let mu = mean_rows(embeddings)?;
    let n = embeddings.rows() as f64;
    let d = embeddings.cols().max(1) as f64;
    let mut var_sum = 0.0;
    for r in embeddings.row_iter() {
        for (a, m) in r.iter().zip(&mu) {
            var_sum += (a - m) * (a - m);
        }
    }
    let scale = (var_sum / (n * d)).sqrt();
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let col: Vec<f64> = labels.iter().map(|y| y * scale).collect();
    spectral_attack(&embeddings.with_column(&col)?)
}

/// AUC of attack scores against the true labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeakAuc {
    pub auc: f64,
    /// true when the AUC is undefined (single class) and 0.5 was reported
    pub degraded: bool,
}

pub fn leak_auc(scores: &[f64], labels: &[u8]) -> Result<LeakAuc> {
    match auc(scores, labels) {
        Ok(a) => Ok(LeakAuc {
            auc: a,
            degraded: false,
        }),
        Err(Error::UndefinedAuc(_)) => Ok(LeakAuc {
            auc: 0.5,
            degraded: true,
        }),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub scores: Vec<f64>,
    pub attacked_indices: Vec<usize>,
    pub leak: LeakAuc,
}

/// Runs one attack on a received gradient batch and scores it against the
/// true labels. Hints are drawn fresh from the batch's positives with `rng`.
pub fn run_attack(kind: AttackKind, grads: &Mat, labels: &[u8], rng: &mut Rng) -> Result<AttackResult> {
    if labels.len() != grads.rows() {
        return Err(Error::arg("labels and gradient rows differ"));
    }
    let all: Vec<usize> = (0..grads.rows()).collect();
    match kind {
        AttackKind::Norm => {
            let scores = norm_attack(grads);
            let leak = leak_auc(&scores, labels)?;
            Ok(AttackResult {
                scores,
                attacked_indices: all,
                leak,
            })
        }
        AttackKind::Spectral => {
            let scores = match spectral_attack(grads) {
                Ok(s) => s,
                Err(Error::DegenerateData(_)) => vec![0.0; grads.rows()],
                Err(e) => return Err(e),
            };
            let leak = leak_auc(&scores, labels)?;
            Ok(AttackResult {
                scores,
                attacked_indices: all,
                leak,
            })
        }
        AttackKind::Hint {
            n_hints,
            similarity,
        } => {
            let mut pos: Vec<usize> = all.iter().copied().filter(|&i| labels[i] == 1).collect();
            if pos.len() <= n_hints {
                return Ok(AttackResult {
                    scores: Vec::new(),
                    attacked_indices: Vec::new(),
                    leak: LeakAuc {
                        auc: 0.5,
                        degraded: true,
                    },
                });
            }
            rng.shuffle(&mut pos);
            pos.truncate(n_hints);
            let scored = hint_attack(grads, &pos, similarity)?;
            let (idx, scores): (Vec<usize>, Vec<f64>) = scored.into_iter().unzip();
            let sub_labels: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            let leak = leak_auc(&scores, &sub_labels)?;
            Ok(AttackResult {
                scores,
                attacked_indices: idx,
                leak,
            })
        }
    }
}
