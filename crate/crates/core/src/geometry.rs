//! Gradient uniqueness scores.
//!
//! For example `j` at iteration `i` the score is `g_j^T S^+ g_j` where
//! `S = sum_{k != j} g_k g_k^T` over the per-example gradients at `theta_i`.
//! Besides the exact definition this module provides the one-factorization
//! variant used for ranking whole datasets, the diagonal surrogate for models
//! too large for a dense Gram matrix, and the mini-batch variant that builds
//! `S` from the other members of one batch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::linalg::{gram, pinv_quadform, PsdSpectrum};

/// Default relative singular-value cutoff for pseudoinverses.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Largest parameter dimension accepted by the dense exact modes.
pub const DEFAULT_MAX_EXACT_DIM: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GnqMode {
    FullExact,
    Diagonal,
    BatchExact,
    BatchDiagonal,
}

impl GnqMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GnqMode::FullExact => "full_exact",
            GnqMode::Diagonal => "diagonal",
            GnqMode::BatchExact => "batch_exact",
            GnqMode::BatchDiagonal => "batch_diagonal",
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, GnqMode::FullExact | GnqMode::BatchExact)
    }
}

/// Per-example gradients at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub iteration: usize,
    pub vectors: Vec<Vec<f64>>,
    pub dim: usize,
}

impl GradientSet {
    pub fn new(iteration: usize, vectors: Vec<Vec<f64>>) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        for v in &vectors {
            if v.len() != dim {
                return Err(AuditError::Shape {
                    expected: dim,
                    actual: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(AuditError::Domain("gradient entries must be finite".into()));
            }
        }
        Ok(GradientSet {
            iteration,
            vectors,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Subset of the gradients, in the given order.
    pub fn select(&self, indices: &[usize]) -> GradientSet {
        GradientSet {
            iteration: self.iteration,
            vectors: indices.iter().map(|&k| self.vectors[k].clone()).collect(),
            dim: self.dim,
        }
    }

    fn check_index(&self, j: usize) -> Result<()> {
        if j >= self.len() {
            return Err(AuditError::Domain(format!(
                "example {j} outside gradient set of size {}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// One example's score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnqScore {
    pub example: usize,
    pub iteration: usize,
    pub value: f64,
    pub mode: GnqMode,
    /// Whether the gradient lies in the range of the Gram matrix it was
    /// scored against. A `false` value is reported, never fatal.
    pub range_ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GramTotal {
    Full(nalgebra::DMatrix<f64>),
    Diagonal(Vec<f64>),
}

/// `S_total = sum_n g_n g_n^T` over `contributing`, dense or diagonal only.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSummary {
    pub mode: GnqMode,
    pub total: GramTotal,
    pub contributing: Vec<usize>,
}

impl GramSummary {
    pub fn dense(grads: &GradientSet, contributing: Vec<usize>, mode: GnqMode) -> Self {
        let s = gram(
            grads.dim,
            contributing.iter().map(|&k| grads.vectors[k].as_slice()),
        );
        GramSummary {
            mode,
            total: GramTotal::Full(s),
            contributing,
        }
    }

    /// Diagonal of the Gram matrix; the scored example's own contribution is
    /// included whenever it is one of `contributing`.
    pub fn diagonal(grads: &GradientSet, contributing: Vec<usize>, mode: GnqMode) -> Self {
        let mut diag = vec![0.0; grads.dim];
        for &k in &contributing {
            for (d, g) in diag.iter_mut().zip(&grads.vectors[k]) {
                *d += g * g;
            }
        }
        GramSummary {
            mode,
            total: GramTotal::Diagonal(diag),
            contributing,
        }
    }

    pub fn diagonal_entries(&self) -> Vec<f64> {
        match &self.total {
            GramTotal::Diagonal(d) => d.clone(),
            GramTotal::Full(s) => s.diagonal().iter().copied().collect(),
        }
    }
}

fn check_dense_capacity(dim: usize) -> Result<()> {
    if dim > DEFAULT_MAX_EXACT_DIM {
        return Err(AuditError::Capacity(format!(
            "exact GNQ needs a dense {dim}x{dim} Gram matrix (cap {DEFAULT_MAX_EXACT_DIM}); use diagonal mode"
        )));
    }
    Ok(())
}

fn exact_against_others(grads: &GradientSet, j: usize, tol: f64, mode: GnqMode) -> GnqScore {
    let others = (0..grads.len())
        .filter(|&k| k != j)
        .map(|k| grads.vectors[k].as_slice());
    let s = gram(grads.dim, others);
    let (value, range_ok) = pinv_quadform(s, &grads.vectors[j], tol);
    GnqScore {
        example: j,
        iteration: grads.iteration,
        value,
        mode,
        range_ok,
    }
}

/// `g_j^T S^+ g_j` with `S` built from every other gradient in the set.
pub fn gnq_exact(grads: &GradientSet, j: usize, tol: f64) -> Result<GnqScore> {
    if grads.len() < 2 {
        return Err(AuditError::InsufficientData(
            "GNQ needs at least two gradients".into(),
        ));
    }
    grads.check_index(j)?;
    check_dense_capacity(grads.dim)?;
    Ok(exact_against_others(grads, j, tol, GnqMode::FullExact))
}

/// Scores every example from one factorization of `S_total`.
///
/// With leverage `h_j = g_j^T S_total^+ g_j`, removing `g_j g_j^T` gives
/// `GNQ_j = h_j / (1 - h_j)`. When `1 - h_j` is too small the downdate loses
/// its precision (and at `h_j = 1` the rank drops), so those examples fall
/// back to a per-example pseudoinverse.
pub fn gnq_all_exact(grads: &GradientSet, tol: f64) -> Result<Vec<GnqScore>> {
    all_exact_with_mode(grads, tol, GnqMode::FullExact)
}

/// Smallest `1 - h_j` the downdate path accepts.
fn downdate_floor(tol: f64) -> f64 {
    tol.sqrt().max(tol)
}

fn all_exact_with_mode(grads: &GradientSet, tol: f64, mode: GnqMode) -> Result<Vec<GnqScore>> {
    if grads.len() < 2 {
        return Err(AuditError::InsufficientData(
            "GNQ needs at least two gradients".into(),
        ));
    }
    check_dense_capacity(grads.dim)?;
    let total = gram(grads.dim, grads.vectors.iter().map(Vec::as_slice));
    let spectrum = PsdSpectrum::new(total, tol);
    let floor = downdate_floor(tol);
    let scores = (0..grads.len())
        .into_par_iter()
        .map(|j| {
            let g = &grads.vectors[j];
            let (h, _) = spectrum.pinv_quadform(g);
            let slack = 1.0 - h;
            if slack >= floor {
                GnqScore {
                    example: j,
                    iteration: grads.iteration,
                    value: (h / slack).max(0.0),
                    mode,
                    range_ok: true,
                }
            } else {
                exact_against_others(grads, j, tol, mode)
            }
        })
        .collect();
    Ok(scores)
}

/// Diagonal surrogate `sum_p g_p^2 / G_p`.
///
/// Coordinates with `G_p = 0` contribute nothing; if the gradient is non-zero
/// there the score is flagged with `range_ok = false`.
pub fn gnq_diagonal(
    summary: &GramSummary,
    g_j: &[f64],
    example: usize,
    iteration: usize,
) -> Result<GnqScore> {
    let diag = summary.diagonal_entries();
    if diag.len() != g_j.len() {
        return Err(AuditError::Shape {
            expected: diag.len(),
            actual: g_j.len(),
        });
    }
    let mut value = 0.0;
    let mut range_ok = true;
    for (&gp, &x) in diag.iter().zip(g_j) {
        if gp > 0.0 {
            value += x * x / gp;
        } else if x != 0.0 {
            range_ok = false;
        }
    }
    Ok(GnqScore {
        example,
        iteration,
        value,
        mode: summary.mode,
        range_ok,
    })
}

/// Diagonal scores for every example against one shared diagonal.
pub fn gnq_all_diagonal(grads: &GradientSet, summary: &GramSummary) -> Result<Vec<GnqScore>> {
    grads
        .vectors
        .iter()
        .enumerate()
        .map(|(j, g)| gnq_diagonal(summary, g, j, grads.iteration))
        .collect()
}

/// `g_j^T S^+ g_j` with `S` built from the other members of one mini-batch.
/// `batch_grads` holds only the batch; `j` indexes into it.
pub fn gnq_batch(batch_grads: &GradientSet, j: usize, tol: f64) -> Result<GnqScore> {
    if batch_grads.len() < 2 {
        return Err(AuditError::InsufficientData(format!(
            "batch GNQ needs at least two batch members, got {}",
            batch_grads.len()
        )));
    }
    batch_grads.check_index(j)?;
    check_dense_capacity(batch_grads.dim)?;
    Ok(exact_against_others(
        batch_grads,
        j,
        tol,
        GnqMode::BatchExact,
    ))
}

/// Batch-mode scores for every pool example: each example is scored against
/// the batch gradients other than its own.
pub fn gnq_all_batch(grads: &GradientSet, batch: &[usize], tol: f64) -> Result<Vec<GnqScore>> {
    if batch.len() < 2 {
        return Err(AuditError::InsufficientData(format!(
            "batch GNQ needs at least two batch members, got {}",
            batch.len()
        )));
    }
    check_dense_capacity(grads.dim)?;
    let scores = (0..grads.len())
        .into_par_iter()
        .map(|j| {
            let others = batch
                .iter()
                .filter(|&&k| k != j)
                .map(|&k| grads.vectors[k].as_slice());
            let s = gram(grads.dim, others);
            let (value, range_ok) = pinv_quadform(s, &grads.vectors[j], tol);
            GnqScore {
                example: j,
                iteration: grads.iteration,
                value,
                mode: GnqMode::BatchExact,
                range_ok,
            }
        })
        .collect();
    Ok(scores)
}

/// `pdet(A + q q^T) = pdet(A) (1 + q^T A^+ q)` for `q` in `range(A)`.
pub fn pdet_rank_one(pdet_a: f64, a_pinv_quadform: f64) -> f64 {
    pdet_a * (1.0 + a_pinv_quadform)
}

/// `f(x) = (1 + c1^2 x) / sqrt(1 + c2^2 x)`, increasing on `x >= 0` whenever
/// `2 c1^2 > c2^2`.
pub fn leakage_growth_factor(x: f64, c1_sq: f64, c2_sq: f64) -> f64 {
    (1.0 + c1_sq * x) / (1.0 + c2_sq * x).sqrt()
}
