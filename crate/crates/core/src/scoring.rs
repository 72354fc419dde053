//! Pooled embeddings, the maximum-likelihood Gaussian and Mahalanobis scoring.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{seconds_to_samples, Clip, Split};
use crate::dsp::make_input_features;
use crate::metrics::ScoredClip;
use crate::model::{ModelError, SeparatorNet};

pub type Result<T> = std::result::Result<T, ScoringError>;

#[derive(Error, Debug)]
pub enum ScoringError {
    #[error("clip {id:?} has {have} samples, shorter than one {needed}-sample segment")]
    ClipTooShort { id: String, needed: usize, have: usize },
    #[error("need at least 2 fitting vectors, found {0}")]
    TooFewVectors(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite embedding value")]
    NonFinite,
    #[error("no segment rows to score")]
    NoSegments,
    #[error("regularised covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("duplicate embedding row ({0:?}, {1})")]
    DuplicateRow(String, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub clip_id: String,
    pub segment: usize,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub machine_type: String,
    pub dim: usize,
    pub source: Split,
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingSet {
    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.iter().map(|r| r.vector.as_slice())
    }

    /// Rows grouped by clip, in first-appearance order.
    pub fn by_clip(&self) -> Vec<(&str, Vec<&[f64]>)> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut groups: Vec<(&str, Vec<&[f64]>)> = Vec::new();
        for r in &self.rows {
            let i = *index.entry(r.clip_id.as_str()).or_insert_with(|| {
                groups.push((r.clip_id.as_str(), Vec::new()));
                groups.len() - 1
            });
            groups[i].1.push(&r.vector);
        }
        groups
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip_id,segment");
        for k in 0..self.dim {
            let _ = write!(out, ",e{k}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.clip_id, r.segment);
            for v in &r.vector {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Consecutive non-overlapping windows of `len` samples; a shorter tail is dropped.
pub fn segments(samples: &[f64], len: usize) -> impl Iterator<Item = &[f64]> {
    samples.chunks_exact(len.max(1))
}

pub fn extract_embeddings(
    net: &SeparatorNet,
    clips: &[Clip],
    machine_type: &str,
    source: Split,
    segment_seconds: f64,
) -> Result<EmbeddingSet> {
    let seg = seconds_to_samples(segment_seconds);
    let plan = net.stft_plan();
    let compression = net.config().input_compression;
    let mut rows = Vec::new();
    for clip in clips {
        if seg == 0 || clip.samples.len() < seg {
            return Err(ScoringError::ClipTooShort {
                id: clip.meta.id.clone(),
                needed: seg,
                have: clip.samples.len(),
            });
        }
        for (k, s) in segments(&clip.samples, seg).enumerate() {
            let spec = plan.stft(s).map_err(ModelError::from)?;
            let vector = net.embed(&make_input_features(&spec, compression))?;
            rows.push(EmbeddingRow {
                clip_id: clip.meta.id.clone(),
                segment: k,
                vector,
            });
        }
    }
    Ok(EmbeddingSet {
        machine_type: machine_type.to_string(),
        dim: net.config().embedding_dim(),
        source,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    pub mean: DVector<f64>,
    /// Maximum-likelihood covariance (divisor N), before the ridge.
    pub covariance: DMatrix<f64>,
    pub ridge: f64,
    /// `(Σ + εI)⁻¹`
    pub precision: DMatrix<f64>,
    pub n_fit: usize,
}

impl GaussianModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Spectral condition number of `Σ + εI`.
    pub fn condition_number(&self) -> f64 {
        let reg = &self.covariance + DMatrix::identity(self.dim(), self.dim()) * self.ridge;
        let eig = reg.symmetric_eigenvalues();
        let max = eig.iter().cloned().fold(f64::MIN, f64::max);
        let min = eig.iter().cloned().fold(f64::MAX, f64::min);
        max / min
    }
}

/// Fits mean, ML covariance and precision with ridge `ridge_rel · trace(Σ) / dim`.
///
/// When every vector is identical the trace vanishes and the ridge falls back to `ridge_rel`.
pub fn fit_gaussian<'a>(vectors: impl IntoIterator<Item = &'a [f64]>, ridge_rel: f64) -> Result<GaussianModel> {
    let vectors: Vec<&[f64]> = vectors.into_iter().collect();
    let n = vectors.len();
    if n < 2 {
        return Err(ScoringError::TooFewVectors(n));
    }
    let dim = vectors[0].len();
    for v in &vectors {
        if v.len() != dim {
            return Err(ScoringError::DimensionMismatch {
                expected: dim,
                found: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ScoringError::NonFinite);
        }
    }
    let x = DMatrix::from_fn(n, dim, |i, j| vectors[i][j]);
    let mean = DVector::from_fn(dim, |j, _| x.column(j).sum() / n as f64);
    let centred = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
    let mut covariance = centred.tr_mul(&centred) / n as f64;
    // exact symmetry
    for i in 0..dim {
        for j in 0..i {
            let v = 0.5 * (covariance[(i, j)] + covariance[(j, i)]);
            covariance[(i, j)] = v;
            covariance[(j, i)] = v;
        }
    }
    let scale = covariance.trace() / dim as f64;
    let ridge = ridge_rel * if scale > 0.0 { scale } else { 1.0 };
    let reg = &covariance + DMatrix::identity(dim, dim) * ridge;
    let precision = match reg.clone().cholesky() {
        Some(c) => c.inverse(),
        None => reg.try_inverse().ok_or(ScoringError::NotPositiveDefinite)?,
    };
    Ok(GaussianModel {
        mean,
        covariance,
        ridge,
        precision,
        n_fit: n,
    })
}

pub fn mahalanobis(model: &GaussianModel, x: &[f64]) -> Result<f64> {
    if x.len() != model.dim() {
        return Err(ScoringError::DimensionMismatch {
            expected: model.dim(),
            found: x.len(),
        });
    }
    let d = DVector::from_fn(x.len(), |i, _| x[i] - model.mean[i]);
    let q = d.dot(&(&model.precision * &d));
    Ok(q.max(0.0).sqrt())
}

pub fn score_clip(model: &GaussianModel, rows: &[&[f64]], aggregation: Aggregation) -> Result<f64> {
    if rows.is_empty() {
        return Err(ScoringError::NoSegments);
    }
    let d: Vec<f64> = rows.iter().map(|r| mahalanobis(model, r)).collect::<Result<_>>()?;
    Ok(match aggregation {
        Aggregation::Mean => d.iter().sum::<f64>() / d.len() as f64,
        Aggregation::Max => d.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Clip-level scores for every clip of `set` that has test metadata in `clips`.
pub fn score_set(model: &GaussianModel, set: &EmbeddingSet, clips: &[Clip], aggregation: Aggregation) -> Result<Vec<ScoredClip>> {
    let meta: HashMap<&str, &Clip> = clips.iter().map(|c| (c.meta.id.as_str(), c)).collect();
    set.by_clip()
        .into_iter()
        .filter_map(|(id, rows)| meta.get(id).map(|c| (c, rows)))
        .map(|(c, rows)| {
            Ok(ScoredClip {
                clip_id: c.meta.id.clone(),
                machine_type: c.meta.machine_type.clone(),
                domain: c.meta.domain,
                label: c.meta.label,
                score: score_clip(model, &rows, aggregation)?,
            })
        })
        .collect()
}
