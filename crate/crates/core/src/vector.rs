//! Dense embedding primitives: unit vectors, column-stacked embedding
//! matrices, exact top-k search and orthogonal projection.
//!
//! Everything here is exact and single-pass; there is no approximate index.
//! Computation is `f64` throughout.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norm below which a vector is treated as zero by [`normalize`].
pub const ZERO_NORM: f64 = 1e-12;

/// Residual norm below which a basis vector is considered dependent on the
/// vectors already accepted during Gram-Schmidt.
pub const DEPENDENT_NORM: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VectorError {
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("vector contains a non-finite entry at position {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("k = {k} exceeds the number of candidates ({len})")]
    KTooLarge { k: usize, len: usize },
    #[error("k must be positive")]
    InvalidK,
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("embedding dimension must be positive")]
    ZeroDimension,
}

/// A finite real vector. Produced either by [`normalize`] (unit norm) or by
/// [`EmbeddingVector::from_raw`] when the caller only needs finiteness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn from_raw(values: Vec<f64>) -> Result<Self, VectorError> {
        if values.is_empty() {
            return Err(VectorError::ZeroDimension);
        }
        if let Some(pos) = values.iter().position(|x| !x.is_finite()) {
            return Err(VectorError::NonFinite(pos));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for EmbeddingVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Scale `v` to unit L2 norm.
pub fn normalize(v: &[f64]) -> Result<EmbeddingVector, VectorError> {
    if v.is_empty() {
        return Err(VectorError::ZeroDimension);
    }
    if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
        return Err(VectorError::NonFinite(pos));
    }
    let n = norm(v);
    if n < ZERO_NORM {
        return Err(VectorError::ZeroVector);
    }
    Ok(EmbeddingVector(v.iter().map(|x| x / n).collect()))
}

/// `1 - xᵀy / (‖x‖‖y‖)`, in `[0, 2]`.
pub fn cosine_distance(x: &[f64], y: &[f64]) -> Result<f64, VectorError> {
    check_dim(x.len(), y.len())?;
    let denom = norm(x) * norm(y);
    if denom < ZERO_NORM {
        return Err(VectorError::ZeroVector);
    }
    Ok((1.0 - dot(x, y) / denom).clamp(0.0, 2.0))
}

/// Cosine similarity; equal to the dot product for unit vectors.
pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64, VectorError> {
    cosine_distance(x, y).map(|d| 1.0 - d)
}

fn check_dim(expected: usize, found: usize) -> Result<(), VectorError> {
    if expected != found {
        Err(VectorError::DimensionMismatch { expected, found })
    } else {
        Ok(())
    }
}

/// Column-stacked embeddings (`d × count`) with a parallel id list.
///
/// Columns are stored contiguously, so column `j` occupies
/// `data[j*dim .. (j+1)*dim]`. This is also the on-disk row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Build from already-validated columns.
    pub fn from_columns<I, S>(dim: usize, columns: I) -> Result<Self, VectorError>
    where
        I: IntoIterator<Item = (S, EmbeddingVector)>,
        S: Into<String>,
    {
        let mut mat = Self::new(dim);
        for (id, v) in columns {
            mat.push(id, v)?;
        }
        Ok(mat)
    }

    /// Build from a flat column-major buffer, validating finiteness and ids.
    pub fn from_flat(dim: usize, ids: Vec<String>, data: Vec<f64>) -> Result<Self, VectorError> {
        if dim == 0 {
            return Err(VectorError::ZeroDimension);
        }
        check_dim(ids.len() * dim, data.len())?;
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(VectorError::NonFinite(pos));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(VectorError::DuplicateId(id.clone()));
            }
        }
        Ok(Self { dim, ids, data })
    }

    pub fn push(&mut self, id: impl Into<String>, v: EmbeddingVector) -> Result<(), VectorError> {
        if self.dim == 0 {
            return Err(VectorError::ZeroDimension);
        }
        check_dim(self.dim, v.dim())?;
        let id = id.into();
        if self.ids.contains(&id) {
            return Err(VectorError::DuplicateId(id));
        }
        self.ids.push(id);
        self.data.extend_from_slice(&v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// New matrix holding the given columns, in the given order.
    pub fn select(&self, positions: &[usize]) -> Self {
        let mut data = Vec::with_capacity(positions.len() * self.dim);
        let mut ids = Vec::with_capacity(positions.len());
        for &p in positions {
            ids.push(self.ids[p].clone());
            data.extend_from_slice(self.column(p));
        }
        Self {
            dim: self.dim,
            ids,
            data,
        }
    }

    /// `Mᵀ q`: one dot product per column.
    pub fn similarities(&self, q: &[f64]) -> Result<Vec<f64>, VectorError> {
        check_dim(self.dim, q.len())?;
        Ok(self.columns().take(self.len()).map(|c| dot(c, q)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredIndex {
    pub index: usize,
    pub score: f64,
}

/// Compares scores numerically, so `-0.0 == 0.0`; falls back to `total_cmp`
/// when either side is NaN.
pub fn score_cmp(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or_else(|| a.total_cmp(&b))
}

/// Descending by score, ascending by index on ties.
pub fn rank_order(a: &ScoredIndex, b: &ScoredIndex) -> Ordering {
    score_cmp(b.score, a.score).then_with(|| a.index.cmp(&b.index))
}

/// The `k` highest scores in descending order; equal scores keep ascending
/// index order.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<ScoredIndex>, VectorError> {
    if k == 0 {
        return Err(VectorError::InvalidK);
    }
    if k > scores.len() {
        return Err(VectorError::KTooLarge { k, len: scores.len() });
    }
    let mut all: Vec<ScoredIndex> = scores
        .iter()
        .enumerate()
        .map(|(index, &score)| ScoredIndex { index, score })
        .collect();
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, rank_order);
        all.truncate(k);
    }
    all.sort_unstable_by(rank_order);
    Ok(all)
}

/// Full descending argsort with the same tie rule as [`top_k`].
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| score_cmp(scores[b], scores[a]).then(a.cmp(&b)));
    idx
}

/// Incrementally built orthonormal basis (modified Gram-Schmidt).
#[derive(Debug, Clone)]
pub struct OrthoBasis {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl OrthoBasis {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: Vec::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.vectors.len()
    }

    /// Orthonormalize `v` against the basis and append it. Returns `false`
    /// when `v` is (numerically) inside the current span and was skipped.
    pub fn push(&mut self, v: &[f64]) -> Result<bool, VectorError> {
        check_dim(self.dim, v.len())?;
        let mut w = v.to_vec();
        self.subtract_projection(&mut w);
        // second pass keeps orthogonality tight for nearly dependent inputs
        self.subtract_projection(&mut w);
        let n = norm(&w);
        if n < DEPENDENT_NORM {
            return Ok(false);
        }
        w.iter_mut().for_each(|x| *x /= n);
        self.vectors.push(w);
        Ok(true)
    }

    /// `q` minus its projection onto the span of the basis.
    pub fn residual(&self, q: &[f64]) -> Result<Vec<f64>, VectorError> {
        check_dim(self.dim, q.len())?;
        let mut r = q.to_vec();
        self.subtract_projection(&mut r);
        Ok(r)
    }

    fn subtract_projection(&self, w: &mut [f64]) {
        for e in &self.vectors {
            let c = dot(e, w);
            w.iter_mut().zip(e).for_each(|(x, b)| *x -= c * b);
        }
    }
}

/// Residual of `q0` after removing its projection onto `span(basis)`.
///
/// The residual is not renormalized.
pub fn project_orthogonal<V: AsRef<[f64]>>(q0: &[f64], basis: &[V]) -> Result<Vec<f64>, VectorError> {
    let mut ortho = OrthoBasis::new(q0.len());
    for b in basis {
        ortho.push(b.as_ref())?;
    }
    ortho.residual(q0)
}
