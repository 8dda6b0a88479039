//! Shared data model: token bundles, score vectors, selection results and
//! compression reports.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::cost::ModelConfig;
use crate::error::{Error, Result};

/// Dense row-major matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds a matrix from equally sized rows. `cols` is needed for the
    /// zero-row case.
    pub fn from_rows<R: AsRef<[f32]>>(cols: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch(format!("row {i} has {} values, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bits_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape() && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Dot product accumulated in `f64`, left to right.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0f64, |acc, (&x, &y)| acc + f64::from(x) * f64::from(y))
}

/// Affine map from the visual-token space (dimension `D`) into the text
/// embedding space (dimension `Dt`): `y = weight · x + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMap {
    /// `Dt × D`.
    pub weight: Matrix,
    /// Length `Dt` when present.
    pub bias: Option<Vec<f32>>,
}

impl ProjectionMap {
    pub fn new(weight: Matrix, bias: Option<Vec<f32>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.rows() {
                return Err(Error::DimensionMismatch(format!(
                    "projection bias has {} entries, weight has {} rows",
                    b.len(),
                    weight.rows()
                )));
            }
        }
        Ok(ProjectionMap { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// A sequence of visual token embeddings plus the context needed to score
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBundle {
    /// `N × D`, one row per visual token.
    pub tokens: Matrix,
    /// Class token, length `D`.
    pub cls: Option<Vec<f32>>,
    /// Global text embedding, length `Dt`.
    pub text: Option<Vec<f32>>,
    pub proj: Option<ProjectionMap>,
    /// Position of each row in the uncompressed token sequence.
    pub original_indices: Vec<usize>,
    /// Patch grid `(rows, cols)` with `rows * cols == N`.
    pub grid: Option<(usize, usize)>,
    /// Free-form provenance, e.g. the generator that produced the bundle.
    pub metadata: BTreeMap<String, String>,
}

impl TokenBundle {
    pub fn new(tokens: Matrix, cls: Vec<f32>) -> Self {
        let n = tokens.rows();
        TokenBundle {
            tokens,
            cls: Some(cls),
            text: None,
            proj: None,
            original_indices: (0..n).collect(),
            grid: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_text(mut self, text: Vec<f32>) -> Self {
        self.text = Some(text);
        self
    }

    pub fn with_proj(mut self, proj: ProjectionMap) -> Self {
        self.proj = Some(proj);
        self
    }

    pub fn with_grid(mut self, rows: usize, cols: usize) -> Self {
        self.grid = Some((rows, cols));
        self
    }

    pub fn with_original_indices(mut self, idx: Vec<usize>) -> Self {
        self.original_indices = idx;
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Reorders rows so original indices ascend. Returns the bundle
    /// unchanged when already sorted.
    pub fn canonical(&self) -> std::borrow::Cow<'_, TokenBundle> {
        if self.original_indices.windows(2).all(|w| w[0] < w[1]) {
            return std::borrow::Cow::Borrowed(self);
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| self.original_indices[i]);
        let mut b = self.clone();
        b.tokens = self.tokens.select_rows(&order);
        b.original_indices = order.iter().map(|&i| self.original_indices[i]).collect();
        std::borrow::Cow::Owned(b)
    }
}

/// Checks every structural invariant of a bundle.
///
/// Original indices must be unique but need not be sorted; files on disk
/// are additionally required to be strictly increasing by the reader.
pub fn validate_bundle(bundle: &TokenBundle) -> Result<()> {
    let (n, d) = bundle.tokens.shape();
    if n == 0 {
        return Err(Error::EmptyBundle);
    }
    if d == 0 {
        return Err(Error::DimensionMismatch("token dimension is zero".into()));
    }
    if !bundle.tokens.all_finite() {
        return Err(Error::NonFiniteValue("tokens"));
    }
    if let Some(cls) = &bundle.cls {
        if cls.len() != d {
            return Err(Error::DimensionMismatch(format!("class token has {} entries, tokens have {d}", cls.len())));
        }
        if !cls.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteValue("cls"));
        }
    }
    if let Some(text) = &bundle.text {
        if text.is_empty() {
            return Err(Error::DimensionMismatch("text embedding is empty".into()));
        }
        if !text.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteValue("text"));
        }
        if text.len() != d && bundle.proj.is_none() {
            return Err(Error::DimensionMismatch(format!(
                "text has {} entries, tokens have {d}, and no projection is given",
                text.len()
            )));
        }
    }
    if let Some(p) = &bundle.proj {
        if p.in_dim() != d {
            return Err(Error::DimensionMismatch(format!(
                "projection expects {}-dim tokens, tokens have {d}",
                p.in_dim()
            )));
        }
        if let Some(text) = &bundle.text {
            if p.out_dim() != text.len() {
                return Err(Error::DimensionMismatch(format!(
                    "projection produces {} dims, text has {}",
                    p.out_dim(),
                    text.len()
                )));
            }
        }
        if !p.weight.all_finite() {
            return Err(Error::NonFiniteValue("proj_w"));
        }
        if let Some(b) = &p.bias {
            if b.len() != p.out_dim() {
                return Err(Error::DimensionMismatch("projection bias length".into()));
            }
            if !b.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFiniteValue("proj_b"));
            }
        }
    }
    if bundle.original_indices.len() != n {
        return Err(Error::InvalidIndices(format!("{} indices for {n} tokens", bundle.original_indices.len())));
    }
    let mut seen = HashSet::with_capacity(n);
    for &i in &bundle.original_indices {
        if !seen.insert(i) {
            return Err(Error::InvalidIndices(format!("index {i} appears twice")));
        }
    }
    if let Some((rows, cols)) = bundle.grid {
        if rows.checked_mul(cols) != Some(n) {
            return Err(Error::GridMismatch { rows, cols, n });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Visual,
    Text,
}

/// Per-token saliency: softmax output and its min-max normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub kind: ScoreKind,
}

pub const DEFAULT_TAU: f64 = 1.5;

/// Parameters of one dynamic scale filter pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LofParams {
    /// LOF neighborhood size.
    pub k: usize,
    /// A point is an outlier when its LOF exceeds `tau`. The default of 1.5
    /// is the usual LOF inlier cutoff; at 1.0, sampling noise alone pushes
    /// roughly half of any continuous tail above the threshold.
    pub tau: f64,
    /// Number of top tokens returned when no outlier is found and the
    /// caller asked for a fallback.
    pub fallback_keep: usize,
}

impl Default for LofParams {
    fn default() -> Self {
        LofParams { k: 20, tau: DEFAULT_TAU, fallback_keep: 1 }
    }
}

impl LofParams {
    pub fn with_k(k: usize) -> Self {
        LofParams { k, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParams("k must be at least 1".into()));
        }
        if !self.tau.is_finite() || self.tau < 1.0 {
            return Err(Error::InvalidParams(format!("tau must be a finite value >= 1, got {}", self.tau)));
        }
        if self.fallback_keep == 0 {
            return Err(Error::InvalidParams("fallback_keep must be at least 1".into()));
        }
        Ok(())
    }
}

/// One slot of the compressed output sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputSlot {
    /// An original token, by original index.
    Kept(usize),
    /// A merged background token placed at its seed's original index.
    Merged { cluster: usize, placement: usize },
}

impl OutputSlot {
    pub fn placement(&self) -> usize {
        match *self {
            OutputSlot::Kept(i) => i,
            OutputSlot::Merged { placement, .. } => placement,
        }
    }
}

/// Which tokens survived, which were merged, and in what order the output
/// sequence is laid out. All indices are original indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Tokens kept by the visual filter, sorted.
    pub visual_kept: Vec<usize>,
    /// Tokens recovered through the text score, sorted.
    pub text_recovered: Vec<usize>,
    /// Tokens neither kept nor recovered, sorted. Each belongs to one cluster.
    pub background: Vec<usize>,
    /// Cluster id of each entry of `background`.
    pub cluster_of: Vec<usize>,
    /// Seed token of each cluster; cluster `c` is seeded by `cluster_seeds[c]`.
    pub cluster_seeds: Vec<usize>,
    /// `M × D`, one row per cluster.
    pub merged_tokens: Matrix,
    /// Placement of each merged row, equal to its seed.
    pub merged_placement: Vec<usize>,
    pub output_order: Vec<OutputSlot>,
}

impl SelectionResult {
    pub fn n_output(&self) -> usize {
        self.output_order.len()
    }

    /// Sorted union of visual-kept and text-recovered tokens.
    pub fn kept(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.visual_kept.iter().chain(&self.text_recovered).copied().collect();
        v.sort_unstable();
        v
    }
}

/// Echo of every parameter that shaped a compression run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsUsed {
    pub primary: LofParams,
    pub secondary: LofParams,
    pub n_text_tokens: usize,
    pub model: Option<ModelConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionReport {
    pub n_input: usize,
    pub n_visual_kept: usize,
    pub n_text_recovered: usize,
    pub n_merged: usize,
    pub retention_ratio: f64,
    pub flops_before: Option<f64>,
    pub flops_after: Option<f64>,
    /// Seconds; `None` when timing is disabled for reproducible output.
    pub wall_time: Option<f64>,
    pub params_used: ParamsUsed,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(n: usize, d: usize) -> TokenBundle {
        let tokens = Matrix::new(n, d, (0..n * d).map(|x| x as f32 * 0.01).collect()).unwrap();
        TokenBundle::new(tokens, vec![1.0; d])
    }

    #[test]
    fn llava_sized_bundle_is_valid() {
        // 336x336 image, 14x14 patches
        let n = (336 / 14) * (336 / 14);
        assert_eq!(n, 576);
        let b = bundle(n, 1024).with_grid(24, 24);
        validate_bundle(&b).unwrap();
    }

    #[test]
    fn empty_bundle_rejected() {
        let b = TokenBundle::new(Matrix::zeros(0, 4), vec![0.0; 4]);
        assert!(matches!(validate_bundle(&b), Err(Error::EmptyBundle)));
    }

    #[test]
    fn text_without_projection_rejected() {
        let b = bundle(4, 1024).with_text(vec![0.5; 768]);
        assert!(matches!(validate_bundle(&b), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn text_with_projection_accepted() {
        let proj = ProjectionMap::new(Matrix::zeros(8, 16), None).unwrap();
        let b = bundle(4, 16).with_text(vec![0.5; 8]).with_proj(proj);
        validate_bundle(&b).unwrap();
    }

    #[test]
    fn nan_rejected() {
        let mut b = bundle(3, 2);
        b.tokens.row_mut(1)[0] = f32::NAN;
        assert!(matches!(validate_bundle(&b), Err(Error::NonFiniteValue("tokens"))));
        let mut b = bundle(3, 2);
        b.cls = Some(vec![0.0, f32::INFINITY]);
        assert!(matches!(validate_bundle(&b), Err(Error::NonFiniteValue("cls"))));
    }

    #[test]
    fn grid_must_cover_tokens() {
        let b = bundle(6, 2).with_grid(2, 2);
        assert!(matches!(validate_bundle(&b), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn duplicate_indices_rejected() {
        let b = bundle(3, 2).with_original_indices(vec![0, 2, 2]);
        assert!(matches!(validate_bundle(&b), Err(Error::InvalidIndices(_))));
    }

    #[test]
    fn canonical_sorts_rows_by_index() {
        let b = bundle(3, 2).with_original_indices(vec![7, 1, 4]);
        let c = b.canonical();
        assert_eq!(c.original_indices, vec![1, 4, 7]);
        assert_eq!(c.tokens.row(0), b.tokens.row(1));
        assert_eq!(c.tokens.row(2), b.tokens.row(0));
    }

    #[test]
    fn lof_params_bounds() {
        assert!(LofParams::default().validate().is_ok());
        assert!(LofParams { k: 0, ..Default::default() }.validate().is_err());
        assert!(LofParams { tau: 0.9, ..Default::default() }.validate().is_err());
        assert!(LofParams { tau: f64::NAN, ..Default::default() }.validate().is_err());
    }
}
