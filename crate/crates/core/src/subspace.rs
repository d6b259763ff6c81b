//! Public-data projections: pool segmentation, per-layer bases, skew and κ.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    dot, gaussian_vec, project_rows, spectral_norm_diff, topk_right_singular, DenseMatrix,
    OrthoBasis, SeededRng,
};
use crate::models::{per_sample_grads, Dataset, GradientMatrix, LayerSpec, ModelKind, ModelParams};

/// How the public pool is cut into per-refresh batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segmentation {
    /// Resampled: each refresh draws a fresh batch with replacement.
    Rbs,
    /// Independent: refresh `i` takes the i-th disjoint block, in order.
    Ibs,
}

impl FromStr for Segmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rbs" => Ok(Self::Rbs),
            "ibs" => Ok(Self::Ibs),
            other => Err(Error::Config(format!(
                "unknown segmentation `{other}` (expected rbs or ibs)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PublicPool {
    data: Dataset,
    strategy: Segmentation,
    batch_size: usize,
    seed: u64,
}

impl PublicPool {
    pub fn new(data: Dataset, strategy: Segmentation, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("public batch size must be positive".into()));
        }
        Ok(Self {
            data,
            strategy,
            batch_size,
            seed,
        })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn strategy(&self) -> Segmentation {
        self.strategy
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Number of IBS blocks the pool can serve.
    pub fn block_budget(&self) -> usize {
        self.data.len() / self.batch_size
    }

    /// Indices of the public batch used by refresh number `refresh_index`.
    ///
    /// RBS batches depend only on `(seed, refresh_index)`, so they are
    /// reproducible without carrying sampler state.
    pub fn draw_public_batch(&self, refresh_index: usize) -> Result<Vec<usize>> {
        match self.strategy {
            Segmentation::Rbs => {
                let mut rng =
                    SeededRng::new(self.seed).substream_indexed("public", refresh_index as u64);
                let m = self.data.len();
                Ok((0..self.batch_size).map(|_| rng.random_range(0..m)).collect())
            }
            Segmentation::Ibs => {
                let start = refresh_index * self.batch_size;
                let end = start + self.batch_size;
                if end > self.data.len() {
                    return Err(Error::PoolExhausted {
                        requested: refresh_index,
                        needed: end,
                        available: self.data.len(),
                    });
                }
                Ok((start..end).collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    Layerwise,
    Whole,
}

impl FromStr for ProjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layerwise" => Ok(Self::Layerwise),
            "whole" => Ok(Self::Whole),
            other => Err(Error::Config(format!(
                "unknown projection mode `{other}` (expected layerwise or whole)"
            ))),
        }
    }
}

/// Basis for one contiguous block of the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockBasis {
    pub name: String,
    pub offset: usize,
    pub basis: OrthoBasis,
    pub truncated: bool,
    pub eigen_gap: f64,
}

impl BlockBasis {
    pub fn len(&self) -> usize {
        self.basis.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.dim() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.basis.dim()
    }
}

/// Block-diagonal projector `Π = diag(V_i V_iᵀ)` over the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    mode: ProjectionMode,
    blocks: Vec<BlockBasis>,
    dim: usize,
    k_requested: usize,
    interval: usize,
    refreshed_at: usize,
}

impl ProjectionSet {
    pub fn from_blocks(
        mode: ProjectionMode,
        blocks: Vec<BlockBasis>,
        k_requested: usize,
        interval: usize,
        refreshed_at: usize,
    ) -> Result<Self> {
        let mut expected = 0;
        for b in &blocks {
            if b.offset != expected {
                return Err(Error::LayoutMismatch(format!(
                    "block `{}` starts at {} but {} was expected",
                    b.name, b.offset, expected
                )));
            }
            expected += b.len();
        }
        Ok(Self {
            mode,
            blocks,
            dim: expected,
            k_requested,
            interval: interval.max(1),
            refreshed_at,
        })
    }

    /// Projector onto the whole space (every block keeps all directions).
    pub fn identity(layout: &[LayerSpec]) -> Self {
        let blocks = layout
            .iter()
            .map(|l| BlockBasis {
                name: l.name.clone(),
                offset: l.offset,
                basis: OrthoBasis::identity(l.len),
                truncated: false,
                eigen_gap: 0.0,
            })
            .collect();
        Self::from_blocks(ProjectionMode::Layerwise, blocks, usize::MAX, 1, 0)
            .expect("layout offsets are contiguous")
    }

    /// Orthonormalized Gaussian `d × k` basis over the flat parameter vector.
    pub fn random(dim: usize, k: usize, rng: &mut SeededRng) -> Result<Self> {
        let k = k.min(dim);
        let raw = DenseMatrix::from_vec(k, dim, gaussian_vec(k * dim, 1.0, rng))?;
        let basis = OrthoBasis::orthonormalize(raw, vec![0.0; k])?;
        let truncated = basis.k() < k;
        Self::from_blocks(
            ProjectionMode::Whole,
            vec![BlockBasis {
                name: "all".into(),
                offset: 0,
                basis,
                truncated,
                eigen_gap: 0.0,
            }],
            k,
            usize::MAX,
            0,
        )
    }

    pub fn mode(&self) -> ProjectionMode {
        self.mode
    }

    pub fn blocks(&self) -> &[BlockBasis] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k_requested(&self) -> usize {
        self.k_requested
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn refreshed_at(&self) -> usize {
        self.refreshed_at
    }

    pub fn truncated(&self) -> bool {
        self.blocks.iter().any(|b| b.truncated)
    }

    /// Per-block retained dimensions `k_i`.
    pub fn ranks(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.basis.k()).collect()
    }

    /// Total number of coefficients, `Σ k_i`.
    pub fn total_k(&self) -> usize {
        self.blocks.iter().map(|b| b.basis.k()).sum()
    }

    /// Smallest per-block eigen-gap `λ_k − λ_{k+1}`.
    pub fn min_eigen_gap(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.eigen_gap)
            .fold(f64::INFINITY, f64::min)
    }

    /// True once `interval` steps have passed since the last refresh.
    pub fn needs_refresh(&self, step: usize) -> bool {
        step.saturating_sub(self.refreshed_at) >= self.interval
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: len,
            });
        }
        Ok(())
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let coeffs = self.coefficients(v)?;
        self.restore(&coeffs)
    }

    /// Projects each row of a `B × d` matrix.
    pub fn project_rows(&self, rows: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_dim(rows.cols())?;
        let mut out = DenseMatrix::zeros(rows.rows(), self.dim);
        for b in &self.blocks {
            let block = rows.column_block(b.offset, b.len());
            let projected = project_rows(&b.basis, &block)?;
            for r in 0..rows.rows() {
                out.row_mut(r)[b.range()].copy_from_slice(projected.row(r));
            }
        }
        Ok(out)
    }

    /// Per-block coefficients `V_iᵀ v_i`.
    pub fn coefficients(&self, v: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_dim(v.len())?;
        self.blocks
            .iter()
            .map(|b| b.basis.coefficients(&v[b.range()]))
            .collect()
    }

    /// Inverse of [`coefficients`](Self::coefficients) on the span: `Σ V_i c_i`.
    pub fn restore(&self, coeffs: &[Vec<f64>]) -> Result<Vec<f64>> {
        if coeffs.len() != self.blocks.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} coefficient blocks for {} bases",
                coeffs.len(),
                self.blocks.len()
            )));
        }
        let mut out = vec![0.0; self.dim];
        for (b, c) in self.blocks.iter().zip(coeffs) {
            out[b.range()].copy_from_slice(&b.basis.reconstruct(c)?);
        }
        Ok(out)
    }

    /// `Π N(0, c²σ² I_d)`, sampled block by block in coefficient space.
    pub fn noise(&self, c: f64, sigma: f64, rng: &mut SeededRng) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        for b in &self.blocks {
            let draw = crate::privacy::subspace_noise(&b.basis, c, sigma, rng)?;
            out[b.range()].copy_from_slice(&draw.ambient);
        }
        Ok(out)
    }

    fn check_same_layout(&self, other: &ProjectionSet) -> Result<()> {
        let same = self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.offset == b.offset && a.len() == b.len());
        if same {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(
                "projection sets cover different blocks".into(),
            ))
        }
    }
}

fn blocks_for(layout: &[LayerSpec], mode: ProjectionMode) -> Vec<(String, usize, usize)> {
    match mode {
        ProjectionMode::Layerwise => layout
            .iter()
            .map(|l| (l.name.clone(), l.offset, l.len))
            .collect(),
        ProjectionMode::Whole => {
            vec![("all".into(), 0, layout.iter().map(|l| l.len).sum())]
        }
    }
}

/// Top-k bases of given per-sample gradients, one per block of `layout`.
///
/// Each block keeps `min(k, p_i, rank)` directions; a block whose gradients are
/// all zero gets an empty basis and is flagged as truncated.
pub fn projection_from_grads(
    layout: &[LayerSpec],
    grads: &DenseMatrix,
    k: usize,
    mode: ProjectionMode,
    interval: usize,
    step: usize,
) -> Result<ProjectionSet> {
    if grads.rows() == 0 {
        return Err(Error::InvalidArgument("public batch is empty".into()));
    }
    let mut blocks = Vec::new();
    for (name, offset, len) in blocks_for(layout, mode) {
        let slice = grads.column_block(offset, len);
        let want = k.min(len);
        let block = match topk_right_singular(&slice, want) {
            Ok(top) => {
                let gap = top.basis.eigvals().last().map_or(0.0, |l| l - top.next_eigval);
                BlockBasis {
                    name,
                    offset,
                    truncated: top.truncated,
                    eigen_gap: gap,
                    basis: top.basis,
                }
            }
            Err(Error::ZeroMatrix) => BlockBasis {
                name,
                offset,
                basis: OrthoBasis::empty(len),
                truncated: true,
                eigen_gap: 0.0,
            },
            Err(e) => return Err(e),
        };
        blocks.push(block);
    }
    ProjectionSet::from_blocks(mode, blocks, k, interval, step)
}

/// Projection built from public per-sample gradients at `params`.
#[allow(clippy::too_many_arguments)]
pub fn refresh_projection(
    kind: &ModelKind,
    params: &ModelParams,
    public: &Dataset,
    batch: &[usize],
    k: usize,
    mode: ProjectionMode,
    interval: usize,
    step: usize,
) -> Result<ProjectionSet> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("public batch is empty".into()));
    }
    let g = per_sample_grads(kind, params, public, batch)?;
    projection_from_grads(params.layout(), &g.grads, k, mode, interval, step)
}

/// Empirical subspace skewing between a sample projection and a holdout proxy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewReport {
    pub step: usize,
    pub per_layer: Vec<f64>,
    pub aggregate: f64,
    pub holdout_size: usize,
    pub converged: bool,
}

pub fn skew(current: &ProjectionSet, holdout: &ProjectionSet, holdout_size: usize) -> Result<SkewReport> {
    current.check_same_layout(holdout)?;
    let mut per_layer = Vec::with_capacity(current.blocks.len());
    let mut converged = true;
    for (a, b) in current.blocks.iter().zip(&holdout.blocks) {
        let est = spectral_norm_diff(&a.basis, &b.basis)?;
        converged &= est.converged;
        per_layer.push(est.value);
    }
    let aggregate = per_layer.iter().cloned().fold(0.0, f64::max);
    Ok(SkewReport {
        step: current.refreshed_at,
        per_layer,
        aggregate,
        holdout_size,
        converged,
    })
}

/// Mean retained energy `‖Πg‖²/‖g‖²` over nonzero rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaEstimate {
    pub value: f64,
    /// Rows that contributed; 0 means the estimate is undefined and `value` is 0.
    pub count: usize,
}

pub fn projection_ratio(pset: &ProjectionSet, grads: &GradientMatrix) -> Result<KappaEstimate> {
    let projected = pset.project_rows(&grads.grads)?;
    Ok(kappa_from_rows(&grads.grads, &projected))
}

pub(crate) fn kappa_from_rows(raw: &DenseMatrix, projected: &DenseMatrix) -> KappaEstimate {
    let mut sum = 0.0;
    let mut count = 0;
    for (g, p) in raw.row_iter().zip(projected.row_iter()) {
        let n = dot(g, g);
        if n > 0.0 {
            sum += (dot(p, p) / n).min(1.0);
            count += 1;
        }
    }
    KappaEstimate {
        value: if count == 0 { 0.0 } else { sum / count as f64 },
        count,
    }
}
