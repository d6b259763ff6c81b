//! Dense kernels, truncated eigenbases, projector distances and seeded sampling.
//!
//! Every reduction here runs in a fixed order with no fused multiply-adds, so
//! results are bit-reproducible for identical inputs regardless of the SIMD
//! width the compiler picks.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const LANES: usize = 8;

/// Dot product with eight interleaved accumulators and a fixed final reduction.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        let xa = &a[base..base + LANES];
        let xb = &b[base..base + LANES];
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let s0 = (acc[0] + acc[4]) + (acc[1] + acc[5]);
    let s1 = (acc[2] + acc[6]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(v: &mut [f64], alpha: f64) {
    for x in v {
        *x *= alpha;
    }
}

/// Sum of equal-length vectors by a fixed pairwise tree over the input order.
pub fn pairwise_sum(rows: &[&[f64]], dim: usize) -> Vec<f64> {
    match rows.len() {
        0 => vec![0.0; dim],
        1 => rows[0].to_vec(),
        n => {
            let (left, right) = rows.split_at(n / 2);
            let mut l = pairwise_sum(left, dim);
            let r = pairwise_sum(right, dim);
            for (a, b) in l.iter_mut().zip(&r) {
                *a += b;
            }
            l
        }
    }
}

/// Row-major dense matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "matrix entries must be finite, found {bad}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero width
        (0..self.rows).map(move |r| self.row(r))
    }

    /// Copy of columns `[start, start + width)`.
    pub fn column_block(&self, start: usize, width: usize) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `A Aᵀ`, the row Gram matrix.
    pub fn gram_rows(&self) -> DenseMatrix {
        let n = self.rows;
        let mut g = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = dot(self.row(i), self.row(j));
                g.data[i * n + j] = v;
                g.data[j * n + i] = v;
            }
        }
        g
    }

    /// `Aᵀ A`, the column Gram matrix.
    pub fn gram_cols(&self) -> DenseMatrix {
        self.transpose().gram_rows()
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                actual: other.rows,
            });
        }
        let ot = other.transpose();
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                out.data[i * other.cols + j] = dot(self.row(i), ot.row(j));
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        norm2(&self.data)
    }
}

/// Eigen-decomposition of a symmetric matrix: values descending, `vectors` row `i`
/// is the unit eigenvector of `values[i]`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
    pub sweeps: usize,
    pub converged: bool,
}

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Stops when the off-diagonal Frobenius norm falls below `1e-12` relative to
/// the matrix Frobenius norm, or after 100 sweeps.
pub fn sym_eigen_jacobi(a: &DenseMatrix) -> Result<SymEigen> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: a.cols(),
        });
    }
    let mut m = a.data.clone();
    let mut v = DenseMatrix::identity(n).data;
    let scale = a.frobenius().max(f64::MIN_POSITIVE);

    let off_norm = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    let mut converged = off_norm(&m) <= JACOBI_TOL * scale;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    let np = c * mkp - s * mkq;
                    let nq = s * mkp + c * mkq;
                    m[k * n + p] = np;
                    m[p * n + k] = np;
                    m[k * n + q] = nq;
                    m[q * n + k] = nq;
                }
                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        converged = off_norm(&m) <= JACOBI_TOL * scale;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (r, &i) in order.iter().enumerate() {
        for k in 0..n {
            vectors.data[r * n + k] = v[k * n + i];
        }
    }
    Ok(SymEigen {
        values,
        vectors,
        sweeps,
        converged,
    })
}

/// Orthonormal basis of a k-dimensional subspace of ℝ^dim.
///
/// Basis vectors are stored contiguously (`k × dim`, row `j` is the j-th
/// direction), which is the transpose of the usual column layout of `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoBasis {
    dim: usize,
    vectors: DenseMatrix,
    eigvals: Vec<f64>,
}

impl OrthoBasis {
    /// Builds a basis from directions that are already orthonormal.
    pub fn new(vectors: DenseMatrix, eigvals: Vec<f64>) -> Result<Self> {
        if eigvals.len() != vectors.rows() {
            return Err(Error::DimensionMismatch {
                expected: vectors.rows(),
                actual: eigvals.len(),
            });
        }
        if vectors.rows() > vectors.cols() {
            return Err(Error::InvalidArgument(format!(
                "k = {} exceeds ambient dimension {}",
                vectors.rows(),
                vectors.cols()
            )));
        }
        Ok(Self {
            dim: vectors.cols(),
            vectors,
            eigvals,
        })
    }

    /// Orthonormalizes arbitrary directions with modified Gram-Schmidt,
    /// dropping any that collapse numerically.
    ///
    /// A vector gets a second pass whenever the first removes more than
    /// `1 − 1/√2` of its norm; after two passes it is orthogonal to working
    /// precision.
    pub fn orthonormalize(raw: DenseMatrix, eigvals: Vec<f64>) -> Result<Self> {
        let dim = raw.cols();
        let mut kept: Vec<Vec<f64>> = Vec::with_capacity(raw.rows());
        let mut kept_vals = Vec::with_capacity(raw.rows());
        for (j, row) in raw.row_iter().enumerate() {
            let mut v = row.to_vec();
            let original = norm2(&v);
            if original == 0.0 {
                continue;
            }
            let mut before = original;
            for _ in 0..2 {
                for u in &kept {
                    let proj = dot(u, &v);
                    axpy(-proj, u, &mut v);
                }
                let after = norm2(&v);
                if after >= std::f64::consts::FRAC_1_SQRT_2 * before {
                    break;
                }
                before = after;
            }
            let n = norm2(&v);
            if n <= 1e-10 * original {
                continue;
            }
            scale(&mut v, 1.0 / n);
            kept.push(v);
            kept_vals.push(eigvals.get(j).copied().unwrap_or(0.0));
        }
        let k = kept.len();
        let data = kept.into_iter().flatten().collect();
        Self::new(DenseMatrix::from_vec(k, dim, data)?, kept_vals)
    }

    /// Zero-dimensional subspace of ℝ^dim.
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            vectors: DenseMatrix::zeros(0, dim),
            eigvals: Vec::new(),
        }
    }

    /// The full space spanned by the standard basis.
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            vectors: DenseMatrix::identity(dim),
            eigvals: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.vectors.rows()
    }

    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        self.vectors.row(j)
    }

    pub fn vectors(&self) -> &DenseMatrix {
        &self.vectors
    }

    /// `max |VᵀV − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.vectors.gram_rows();
        let mut err: f64 = 0.0;
        for i in 0..self.k() {
            for j in 0..self.k() {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((g.get(i, j) - target).abs());
            }
        }
        err
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

    /// `Vᵀ v`
    pub fn coefficients(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(v.len())?;
        Ok(self.vectors.row_iter().map(|u| dot(u, v)).collect())
    }

    /// `V c`
    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                actual: coeffs.len(),
            });
        }
        let mut out = vec![0.0; self.dim];
        for (j, &c) in coeffs.iter().enumerate() {
            axpy(c, self.vector(j), &mut out);
        }
        Ok(out)
    }

    /// Coefficients of every row of `rows`, one row of length k per input row.
    ///
    /// Produces exactly the same bits as calling [`coefficients`](Self::coefficients)
    /// per row; the loop order only improves cache reuse of the basis.
    pub fn coefficients_rows(&self, rows: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_dim(rows.cols())?;
        let k = self.k();
        let mut out = DenseMatrix::zeros(rows.rows(), k);
        const BLOCK: usize = 8;
        let mut j0 = 0;
        while j0 < k {
            let j1 = (j0 + BLOCK).min(k);
            for i in 0..rows.rows() {
                let r = rows.row(i);
                for j in j0..j1 {
                    out.data[i * k + j] = dot(self.vector(j), r);
                }
            }
            j0 = j1;
        }
        Ok(out)
    }

    /// `V C` applied row-wise; bit-identical to per-row [`reconstruct`](Self::reconstruct).
    pub fn reconstruct_rows(&self, coeffs: &DenseMatrix) -> Result<DenseMatrix> {
        if coeffs.cols() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                actual: coeffs.cols(),
            });
        }
        let mut out = DenseMatrix::zeros(coeffs.rows(), self.dim);
        const BLOCK: usize = 8;
        let mut j0 = 0;
        while j0 < self.k() {
            let j1 = (j0 + BLOCK).min(self.k());
            for i in 0..coeffs.rows() {
                let dst = &mut out.data[i * self.dim..(i + 1) * self.dim];
                for j in j0..j1 {
                    axpy(coeffs.get(i, j), self.vectors.row(j), dst);
                }
            }
            j0 = j1;
        }
        Ok(out)
    }
}

/// Projects `v` onto the span of `basis` as `V(Vᵀv)` without forming `VVᵀ`.
pub fn project(basis: &OrthoBasis, v: &[f64]) -> Result<Vec<f64>> {
    let c = basis.coefficients(v)?;
    basis.reconstruct(&c)
}

/// Projects every row of `rows` onto the span of `basis`.
pub fn project_rows(basis: &OrthoBasis, rows: &DenseMatrix) -> Result<DenseMatrix> {
    let c = basis.coefficients_rows(rows)?;
    basis.reconstruct_rows(&c)
}

/// Result of a truncated eigen-decomposition of `AᵀA`.
#[derive(Debug, Clone)]
pub struct TopK {
    pub basis: OrthoBasis,
    /// Fewer than the requested directions were available.
    pub truncated: bool,
    /// Eigenvalue of `AᵀA` just past the kept ones (0 when none remains).
    pub next_eigval: f64,
}

const RANK_CUTOFF: f64 = 1e-12;

/// Leading `k` right-singular directions of `a` (eigenvectors of `AᵀA`).
///
/// When `a` has fewer rows than columns the `B × B` Gram matrix `AAᵀ` is
/// decomposed and mapped back through `Aᵀ U Λ^{-1/2}`; otherwise `AᵀA` is
/// decomposed directly. Eigenpairs below `1e-12 · λ_max` are treated as rank
/// deficiency and dropped.
pub fn topk_right_singular(a: &DenseMatrix, k: usize) -> Result<TopK> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if a.max_abs() == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let (b, d) = (a.rows(), a.cols());
    if b < d {
        let eig = sym_eigen_jacobi(&a.gram_rows())?;
        let lmax = eig.values[0];
        let rank = eig
            .values
            .iter()
            .take_while(|&&l| l > RANK_CUTOFF * lmax)
            .count();
        let keep = k.min(rank);
        let mut raw = DenseMatrix::zeros(keep, d);
        for j in 0..keep {
            let inv = 1.0 / eig.values[j].sqrt();
            let u = eig.vectors.row(j);
            let dst = raw.row_mut(j);
            for (i, &ui) in u.iter().enumerate() {
                axpy(ui * inv, a.row(i), dst);
            }
        }
        let next = eig.values.get(keep).copied().unwrap_or(0.0).max(0.0);
        let basis = OrthoBasis::orthonormalize(raw, eig.values[..keep].to_vec())?;
        let truncated = basis.k() < k;
        Ok(TopK {
            basis,
            truncated,
            next_eigval: next,
        })
    } else {
        let eig = sym_eigen_jacobi(&a.gram_cols())?;
        let lmax = eig.values[0];
        let rank = eig
            .values
            .iter()
            .take_while(|&&l| l > RANK_CUTOFF * lmax)
            .count();
        let keep = k.min(rank);
        let mut raw = DenseMatrix::zeros(keep, d);
        for j in 0..keep {
            raw.row_mut(j).copy_from_slice(eig.vectors.row(j));
        }
        let next = eig.values.get(keep).copied().unwrap_or(0.0).max(0.0);
        let basis = OrthoBasis::orthonormalize(raw, eig.values[..keep].to_vec())?;
        let truncated = basis.k() < k;
        Ok(TopK {
            basis,
            truncated,
            next_eigval: next,
        })
    }
}

/// Estimate of `‖V₁V₁ᵀ − V₂V₂ᵀ‖₂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

const POWER_MAX_ITERS: usize = 1000;
const POWER_REL_TOL: f64 = 1e-10;

/// Spectral norm of the projector difference, by matrix-free power iteration.
///
/// The iteration runs on `D²` with `D = P₁ − P₂`: projector differences have
/// paired eigenvalues `±λ`, which stall plain power iteration on `D`. Two
/// seeded starts are run and the larger estimate is kept.
pub fn spectral_norm_diff(b1: &OrthoBasis, b2: &OrthoBasis) -> Result<SpectralEstimate> {
    if b1.dim() != b2.dim() {
        return Err(Error::DimensionMismatch {
            expected: b1.dim(),
            actual: b2.dim(),
        });
    }
    let dim = b1.dim();
    if dim == 0 {
        return Ok(SpectralEstimate {
            value: 0.0,
            converged: true,
            iterations: 0,
        });
    }
    let apply = |x: &[f64]| -> Result<Vec<f64>> {
        let mut y = project(b1, x)?;
        let p2 = project(b2, x)?;
        for (a, b) in y.iter_mut().zip(&p2) {
            *a -= b;
        }
        Ok(y)
    };

    let mut best: Option<SpectralEstimate> = None;
    for start in 0..2u64 {
        let mut rng = SeededRng::new(0x5eed_0000 + start);
        let mut x = gaussian_vec(dim, 1.0, &mut rng);
        let n = norm2(&x);
        scale(&mut x, 1.0 / n);
        let mut rayleigh = 0.0;
        let mut converged = false;
        let mut iters = 0;
        for it in 1..=POWER_MAX_ITERS {
            iters = it;
            let dx = apply(&x)?;
            // xᵀD²x = ‖Dx‖²
            let next = dot(&dx, &dx);
            let mut y = apply(&dx)?;
            let ny = norm2(&y);
            if ny == 0.0 {
                rayleigh = next;
                converged = true;
                break;
            }
            scale(&mut y, 1.0 / ny);
            x = y;
            if (next - rayleigh).abs() <= POWER_REL_TOL * next.abs().max(f64::MIN_POSITIVE) {
                rayleigh = next;
                converged = true;
                break;
            }
            rayleigh = next;
        }
        let est = SpectralEstimate {
            value: rayleigh.max(0.0).sqrt(),
            converged,
            iterations: iters,
        };
        best = Some(match best {
            Some(b) if b.value >= est.value => SpectralEstimate {
                converged: b.converged && est.converged,
                ..b
            },
            Some(b) => SpectralEstimate {
                converged: b.converged && est.converged,
                ..est
            },
            None => est,
        });
    }
    Ok(best.expect("two starts always run"))
}

/// Deterministic random source (ChaCha8) with named, independent sub-streams.
///
/// The same seed produces the same stream on every platform. Sub-streams use
/// ChaCha's 64-bit stream selector, keyed by an FNV-1a hash of the name.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh generator for the named purpose; independent of this one's state.
    pub fn substream(&self, name: &str) -> SeededRng {
        self.substream_indexed(name, 0)
    }

    pub fn substream_indexed(&self, name: &str, index: u64) -> SeededRng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(fnv1a(name) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        SeededRng {
            seed: self.seed,
            inner,
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `n` i.i.d. draws of `N(0, std²)`.
pub fn gaussian_vec(n: usize, std: f64, rng: &mut SeededRng) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    (0..n).map(|_| std * rng.standard_normal()).collect()
}
