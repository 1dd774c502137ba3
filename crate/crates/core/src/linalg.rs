//! Deterministic truncated SVD with a fixed sign convention.
//!
//! Factors are stored pre-scaled: `u_prime = U_k * diag(sigma_k)` (n*k) and
//! `v_prime = V_k^T` (k*d), both demoted to f32 for storage while all
//! internal arithmetic runs in f64. Small matrices are factored through a
//! symmetric eigendecomposition of the Gram matrix on their smaller side;
//! larger ones take seeded randomized subspace iteration (oversampled
//! sketch, QR re-orthonormalization each half-step) and factor the projected
//! matrix the same way. Singular values are recomputed as factor column
//! norms, so factors and values agree by construction. Directions with
//! exactly zero singular value have all-zero `u_prime` columns and `v_prime`
//! rows, so degenerate inputs sparsify to nothing instead of carrying
//! arbitrary basis vectors. Repeated calls on the same bytes produce
//! bit-identical factors.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matio::DenseMatrix;

/// Minor dimensions at or below this take the dense path.
const DENSE_MIN_DIM: usize = 256;
/// Extra sketch columns beyond the requested rank.
const OVERSAMPLE: usize = 8;
/// Power iterations before the first convergence check.
const MIN_POWER_ITERS: usize = 4;
/// Iteration cap for the randomized path; the estimate is accepted there.
const MAX_POWER_ITERS: usize = 100;
/// Relative stabilization threshold on the top-k singular estimates.
const STABILIZE_RTOL: f64 = 1e-6;
/// Fixed sketch seed; determinism depends on it.
const SKETCH_SEED: u64 = 0x05D0_51D5;

/// Truncated SVD factors scaled for storage.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    /// n*k matrix `U_k * diag(sigma_k)`.
    pub u_prime: DenseMatrix,
    /// k*d matrix `V_k^T` with orthonormal rows.
    pub v_prime: DenseMatrix,
    /// Retained rank k.
    pub rank: usize,
    /// Non-increasing, nonnegative; kept in f64 as derived metadata.
    pub singular_values: Vec<f64>,
}

impl FactorPair {
    pub fn n(&self) -> usize {
        self.u_prime.rows()
    }

    pub fn d(&self) -> usize {
        self.v_prime.cols()
    }
}

pub(crate) fn to_dmatrix(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) as f64)
}

pub(crate) fn from_dmatrix(a: &DMatrix<f64>) -> DenseMatrix {
    let mut values = Vec::with_capacity(a.nrows() * a.ncols());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            values.push(a[(i, j)] as f32);
        }
    }
    DenseMatrix::new(a.nrows(), a.ncols(), values).expect("dimensions preserved")
}

/// Rank-k truncated SVD of `m`.
pub fn truncated_svd(m: &DenseMatrix, k: usize) -> Result<FactorPair> {
    let (n, d) = m.shape();
    let minor = n.min(d);
    if k == 0 || k > minor {
        return Err(Error::Argument(format!(
            "rank k={k} out of range for a {n}x{d} matrix (1..={minor})"
        )));
    }
    if let Some(idx) = m.first_non_finite() {
        return Err(Error::Data(format!("non-finite value at index {idx}")));
    }
    let a = to_dmatrix(m);
    let (mut u_scaled, sigma, mut v_t) = if minor <= DENSE_MIN_DIM || k + OVERSAMPLE >= minor {
        gram_factors(&a, k)?
    } else {
        randomized_factors(&a, k)?
    };
    if sigma.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("singular value extraction produced non-finite values".into()));
    }
    fix_signs(&mut u_scaled, &mut v_t);
    Ok(FactorPair {
        u_prime: from_dmatrix(&u_scaled),
        v_prime: from_dmatrix(&v_t),
        rank: k,
        singular_values: sigma,
    })
}

/// The n*d product `u_prime * v_prime`, computed in f64.
pub fn reconstruct(f: &FactorPair) -> Result<DenseMatrix> {
    if f.u_prime.cols() != f.rank
        || f.v_prime.rows() != f.rank
        || f.singular_values.len() != f.rank
    {
        return Err(Error::Integrity(format!(
            "factor shapes inconsistent: u' {}x{}, v' {}x{}, rank {}",
            f.u_prime.rows(),
            f.u_prime.cols(),
            f.v_prime.rows(),
            f.v_prime.cols(),
            f.rank
        )));
    }
    let prod = to_dmatrix(&f.u_prime) * to_dmatrix(&f.v_prime);
    Ok(from_dmatrix(&prod))
}

/// Top-k factors via a symmetric eigendecomposition of the Gram matrix on
/// the smaller side. Returns `(u_scaled, sigma, v_t)` with `u_scaled` column
/// norms equal to `sigma` and `v_t` rows unit (zero where sigma is zero on
/// the wide orientation).
fn gram_factors(w: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let tall = w.nrows() >= w.ncols();
    let g = if tall { w.tr_mul(w) } else { w * w.transpose() };
    // Symmetrize away one-sided rounding before the eigensolver.
    let g = (&g + g.transpose()) * 0.5;
    let eig = g
        .try_symmetric_eigen(f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("Gram eigendecomposition failed to converge".into()))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).expect("finite"));
    let take: Vec<usize> = order.into_iter().take(k).collect();
    let (u_scaled, sigma, v_t);
    if tall {
        let v_k = DMatrix::from_fn(w.ncols(), k, |i, j| eig.eigenvectors[(i, take[j])]);
        u_scaled = w * &v_k;
        sigma = (0..k).map(|j| u_scaled.column(j).norm()).collect::<Vec<_>>();
        let mut v = v_k.transpose();
        for (j, &s) in sigma.iter().enumerate() {
            if s == 0.0 {
                v.row_mut(j).fill(0.0);
            }
        }
        v_t = v;
    } else {
        let u_k = DMatrix::from_fn(w.nrows(), k, |i, j| eig.eigenvectors[(i, take[j])]);
        let rows = u_k.transpose() * w;
        let s: Vec<f64> = (0..k).map(|j| rows.row(j).norm()).collect();
        let mut v = DMatrix::zeros(k, w.ncols());
        let mut u = DMatrix::zeros(w.nrows(), k);
        for j in 0..k {
            if s[j] > 0.0 {
                for t in 0..w.ncols() {
                    v[(j, t)] = rows[(j, t)] / s[j];
                }
                for i in 0..w.nrows() {
                    u[(i, j)] = u_k[(i, j)] * s[j];
                }
            }
        }
        u_scaled = u;
        sigma = s;
        v_t = v;
    }
    Ok(reorder_by_sigma(u_scaled, sigma, v_t))
}

/// Stable descending re-sort by the recomputed singular values; eigenvalue
/// order and column-norm order can disagree within rounding noise.
fn reorder_by_sigma(
    u_scaled: DMatrix<f64>,
    sigma: Vec<f64>,
    v_t: DMatrix<f64>,
) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let k = sigma.len();
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).expect("finite"));
    if idx.iter().enumerate().all(|(pos, &i)| pos == i) {
        return (u_scaled, sigma, v_t);
    }
    let u2 = DMatrix::from_fn(u_scaled.nrows(), k, |i, j| u_scaled[(i, idx[j])]);
    let v2 = DMatrix::from_fn(k, v_t.ncols(), |i, j| v_t[(idx[i], j)]);
    let s2: Vec<f64> = idx.iter().map(|&i| sigma[i]).collect();
    (u2, s2, v2)
}

/// Reinterprets tall-orientation factors of `w` as factors of `w^T`.
/// Normalizing a column by its own norm is exact where sigma is nonzero;
/// zero-sigma directions become zero rows.
fn transpose_factors(
    u_scaled: DMatrix<f64>,
    sigma: Vec<f64>,
    v_t: DMatrix<f64>,
) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let k = sigma.len();
    let mut u2 = DMatrix::zeros(v_t.ncols(), k);
    let mut v2 = DMatrix::zeros(k, u_scaled.nrows());
    for j in 0..k {
        for i in 0..v_t.ncols() {
            u2[(i, j)] = v_t[(j, i)] * sigma[j];
        }
        if sigma[j] > 0.0 {
            for t in 0..u_scaled.nrows() {
                v2[(j, t)] = u_scaled[(t, j)] / sigma[j];
            }
        }
    }
    (u2, sigma, v2)
}

/// Randomized subspace iteration on the tall orientation of `a`.
///
/// Runs at least `MIN_POWER_ITERS` two-sided power steps, then iterates
/// until the top-k singular estimates stabilize within `STABILIZE_RTOL`
/// relative (or the iteration cap, where the estimate is accepted).
fn randomized_factors(
    a: &DMatrix<f64>,
    k: usize,
) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let transposed = a.nrows() < a.ncols();
    let work = if transposed { a.transpose() } else { a.clone() };
    let cols = work.ncols();
    let l = (k + OVERSAMPLE).min(cols);
    let mut rng = ChaCha8Rng::seed_from_u64(SKETCH_SEED);
    let data: Vec<f64> = (0..cols * l)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let omega = DMatrix::from_vec(cols, l, data);
    let work_t = work.transpose();
    let mut q = (&work * &omega).qr().q();
    let mut prev: Option<Vec<f64>> = None;
    let mut iter = 0usize;
    loop {
        iter += 1;
        let qz = (&work_t * &q).qr().q();
        q = (&work * &qz).qr().q();
        let cap_reached = iter >= MAX_POWER_ITERS;
        let check = iter >= MIN_POWER_ITERS && (iter - MIN_POWER_ITERS).is_multiple_of(2);
        if !check && !cap_reached {
            continue;
        }
        let b = q.transpose() * &work;
        let (u_b_scaled, s_k, v_t_k) = gram_factors(&b, k)?;
        let stable = match &prev {
            Some(p) => {
                let scale = s_k[0].max(f64::MIN_POSITIVE);
                s_k.iter()
                    .zip(p)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
                    <= STABILIZE_RTOL * scale
            }
            None => false,
        };
        if stable || cap_reached {
            let u_full = &q * u_b_scaled;
            return Ok(if transposed {
                transpose_factors(u_full, s_k, v_t_k)
            } else {
                (u_full, s_k, v_t_k)
            });
        }
        prev = Some(s_k);
    }
}

/// Makes the largest-magnitude entry of each right singular vector
/// nonnegative (ties to the lowest index), negating the paired left vector.
fn fix_signs(u: &mut DMatrix<f64>, v_t: &mut DMatrix<f64>) {
    for j in 0..v_t.nrows() {
        let mut best = 0usize;
        let mut best_abs = 0.0f64;
        for t in 0..v_t.ncols() {
            let a = v_t[(j, t)].abs();
            if a > best_abs {
                best_abs = a;
                best = t;
            }
        }
        if v_t[(j, best)] < 0.0 {
            for t in 0..v_t.ncols() {
                v_t[(j, t)] = -v_t[(j, t)];
            }
            for i in 0..u.nrows() {
                u[(i, j)] = -u[(i, j)];
            }
        }
    }
}
