//! Shared oracles for integration tests.
//!
//! Everything here is deliberately independent of the library's numeric
//! path: the singular-value oracle is a self-contained cyclic Jacobi
//! eigensolver on a hand-built Gram matrix, and the sensitivity oracle is
//! the direct triple loop. Slow and simple on purpose.

#![allow(dead_code)]

use osd_core::matio::DenseMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
/// `a` is row-major n*n and is consumed as scratch.
pub fn jacobi_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n);
    let idx = |i: usize, j: usize| i * n + j;
    for _sweep in 0..60 {
        let mut off2 = 0.0;
        let mut total2 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = a[idx(i, j)] * a[idx(i, j)];
                total2 += v;
                if i != j {
                    off2 += v;
                }
            }
        }
        if off2 <= 1e-30 * total2.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[idx(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[idx(q, q)] - a[idx(p, p)]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[idx(i, p)];
                    let aiq = a[idx(i, q)];
                    a[idx(i, p)] = c * aip - s * aiq;
                    a[idx(i, q)] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[idx(p, j)];
                    let aqj = a[idx(q, j)];
                    a[idx(p, j)] = c * apj - s * aqj;
                    a[idx(q, j)] = s * apj + c * aqj;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[idx(i, i)]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).expect("finite eigenvalues"));
    ev
}

/// Top-k singular values of `m` via the Jacobi oracle on the small-side
/// Gram matrix, built with plain triple loops.
pub fn oracle_singular_values(m: &DenseMatrix, k: usize) -> Vec<f64> {
    let (n, d) = m.shape();
    let minor = n.min(d);
    assert!(k <= minor);
    let mut g = vec![0.0f64; minor * minor];
    if n >= d {
        for i in 0..d {
            for j in i..d {
                let mut acc = 0.0f64;
                for t in 0..n {
                    acc += m.get(t, i) as f64 * m.get(t, j) as f64;
                }
                g[i * d + j] = acc;
                g[j * d + i] = acc;
            }
        }
    } else {
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0f64;
                for t in 0..d {
                    acc += m.get(i, t) as f64 * m.get(j, t) as f64;
                }
                g[i * n + j] = acc;
                g[j * n + i] = acc;
            }
        }
    }
    jacobi_eigenvalues(g, minor)
        .into_iter()
        .take(k)
        .map(|ev| ev.max(0.0).sqrt())
        .collect()
}

/// Sensitivity of every factor entry by the direct triple loop:
/// the importance-weighted L1 mass the entry contributes to its row or
/// column of the reconstruction.
pub fn naive_sensitivity(
    u: &DenseMatrix,
    v: &DenseMatrix,
    z: &DenseMatrix,
) -> (Vec<f64>, Vec<f64>) {
    let (n, k) = u.shape();
    let (kv, d) = v.shape();
    assert_eq!(k, kv);
    assert_eq!(z.shape(), (n, d));
    let mut qu = vec![0.0f64; n * k];
    for i in 0..n {
        for j in 0..k {
            let mut acc = 0.0f64;
            for t in 0..d {
                acc += z.get(i, t) as f64 * (u.get(i, j) as f64 * v.get(j, t) as f64).abs();
            }
            qu[i * k + j] = acc;
        }
    }
    let mut qv = vec![0.0f64; k * d];
    for j in 0..k {
        for t in 0..d {
            let mut acc = 0.0f64;
            for i in 0..n {
                acc += z.get(i, t) as f64 * (u.get(i, j) as f64 * v.get(j, t) as f64).abs();
            }
            qv[j * d + t] = acc;
        }
    }
    (qu, qv)
}

/// Exact integer evaluation of the equal-budget sparsity levels, computed
/// in u128 with an iterative log.
pub fn sparsity_levels_oracle(n: u64, d: u64, r: u64, c: u64) -> (u64, u64) {
    fn bits_for(cells: u128) -> u128 {
        let mut bits = 0u128;
        let mut cap = 1u128;
        while cap < cells {
            cap *= 2;
            bits += 1;
        }
        bits
    }
    let k = (r + c) as u128;
    let level = |dim: u64| -> u64 {
        let cells = dim as u128 * k;
        let raw = 32u128 * r as u128 * dim as u128 / (32 + bits_for(cells));
        raw.min(cells) as u64
    };
    (level(n), level(d))
}

pub fn frob(m: &DenseMatrix) -> f64 {
    m.values()
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

pub fn frob_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| {
            let e = x as f64 - y as f64;
            e * e
        })
        .sum::<f64>()
        .sqrt()
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> DenseMatrix {
    let values: Vec<f32> = (0..n * d)
        .map(|_| (scale * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect();
    DenseMatrix::new(n, d, values).expect("valid shape")
}

/// Planted decaying-spectrum matrix: sum of sigma0 * decay^i outer products
/// of unit Gaussian vectors, plus an optional dense noise floor.
pub fn decaying_spectrum_matrix(
    rng: &mut ChaCha8Rng,
    n: usize,
    d: usize,
    rank: usize,
    sigma0: f64,
    decay: f64,
    noise: f64,
) -> DenseMatrix {
    let mut acc = vec![0.0f64; n * d];
    for i in 0..rank {
        let x = unit_vector(rng, n);
        let y = unit_vector(rng, d);
        let sigma = sigma0 * decay.powi(i as i32);
        for (row, &xv) in x.iter().enumerate() {
            for (col, &yv) in y.iter().enumerate() {
                acc[row * d + col] += sigma * xv * yv;
            }
        }
    }
    if noise > 0.0 {
        for v in &mut acc {
            *v += noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    DenseMatrix::new(n, d, acc.iter().map(|&v| v as f32).collect()).expect("valid shape")
}

fn unit_vector(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Random nonnegative importance values with spread, exercising non-uniform
/// weighting without zeros.
pub fn random_importance(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DenseMatrix {
    let values: Vec<f32> = (0..n * d)
        .map(|_| (0.05 + rng.sample::<f64, _>(StandardNormal).abs()) as f32)
        .collect();
    DenseMatrix::new(n, d, values).expect("valid shape")
}
