//! Bit-exact storage accounting.
//!
//! Every quantity here is an exact integer; no floating point enters any
//! cost. Values are stored as 32-bit floats and sparse entries carry a flat
//! index of ceil(log2(matrix size)) bits, so a layer compressed at rank r
//! with relaxation c must fit the dense rank-r factor cost 32*r*(n+d).

use crate::error::{Error, Result};
use crate::sparsify::SparseFactorPair;

/// Bits to store one value.
pub const VALUE_BITS: u64 = 32;

/// ceil(log2(x)) for x >= 1; the flat-index width for a matrix of x cells.
pub fn ceil_log2(x: u64) -> u32 {
    assert!(x >= 1, "ceil_log2 domain is x >= 1");
    if x == 1 {
        0
    } else {
        64 - (x - 1).leading_zeros()
    }
}

/// Bits to store rank-k factors densely: 32*k*(n+d).
pub fn svd_cost(n: u64, d: u64, k: u64) -> u64 {
    VALUE_BITS * k * (n + d)
}

/// Bits to store `num_entries` sparse entries of a rows*cols matrix:
/// (32 + ceil(log2(rows*cols))) per entry.
pub fn sparse_cost(num_entries: u64, rows: u64, cols: u64) -> u64 {
    (VALUE_BITS + ceil_log2(rows * cols) as u64) * num_entries
}

/// Entry budget for the pure-sparsification baseline on an n*d matrix at
/// rank-r budget: floor(32*r*(n+d) / (32 + ceil(log2(n*d)))).
pub fn sparse_only_level(n: u64, d: u64, r: u64) -> u64 {
    (VALUE_BITS * r * (n + d)) / (VALUE_BITS + ceil_log2(n * d) as u64)
}

/// Storage plan for one n*d layer at rank r with rank relaxation c.
///
/// `s_u`/`s_v` are the equal-budget sparsity levels: the largest entry
/// counts whose sparse cost stays within each factor's share of the dense
/// rank-r budget, clamped to the factor size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetSpec {
    pub n: u64,
    pub d: u64,
    pub r: u64,
    pub c: u64,
    /// Working rank r + c.
    pub k: u64,
    pub s_u: u64,
    pub s_v: u64,
    pub idx_bits_u: u32,
    pub idx_bits_v: u32,
    /// Dense rank-r factor cost; the hard per-layer budget.
    pub bits_svd: u64,
}

impl BudgetSpec {
    pub fn new(n: u64, d: u64, r: u64, c: u64) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Argument(format!(
                "layer dimensions must be positive, got {n}x{d}"
            )));
        }
        if r == 0 {
            return Err(Error::Argument("rank r must be >= 1".into()));
        }
        let k = r + c;
        let idx_bits_u = ceil_log2(n * k);
        let idx_bits_v = ceil_log2(d * k);
        let s_u = (VALUE_BITS * r * n / (VALUE_BITS + idx_bits_u as u64)).min(n * k);
        let s_v = (VALUE_BITS * r * d / (VALUE_BITS + idx_bits_v as u64)).min(d * k);
        Ok(Self {
            n,
            d,
            r,
            c,
            k,
            s_u,
            s_v,
            idx_bits_u,
            idx_bits_v,
            bits_svd: svd_cost(n, d, r),
        })
    }

    /// The hard per-layer payload budget in bits.
    pub fn budget_bits(&self) -> u64 {
        self.bits_svd
    }
}

/// Equal-budget sparsity levels (s_u, s_v) for a plan.
pub fn sparsity_levels(spec: &BudgetSpec) -> (u64, u64) {
    (spec.s_u, spec.s_v)
}

/// True iff the pair's exact payload bits fit the plan's budget.
///
/// The payload is the sparse cost of both factors at their own index
/// widths; record headers and byte padding are excluded.
pub fn assert_within_budget(pair: &SparseFactorPair, spec: &BudgetSpec) -> bool {
    let (n, ku) = pair.shape_u();
    let (kv, d) = pair.shape_v();
    if n as u64 != spec.n || d as u64 != spec.d || ku as u64 != spec.k || kv as u64 != spec.k {
        return false;
    }
    let cost_u = sparse_cost(pair.entries_u().len() as u64, n as u64, ku as u64);
    let cost_v = sparse_cost(pair.entries_v().len() as u64, kv as u64, d as u64);
    cost_u + cost_v <= spec.bits_svd
}
