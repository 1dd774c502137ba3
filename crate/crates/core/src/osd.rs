//! Importance-aware joint sparsification of SVD factors.
//!
//! The pipeline per layer: truncated SVD at working rank k = r + c,
//! sensitivity scores for every factor entry (how much importance-weighted
//! reconstruction mass the entry carries), then a single greedy descending
//! pass over all entries of both factors with exact bit accounting against
//! the dense rank-r budget. The magnitude baseline sparsifies each factor
//! independently instead. A sweep over c evaluates each candidate model
//! through a pluggable hook and keeps the best.
//!
//! Sensitivities are ranked in f64. The public matrices are f32 views;
//! ranking on them would let coarser rounding collapse distinct scores into
//! ties and make the retained set depend on value scale.

use std::io::Write as _;
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::budget::{assert_within_budget, BudgetSpec, VALUE_BITS};
use crate::error::{Error, Result};
use crate::linalg::{truncated_svd, FactorPair};
use crate::matio::{DenseMatrix, Layer, LayerSet};
use crate::sparsify::{top_s, LayerRecord, SparseFactorPair};

/// Nonnegative per-parameter importance weights for one n*d layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    matrix: DenseMatrix,
}

impl ImportanceMap {
    pub fn new(matrix: DenseMatrix) -> Result<Self> {
        if let Some(idx) = matrix.first_non_finite() {
            return Err(Error::Data(format!(
                "importance values must be finite, found non-finite at index {idx}"
            )));
        }
        if let Some(idx) = matrix.values().iter().position(|&v| v < 0.0) {
            return Err(Error::Data(format!(
                "importance values must be nonnegative, found {} at index {idx}",
                matrix.values()[idx]
            )));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn shape(&self) -> (usize, usize) {
        self.matrix.shape()
    }
}

/// Uniform importance; every parameter counts equally.
pub fn ones_importance(n: usize, d: usize) -> Result<ImportanceMap> {
    ImportanceMap::new(DenseMatrix::new(n, d, vec![1.0; n.checked_mul(d).ok_or_else(
        || Error::Argument(format!("importance map {n}x{d} overflows")),
    )?])?)
}

/// First-order importance: elementwise |grad * weights|.
pub fn importance_from_gradient(
    grad: &DenseMatrix,
    weights: &DenseMatrix,
) -> Result<ImportanceMap> {
    if grad.shape() != weights.shape() {
        return Err(Error::Structural(format!(
            "gradient is {}x{} but weights are {}x{}",
            grad.rows(),
            grad.cols(),
            weights.rows(),
            weights.cols()
        )));
    }
    let values: Vec<f32> = grad
        .values()
        .iter()
        .zip(weights.values())
        .map(|(&g, &w)| ((g as f64 * w as f64).abs()) as f32)
        .collect();
    ImportanceMap::new(DenseMatrix::new(grad.rows(), grad.cols(), values)?)
}

/// Per-entry sensitivity of both factors: the importance-weighted
/// reconstruction mass lost by zeroing that entry.
///
/// f32 matrices are the public view; f64 shadows drive selection so the
/// ranking is independent of display precision.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityPair {
    q_u: DenseMatrix,
    q_v: DenseMatrix,
    qu64: Vec<f64>,
    qv64: Vec<f64>,
}

impl SensitivityPair {
    /// Wraps externally computed scores; entries must be nonnegative and
    /// finite. The f32 values are promoted exactly, so selection matches
    /// what the matrices show.
    pub fn new(q_u: DenseMatrix, q_v: DenseMatrix) -> Result<Self> {
        for (name, m) in [("q_u", &q_u), ("q_v", &q_v)] {
            if let Some(idx) = m.first_non_finite() {
                return Err(Error::Data(format!(
                    "{name} must be finite, found non-finite at index {idx}"
                )));
            }
            if let Some(idx) = m.values().iter().position(|&v| v < 0.0) {
                return Err(Error::Data(format!(
                    "{name} must be nonnegative, found {} at index {idx}",
                    m.values()[idx]
                )));
            }
        }
        let qu64 = q_u.values().iter().map(|&v| v as f64).collect();
        let qv64 = q_v.values().iter().map(|&v| v as f64).collect();
        Ok(Self { q_u, q_v, qu64, qv64 })
    }

    fn from_f64(n: usize, k: usize, d: usize, qu64: Vec<f64>, qv64: Vec<f64>) -> Result<Self> {
        let demote = |v: &[f64]| -> Result<Vec<f32>> {
            v.iter()
                .map(|&x| {
                    let y = x as f32;
                    if y.is_finite() {
                        Ok(y)
                    } else {
                        Err(Error::Numeric(format!("sensitivity {x} overflows f32")))
                    }
                })
                .collect()
        };
        Ok(Self {
            q_u: DenseMatrix::new(n, k, demote(&qu64)?)?,
            q_v: DenseMatrix::new(k, d, demote(&qv64)?)?,
            qu64,
            qv64,
        })
    }

    /// n*k scores for u' entries.
    pub fn q_u(&self) -> &DenseMatrix {
        &self.q_u
    }

    /// k*d scores for v' entries.
    pub fn q_v(&self) -> &DenseMatrix {
        &self.q_v
    }
}

/// Sensitivity of every factor entry under importance map `z`.
///
/// q_u[i,j] = |u'[i,j]| * sum_t z[i,t]*|v'[j,t]| and
/// q_v[j,t] = |v'[j,t]| * sum_i z[i,t]*|u'[i,j]|, each computed through one
/// n*d*k matrix product on the absolute factors.
pub fn sensitivity(f: &FactorPair, z: &ImportanceMap) -> Result<SensitivityPair> {
    let (n, k, d) = (f.n(), f.rank, f.d());
    if z.shape() != (n, d) {
        return Err(Error::Structural(format!(
            "importance map is {}x{} but factors describe a {n}x{d} layer",
            z.shape().0,
            z.shape().1
        )));
    }
    let z64 = DMatrix::from_fn(n, d, |i, t| z.matrix().get(i, t) as f64);
    let v_abs_t = DMatrix::from_fn(d, k, |t, j| (f.v_prime.get(j, t) as f64).abs());
    let a = &z64 * &v_abs_t;
    let u_abs_t = DMatrix::from_fn(k, n, |j, i| (f.u_prime.get(i, j) as f64).abs());
    let b = &u_abs_t * &z64;
    let mut qu = vec![0.0f64; n * k];
    for i in 0..n {
        for j in 0..k {
            qu[i * k + j] = (f.u_prime.get(i, j) as f64).abs() * a[(i, j)];
        }
    }
    let mut qv = vec![0.0f64; k * d];
    for j in 0..k {
        for t in 0..d {
            qv[j * d + t] = (f.v_prime.get(j, t) as f64).abs() * b[(j, t)];
        }
    }
    SensitivityPair::from_f64(n, k, d, qu, qv)
}

/// Retains the globally most sensitive factor entries that fit the budget.
///
/// Candidates are every nonzero finite factor entry, ordered by descending
/// sensitivity with ties broken u'-before-v' then lower flat index. Entries
/// are taken in order with exact running bit accounting; the pass stops at
/// the first entry that would exceed `spec.bits_svd` (u' and v' entries can
/// cost different bits, so stopping keeps the selection a prefix of the
/// sensitivity order). Panics if `q` or `spec` disagree with `f`'s shapes.
pub fn joint_select(f: &FactorPair, q: &SensitivityPair, spec: &BudgetSpec) -> SparseFactorPair {
    let (n, k, d) = (f.n(), f.rank, f.d());
    assert_eq!(q.q_u.shape(), (n, k), "sensitivity q_u shape mismatch");
    assert_eq!(q.q_v.shape(), (k, d), "sensitivity q_v shape mismatch");
    assert!(
        spec.n == n as u64 && spec.d == d as u64 && spec.k == k as u64,
        "budget plan is for {}x{} at k={}, factors are {n}x{d} at k={k}",
        spec.n,
        spec.d,
        spec.k
    );
    let mut candidates: Vec<(f64, bool, u64, f32)> =
        Vec::with_capacity(n * k + k * d);
    for (flat, &val) in f.u_prime.values().iter().enumerate() {
        if val != 0.0 && val.is_finite() {
            candidates.push((q.qu64[flat], true, flat as u64, val));
        }
    }
    for (flat, &val) in f.v_prime.values().iter().enumerate() {
        if val != 0.0 && val.is_finite() {
            candidates.push((q.qv64[flat], false, flat as u64, val));
        }
    }
    candidates.sort_unstable_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite sensitivities")
            .then_with(|| b.1.cmp(&a.1))
            .then_with(|| a.2.cmp(&b.2))
    });
    let cost_u = VALUE_BITS + spec.idx_bits_u as u64;
    let cost_v = VALUE_BITS + spec.idx_bits_v as u64;
    let mut used = 0u64;
    let mut entries_u: Vec<(u64, f32)> = Vec::new();
    let mut entries_v: Vec<(u64, f32)> = Vec::new();
    for (_, is_u, idx, val) in candidates {
        let cost = if is_u { cost_u } else { cost_v };
        if used + cost > spec.bits_svd {
            break;
        }
        used += cost;
        if is_u {
            entries_u.push((idx, val));
        } else {
            entries_v.push((idx, val));
        }
    }
    entries_u.sort_unstable_by_key(|e| e.0);
    entries_v.sort_unstable_by_key(|e| e.0);
    let pair = SparseFactorPair::new((n, k), (k, d), entries_u, entries_v)
        .expect("entries are canonical by construction");
    debug_assert!(assert_within_budget(&pair, spec));
    pair
}

/// Magnitude baseline: rank-(r+c) SVD, then independent per-factor top-s
/// sparsification at the equal-budget levels.
pub fn compress_mag(delta: &DenseMatrix, r: usize, c: usize) -> Result<SparseFactorPair> {
    let (n, d) = delta.shape();
    let spec = BudgetSpec::new(n as u64, d as u64, r as u64, c as u64)?;
    let f = truncated_svd(delta, r + c)?;
    let u = top_s(&f.u_prime, spec.s_u);
    let v = top_s(&f.v_prime, spec.s_v);
    let pair = SparseFactorPair::new(
        (n, r + c),
        (r + c, d),
        u.entries().to_vec(),
        v.entries().to_vec(),
    )?;
    debug_assert!(assert_within_budget(&pair, &spec));
    Ok(pair)
}

/// Full importance-aware path: SVD, sensitivities, joint budgeted selection.
pub fn compress_osd(
    delta: &DenseMatrix,
    z: &ImportanceMap,
    r: usize,
    c: usize,
) -> Result<SparseFactorPair> {
    let (n, d) = delta.shape();
    if z.shape() != (n, d) {
        return Err(Error::Structural(format!(
            "importance map is {}x{} but the layer is {n}x{d}",
            z.shape().0,
            z.shape().1
        )));
    }
    let spec = BudgetSpec::new(n as u64, d as u64, r as u64, c as u64)?;
    let f = truncated_svd(delta, r + c)?;
    let q = sensitivity(&f, z)?;
    Ok(joint_select(&f, &q, &spec))
}

/// Importance-weighted L1 distance between a delta and its reconstruction.
pub fn weighted_l1_error(
    delta: &DenseMatrix,
    z: &ImportanceMap,
    reconstruction: &DenseMatrix,
) -> Result<f64> {
    if delta.shape() != reconstruction.shape() || z.shape() != delta.shape() {
        return Err(Error::Structural(format!(
            "shapes disagree: delta {}x{}, importance {}x{}, reconstruction {}x{}",
            delta.rows(),
            delta.cols(),
            z.shape().0,
            z.shape().1,
            reconstruction.rows(),
            reconstruction.cols()
        )));
    }
    let mut acc = 0.0f64;
    for ((&dv, &zv), &rv) in delta
        .values()
        .iter()
        .zip(z.matrix().values())
        .zip(reconstruction.values())
    {
        acc += zv as f64 * (dv as f64 - rv as f64).abs();
    }
    Ok(acc)
}

/// Scores one candidate model per c during the sweep; higher is better.
#[derive(Debug, Clone)]
pub enum EvaluationHook<'a> {
    /// Negated importance-weighted L1 error summed over all layers.
    Proxy,
    /// Shell command template; `{}` is replaced with the path of a temp
    /// container holding pretrained + reconstruction per layer, and the
    /// command's stdout must be a single decimal score.
    External {
        command: String,
        pretrained: &'a LayerSet,
    },
}

/// One candidate from the sweep: every layer compressed at this c.
#[derive(Debug, Clone)]
pub struct CandidateEval {
    pub c: u32,
    /// Hook score; None when the hook failed for this candidate.
    pub score: Option<f64>,
    /// Failure reason when `score` is None.
    pub hook_error: Option<String>,
    /// Per-layer pairs, in the deltas' layer order.
    pub pairs: Vec<SparseFactorPair>,
    /// Serialized size of all layer records: headers, payloads, padding.
    pub total_bits: u64,
    /// Fixed record-header share of `total_bits`.
    pub header_bits: u64,
    pub wall_ms: u64,
}

/// All sweep candidates plus the winning c.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub per_c: Vec<CandidateEval>,
    pub c_star: u32,
}

impl SweepResult {
    /// The candidate selected as c_star.
    pub fn best(&self) -> &CandidateEval {
        self.per_c
            .iter()
            .find(|row| row.c == self.c_star)
            .expect("c_star always refers to a recorded candidate")
    }
}

/// Compresses every layer at each c in 1..=max_c, scores each candidate
/// model through the hook, and picks c_star = argmax score (ties to the
/// smaller c). Hook failures are recorded per candidate and skipped for
/// c_star; only when every candidate fails does the sweep return an
/// evaluation error (carrying the first failing c). Compression errors
/// abort immediately.
pub fn sweep_c(
    deltas: &LayerSet,
    importance: &[ImportanceMap],
    r: usize,
    max_c: usize,
    hook: &EvaluationHook,
) -> Result<SweepResult> {
    if r == 0 {
        return Err(Error::Argument("rank r must be >= 1".into()));
    }
    if max_c == 0 {
        return Err(Error::Argument("sweep bound C must be >= 1".into()));
    }
    if importance.len() != deltas.len() {
        return Err(Error::Structural(format!(
            "{} importance maps for {} layers",
            importance.len(),
            deltas.len()
        )));
    }
    for (layer, z) in deltas.layers().iter().zip(importance) {
        let (n, d) = layer.matrix.shape();
        if z.shape() != (n, d) {
            return Err(Error::Structural(format!(
                "importance map for layer '{}' is {}x{}, layer is {n}x{d}",
                layer.id,
                z.shape().0,
                z.shape().1
            )));
        }
        if r + max_c > n.min(d) {
            return Err(Error::Argument(format!(
                "layer '{}' is {n}x{d}; rank {r} with C={max_c} needs min(n,d) >= {}",
                layer.id,
                r + max_c
            )));
        }
    }
    if let EvaluationHook::External { command, pretrained } = hook {
        if !command.contains("{}") {
            return Err(Error::Argument(
                "hook command must contain a {} placeholder for the candidate path".into(),
            ));
        }
        for layer in deltas.layers() {
            let base = pretrained.get(&layer.id).ok_or_else(|| {
                Error::Structural(format!(
                    "pretrained container has no layer '{}' required by the hook",
                    layer.id
                ))
            })?;
            if base.matrix.shape() != layer.matrix.shape() {
                return Err(Error::Structural(format!(
                    "layer '{}': pretrained is {}x{}, delta is {}x{}",
                    layer.id,
                    base.matrix.rows(),
                    base.matrix.cols(),
                    layer.matrix.rows(),
                    layer.matrix.cols()
                )));
            }
        }
    }
    let mut per_c: Vec<CandidateEval> = Vec::with_capacity(max_c);
    for c in 1..=max_c {
        let started = Instant::now();
        let pairs = deltas
            .layers()
            .par_iter()
            .zip(importance.par_iter())
            .map(|(layer, z)| compress_osd(&layer.matrix, z, r, c))
            .collect::<Result<Vec<_>>>()?;
        let reconstructions: Vec<DenseMatrix> =
            pairs.par_iter().map(|p| p.reconstruct()).collect();
        let score = evaluate_hook(hook, deltas, importance, &reconstructions);
        let (mut total_bits, mut header_bits) = (0u64, 0u64);
        for pair in &pairs {
            let stats = LayerRecord::new(pair.clone(), r as u32, c as u32)?.stats();
            total_bits += stats.header_bits + stats.payload_bits + stats.padding_bits;
            header_bits += stats.header_bits;
        }
        per_c.push(CandidateEval {
            c: c as u32,
            score: score.as_ref().ok().copied(),
            hook_error: score.err(),
            pairs,
            total_bits,
            header_bits,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    let mut best: Option<(u32, f64)> = None;
    for row in &per_c {
        if let Some(s) = row.score {
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((row.c, s));
            }
        }
    }
    match best {
        Some((c_star, _)) => Ok(SweepResult { per_c, c_star }),
        None => {
            let first = per_c.first().expect("max_c >= 1");
            Err(Error::Evaluation {
                c: first.c,
                msg: first
                    .hook_error
                    .clone()
                    .unwrap_or_else(|| "hook produced no score".into()),
            })
        }
    }
}

/// Runs the hook on one candidate; Err carries the failure reason.
fn evaluate_hook(
    hook: &EvaluationHook,
    deltas: &LayerSet,
    importance: &[ImportanceMap],
    reconstructions: &[DenseMatrix],
) -> std::result::Result<f64, String> {
    match hook {
        EvaluationHook::Proxy => {
            let mut total = 0.0f64;
            for ((layer, z), rec) in deltas.layers().iter().zip(importance).zip(reconstructions)
            {
                total += weighted_l1_error(&layer.matrix, z, rec)
                    .expect("shapes validated before the sweep");
            }
            Ok(-total)
        }
        EvaluationHook::External { command, pretrained } => {
            let layers: Vec<Layer> = deltas
                .layers()
                .iter()
                .zip(reconstructions)
                .map(|(layer, rec)| {
                    let base = pretrained
                        .get(&layer.id)
                        .expect("presence validated before the sweep");
                    let values: Vec<f32> = base
                        .matrix
                        .values()
                        .iter()
                        .zip(rec.values())
                        .map(|(&w, &r)| (w as f64 + r as f64) as f32)
                        .collect();
                    Ok(Layer {
                        id: layer.id.clone(),
                        matrix: DenseMatrix::new(rec.rows(), rec.cols(), values)?,
                    })
                })
                .collect::<Result<_>>()
                .map_err(|e: Error| format!("candidate assembly failed: {e}"))?;
            let candidate = LayerSet::new(layers)
                .and_then(|set| set.to_bytes())
                .map_err(|e| format!("candidate container failed: {e}"))?;
            let mut file = tempfile::Builder::new()
                .prefix("osd-candidate-")
                .suffix(".sdt")
                .tempfile()
                .map_err(|e| format!("temp file: {e}"))?;
            file.write_all(&candidate)
                .and_then(|_| file.flush())
                .map_err(|e| format!("temp file write: {e}"))?;
            let path = file.path().to_string_lossy().into_owned();
            let rendered = command.replace("{}", &path);
            let output = Command::new("sh")
                .arg("-c")
                .arg(&rendered)
                .output()
                .map_err(|e| format!("hook spawn failed: {e}"))?;
            if !output.status.success() {
                return Err(format!(
                    "hook exited with {}: {}",
                    output.status,
                    String::from_utf8_lossy(&output.stderr).trim()
                ));
            }
            let stdout = String::from_utf8_lossy(&output.stdout);
            let score: f64 = stdout
                .trim()
                .parse()
                .map_err(|e| format!("hook output {:?} is not a score: {e}", stdout.trim()))?;
            if !score.is_finite() {
                return Err(format!("hook score {score} is not finite"));
            }
            Ok(score)
        }
    }
}
