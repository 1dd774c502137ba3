//! Compressed-model container: a directory holding `manifest.json` plus one
//! record file per layer under `records/`.
//!
//! Record kinds: `pair` (jointly sparsified factor pair), `dense` (full
//! truncated-SVD factors stored as a two-matrix container, payload exactly
//! the dense budget), `sparse` (top-s of the raw delta, no factorization).
//! An all-zero delta becomes an empty `pair` record under every method, so
//! decompression reproduces the pretrained weights bit-exactly.
//!
//! Every save re-verifies the per-layer bit budget and refuses to write a
//! violating record.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::{self, BudgetSpec};
use crate::error::{Error, Result};
use crate::linalg::truncated_svd;
use crate::matio::{DenseMatrix, Layer, LayerSet};
use crate::osd::{compress_mag, compress_osd, ImportanceMap};
use crate::sparsify::{top_s, LayerRecord, SparseFactorPair, SparseMatrixRecord};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const RECORDS_DIR: &str = "records";
const MODEL_FORMAT: &str = "osd-model";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    TruncSvd,
    Mag,
    Osd,
    SparseOnly,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truncsvd" => Ok(Self::TruncSvd),
            "mag" => Ok(Self::Mag),
            "osd" => Ok(Self::Osd),
            "sparse-only" => Ok(Self::SparseOnly),
            other => Err(Error::Argument(format!(
                "unknown method '{other}', expected truncsvd, mag, osd, or sparse-only"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TruncSvd => "truncsvd",
            Self::Mag => "mag",
            Self::Osd => "osd",
            Self::SparseOnly => "sparse-only",
        })
    }
}

/// One layer's stored form.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerPayload {
    Pair(LayerRecord),
    /// Truncated-SVD factors kept dense: u is n*k, v is k*d.
    Dense { u: DenseMatrix, v: DenseMatrix },
    Sparse(SparseMatrixRecord),
}

impl LayerPayload {
    fn kind(&self) -> &'static str {
        match self {
            Self::Pair(_) => "pair",
            Self::Dense { .. } => "dense",
            Self::Sparse(_) => "sparse",
        }
    }

    fn extension(&self) -> &'static str {
        match self {
            Self::Pair(_) => "osd1",
            Self::Dense { .. } => "sdt",
            Self::Sparse(_) => "osds",
        }
    }

    fn shape(&self) -> (usize, usize) {
        match self {
            Self::Pair(rec) => (rec.pair.shape_u().0, rec.pair.shape_v().1),
            Self::Dense { u, v } => (u.rows(), v.cols()),
            Self::Sparse(rec) => (rec.matrix.rows(), rec.matrix.cols()),
        }
    }

    fn encode(&self) -> Result<Vec<u8>> {
        match self {
            Self::Pair(rec) => Ok(rec.encode()),
            Self::Dense { u, v } => LayerSet::new(vec![
                Layer { id: "u".into(), matrix: u.clone() },
                Layer { id: "v".into(), matrix: v.clone() },
            ])?
            .to_bytes(),
            Self::Sparse(rec) => Ok(rec.encode()),
        }
    }

    fn reconstruct(&self) -> Result<DenseMatrix> {
        match self {
            Self::Pair(rec) => Ok(rec.pair.reconstruct()),
            Self::Dense { u, v } => {
                let (n, k, d) = (u.rows(), u.cols(), v.cols());
                let uf = DMatrix::from_fn(n, k, |i, j| u.get(i, j) as f64);
                let vf = DMatrix::from_fn(k, d, |i, j| v.get(i, j) as f64);
                let prod = uf * vf;
                DenseMatrix::new(
                    n,
                    d,
                    (0..n * d).map(|f| prod[(f / d, f % d)] as f32).collect(),
                )
            }
            Self::Sparse(rec) => Ok(rec.matrix.densify()),
        }
    }
}

/// Per-layer size accounting for reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerStats {
    pub id: String,
    pub kind: &'static str,
    pub rows: usize,
    pub cols: usize,
    /// Value plus index bits, the quantity the budget constrains.
    pub payload_bits: u64,
    /// Fixed header fields of the record file.
    pub header_bits: u64,
    /// Byte-alignment padding inside the record file.
    pub padding_bits: u64,
    /// Serialized record file size in bits.
    pub file_bits: u64,
    /// Dense rank-r budget 32 * r * (rows + cols).
    pub budget_bits: u64,
}

#[derive(Debug, Clone)]
pub struct CompressedLayer {
    pub id: String,
    pub payload: LayerPayload,
}

/// A full compressed model held in memory; save/load moves it to and from
/// the directory layout.
#[derive(Debug, Clone)]
pub struct CompressedModel {
    pub method: Method,
    pub rank: u32,
    pub c: u32,
    /// Path of the pretrained container recorded for later decompression.
    pub pretrained: Option<String>,
    layers: Vec<CompressedLayer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    format: String,
    version: u32,
    method: String,
    rank: u32,
    c: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pretrained: Option<String>,
    layers: Vec<ManifestLayer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLayer {
    id: String,
    kind: String,
    record: String,
}

impl CompressedModel {
    /// Wraps already-built layers; callers normally use [`compress_model`].
    pub fn new(
        method: Method,
        rank: u32,
        c: u32,
        pretrained: Option<String>,
        layers: Vec<CompressedLayer>,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Argument("rank r must be >= 1".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for layer in &layers {
            if !seen.insert(layer.id.as_str()) {
                return Err(Error::Format(format!("duplicate layer id '{}'", layer.id)));
            }
        }
        let model = Self { method, rank, c, pretrained, layers };
        model.verify_budgets()?;
        Ok(model)
    }

    pub fn layers(&self) -> &[CompressedLayer] {
        &self.layers
    }

    /// Budget check for every layer; a structural violation anywhere makes
    /// the whole model unwritable.
    fn verify_budgets(&self) -> Result<()> {
        for layer in &self.layers {
            let stats = layer_stats(layer, self.rank)?;
            if stats.payload_bits > stats.budget_bits {
                return Err(Error::Structural(format!(
                    "layer '{}' payload {} bits exceeds budget {} bits",
                    layer.id, stats.payload_bits, stats.budget_bits
                )));
            }
            if let LayerPayload::Pair(rec) = &layer.payload {
                if rec.r != self.rank {
                    return Err(Error::Structural(format!(
                        "layer '{}' record rank {} differs from model rank {}",
                        layer.id, rec.r, self.rank
                    )));
                }
                let (n, d) = layer.payload.shape();
                let spec =
                    BudgetSpec::new(n as u64, d as u64, rec.r as u64, rec.c as u64)?;
                if !budget::assert_within_budget(&rec.pair, &spec) {
                    return Err(Error::Structural(format!(
                        "layer '{}' sparse pair does not fit its budget plan",
                        layer.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes manifest plus records under `dir`, creating it as needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.verify_budgets()?;
        let records_dir = dir.join(RECORDS_DIR);
        fs::create_dir_all(&records_dir)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", records_dir.display()))))?;
        let mut manifest_layers = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let name = format!("{idx:04}.{}", layer.payload.extension());
            let rel = format!("{RECORDS_DIR}/{name}");
            let path = records_dir.join(&name);
            fs::write(&path, layer.payload.encode()?)
                .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
            manifest_layers.push(ManifestLayer {
                id: layer.id.clone(),
                kind: layer.payload.kind().to_string(),
                record: rel,
            });
        }
        let manifest = ModelManifest {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            method: self.method.to_string(),
            rank: self.rank,
            c: self.c,
            pretrained: self.pretrained.clone(),
            layers: manifest_layers,
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        let path = dir.join(MANIFEST_NAME);
        fs::write(&path, text)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", manifest_path.display()))))?;
        let manifest: ModelManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format != MODEL_FORMAT {
            return Err(Error::Format(format!(
                "unexpected model format '{}'",
                manifest.format
            )));
        }
        if manifest.version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {}",
                manifest.version
            )));
        }
        let method: Method = manifest.method.parse().map_err(|_| {
            Error::Format(format!("manifest names unknown method '{}'", manifest.method))
        })?;
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for entry in &manifest.layers {
            let path = resolve_record_path(dir, &entry.record)?;
            let bytes = fs::read(&path)
                .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
            let payload = match entry.kind.as_str() {
                "pair" => LayerPayload::Pair(LayerRecord::decode(&bytes)?),
                "dense" => decode_dense(&bytes)?,
                "sparse" => LayerPayload::Sparse(SparseMatrixRecord::decode(&bytes)?),
                other => {
                    return Err(Error::Format(format!(
                        "layer '{}' has unknown record kind '{other}'",
                        entry.id
                    )))
                }
            };
            layers.push(CompressedLayer { id: entry.id.clone(), payload });
        }
        Self::new(method, manifest.rank, manifest.c, manifest.pretrained.clone(), layers)
    }

    /// Densifies every layer back to a delta container.
    pub fn reconstruct_deltas(&self) -> Result<LayerSet> {
        let reconstructed = self
            .layers
            .par_iter()
            .map(|layer| {
                Ok(Layer {
                    id: layer.id.clone(),
                    matrix: layer.payload.reconstruct()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        LayerSet::new(reconstructed)
    }

    pub fn layer_stats(&self) -> Result<Vec<LayerStats>> {
        self.layers
            .iter()
            .map(|layer| layer_stats(layer, self.rank))
            .collect()
    }
}

fn resolve_record_path(dir: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute()
        || p.components()
            .any(|c| matches!(c, std::path::Component::ParentDir))
    {
        return Err(Error::Format(format!(
            "record path '{rel}' must stay inside the model directory"
        )));
    }
    Ok(dir.join(p))
}

fn decode_dense(bytes: &[u8]) -> Result<LayerPayload> {
    let set = LayerSet::from_bytes(bytes)?;
    let u = set
        .get("u")
        .ok_or_else(|| Error::Format("dense record is missing factor 'u'".into()))?;
    let v = set
        .get("v")
        .ok_or_else(|| Error::Format("dense record is missing factor 'v'".into()))?;
    if set.len() != 2 {
        return Err(Error::Format(format!(
            "dense record holds {} matrices, expected u and v",
            set.len()
        )));
    }
    if u.matrix.cols() != v.matrix.rows() {
        return Err(Error::Format(format!(
            "dense factors disagree on rank: u is {}x{}, v is {}x{}",
            u.matrix.rows(),
            u.matrix.cols(),
            v.matrix.rows(),
            v.matrix.cols()
        )));
    }
    Ok(LayerPayload::Dense {
        u: u.matrix.clone(),
        v: v.matrix.clone(),
    })
}

fn layer_stats(layer: &CompressedLayer, rank: u32) -> Result<LayerStats> {
    let (rows, cols) = layer.payload.shape();
    let budget_bits = budget::svd_cost(rows as u64, cols as u64, rank as u64);
    let file_bits = layer.payload.encode()?.len() as u64 * 8;
    let (payload_bits, header_bits, padding_bits) = match &layer.payload {
        LayerPayload::Pair(rec) => {
            let s = rec.stats();
            (s.payload_bits, s.header_bits, s.padding_bits)
        }
        LayerPayload::Dense { u, v } => {
            let payload = budget::svd_cost(u.rows() as u64, v.cols() as u64, u.cols() as u64);
            (payload, file_bits - payload, 0)
        }
        LayerPayload::Sparse(rec) => {
            let s = rec.stats();
            (s.payload_bits, s.header_bits, s.padding_bits)
        }
    };
    debug_assert_eq!(file_bits, payload_bits + header_bits + padding_bits);
    Ok(LayerStats {
        id: layer.id.clone(),
        kind: layer.payload.kind(),
        rows,
        cols,
        payload_bits,
        header_bits,
        padding_bits,
        file_bits,
        budget_bits,
    })
}

/// Compresses every delta layer under `method` at rank `r` and relaxation
/// `c` (ignored by truncsvd and sparse-only). `importance` must be given
/// for method=osd, one map per layer in container order.
pub fn compress_model(
    deltas: &LayerSet,
    importance: Option<&[ImportanceMap]>,
    method: Method,
    r: usize,
    c: usize,
    pretrained: Option<String>,
) -> Result<CompressedModel> {
    if r == 0 {
        return Err(Error::Argument("rank r must be >= 1".into()));
    }
    let stored_c = match method {
        Method::Mag | Method::Osd => c as u32,
        Method::TruncSvd | Method::SparseOnly => 0,
    };
    if method == Method::Osd {
        let maps = importance.ok_or_else(|| {
            Error::Argument("method osd requires an importance map per layer".into())
        })?;
        if maps.len() != deltas.len() {
            return Err(Error::Structural(format!(
                "{} importance maps for {} layers",
                maps.len(),
                deltas.len()
            )));
        }
    }
    let layers = deltas
        .layers()
        .par_iter()
        .enumerate()
        .map(|(idx, layer)| {
            let payload = compress_layer(layer, importance.map(|m| &m[idx]), method, r, c)
                .map_err(|e| match e {
                    Error::Argument(msg) => {
                        Error::Argument(format!("layer '{}': {msg}", layer.id))
                    }
                    other => other,
                })?;
            Ok(CompressedLayer { id: layer.id.clone(), payload })
        })
        .collect::<Result<Vec<_>>>()?;
    CompressedModel::new(method, r as u32, stored_c, pretrained, layers)
}

fn compress_layer(
    layer: &Layer,
    z: Option<&ImportanceMap>,
    method: Method,
    r: usize,
    c: usize,
) -> Result<LayerPayload> {
    let (n, d) = layer.matrix.shape();
    if layer.matrix.values().iter().all(|&v| v == 0.0) {
        let k = match method {
            Method::Mag | Method::Osd => r + c,
            Method::TruncSvd | Method::SparseOnly => r,
        };
        let stored_c = match method {
            Method::Mag | Method::Osd => c as u32,
            Method::TruncSvd | Method::SparseOnly => 0,
        };
        let pair = SparseFactorPair::empty(n, k, d)?;
        return Ok(LayerPayload::Pair(LayerRecord::new(pair, r as u32, stored_c)?));
    }
    match method {
        Method::TruncSvd => {
            let f = truncated_svd(&layer.matrix, r)?;
            Ok(LayerPayload::Dense { u: f.u_prime, v: f.v_prime })
        }
        Method::Mag => {
            let pair = compress_mag(&layer.matrix, r, c)?;
            Ok(LayerPayload::Pair(LayerRecord::new(pair, r as u32, c as u32)?))
        }
        Method::Osd => {
            let z = z.expect("validated by compress_model");
            if z.shape() != (n, d) {
                return Err(Error::Structural(format!(
                    "importance map for layer '{}' is {}x{}, layer is {n}x{d}",
                    layer.id,
                    z.shape().0,
                    z.shape().1
                )));
            }
            let pair = compress_osd(&layer.matrix, z, r, c)?;
            Ok(LayerPayload::Pair(LayerRecord::new(pair, r as u32, c as u32)?))
        }
        Method::SparseOnly => {
            let s = budget::sparse_only_level(n as u64, d as u64, r as u64);
            let sparse = top_s(&layer.matrix, s);
            Ok(LayerPayload::Sparse(SparseMatrixRecord::new(sparse, r as u32)?))
        }
    }
}

/// Adds reconstructed deltas onto pretrained weights. Entries whose delta
/// is exactly zero keep the pretrained bit pattern, so empty records give
/// back the pretrained container unchanged.
pub fn apply_delta(pretrained: &LayerSet, deltas: &LayerSet) -> Result<LayerSet> {
    if pretrained.len() != deltas.len() {
        return Err(Error::Structural(format!(
            "{} pretrained layers but {} delta layers",
            pretrained.len(),
            deltas.len()
        )));
    }
    let layers = pretrained
        .layers()
        .iter()
        .map(|base| {
            let delta = deltas.get(&base.id).ok_or_else(|| {
                Error::Structural(format!("no delta for layer '{}'", base.id))
            })?;
            if delta.matrix.shape() != base.matrix.shape() {
                return Err(Error::Structural(format!(
                    "layer '{}': pretrained is {}x{}, delta is {}x{}",
                    base.id,
                    base.matrix.rows(),
                    base.matrix.cols(),
                    delta.matrix.rows(),
                    delta.matrix.cols()
                )));
            }
            let values: Vec<f32> = base
                .matrix
                .values()
                .iter()
                .zip(delta.matrix.values())
                .map(|(&w, &dl)| {
                    if dl == 0.0 {
                        w
                    } else {
                        (w as f64 + dl as f64) as f32
                    }
                })
                .collect();
            Ok(Layer {
                id: base.id.clone(),
                matrix: DenseMatrix::new(base.matrix.rows(), base.matrix.cols(), values)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LayerSet::new(layers)
}
