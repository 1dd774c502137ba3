//! Layer sets and the `SDT1` on-disk container.
//!
//! A layer set is an ordered list of uniquely named dense f32 matrices. The
//! container layout is little-endian throughout: magic `SDT1`, a u32 layer
//! count, then per layer a u16 id length, the UTF-8 id, u32 rows, u32 cols,
//! and rows*cols f32 values in row-major order. The writer is canonical, so
//! saving a loaded set reproduces the input bytes exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SDT1_MAGIC: &[u8; 4] = b"SDT1";

/// Row-major dense matrix of f32 values. Dimensions are positive and fit u32.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Argument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if rows > u32::MAX as usize || cols > u32::MAX as usize {
            return Err(Error::Argument(format!(
                "matrix dimensions must fit u32, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::Argument(format!(
                "value count {} does not match {rows}x{cols}",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
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

    /// Total element count.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        debug_assert!(row < self.rows && col < self.cols);
        self.values[row * self.cols + col]
    }

    /// Index of the first non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }
}

/// One named matrix inside a layer set.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub id: String,
    pub matrix: DenseMatrix,
}

/// Ordered collection of layers with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSet {
    layers: Vec<Layer>,
}

impl LayerSet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        for (i, layer) in layers.iter().enumerate() {
            if layer.id.len() > u16::MAX as usize {
                return Err(Error::Argument(format!(
                    "layer id at position {i} exceeds {} bytes",
                    u16::MAX
                )));
            }
            if layers[..i].iter().any(|l| l.id == layer.id) {
                return Err(Error::Format(format!("duplicate layer id '{}'", layer.id)));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Serializes to canonical `SDT1` bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.layers.len() > u32::MAX as usize {
            return Err(Error::Argument("more than u32::MAX layers".into()));
        }
        let payload: usize = self
            .layers
            .iter()
            .map(|l| 2 + l.id.len() + 8 + l.matrix.len() * 4)
            .sum();
        let mut out = Vec::with_capacity(8 + payload);
        out.extend_from_slice(SDT1_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.id.len() as u16).to_le_bytes());
            out.extend_from_slice(layer.id.as_bytes());
            out.extend_from_slice(&(layer.matrix.rows as u32).to_le_bytes());
            out.extend_from_slice(&(layer.matrix.cols as u32).to_le_bytes());
            for v in &layer.matrix.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses `SDT1` bytes, rejecting truncation, trailing data, duplicate
    /// ids, zero dimensions, and non-finite values.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader { buf: bytes, pos: 0 };
        let magic = rd.take(4, "magic", None)?;
        if magic != SDT1_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"SDT1\"",
                magic
            )));
        }
        let count = rd.u32("layer count", None)?;
        let mut layers = Vec::with_capacity(count as usize);
        for i in 0..count {
            let fallback = format!("#{i}");
            let id_len = rd.u16("id length", Some(&fallback))? as usize;
            let id_bytes = rd.take(id_len, "id", Some(&fallback))?;
            let id = std::str::from_utf8(id_bytes)
                .map_err(|_| Error::Format(format!("layer {fallback}: id is not UTF-8")))?
                .to_string();
            let rows = rd.u32("rows", Some(&id))? as usize;
            let cols = rd.u32("cols", Some(&id))? as usize;
            if rows == 0 || cols == 0 {
                return Err(Error::Format(format!(
                    "layer '{id}': zero dimension ({rows}x{cols})"
                )));
            }
            let n = rows * cols;
            let raw = rd.take(n * 4, "payload", Some(&id))?;
            let mut values = Vec::with_capacity(n);
            for (j, chunk) in raw.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(chunk.try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::Data(format!(
                        "layer '{id}': non-finite value at index {j}"
                    )));
                }
                values.push(v);
            }
            layers.push(Layer {
                id,
                matrix: DenseMatrix::new(rows, cols, values)?,
            });
        }
        if rd.pos != bytes.len() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes after last layer",
                bytes.len() - rd.pos
            )));
        }
        LayerSet::new(layers)
    }
}

pub(crate) struct ByteReader<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn take(&mut self, n: usize, what: &str, layer: Option<&str>) -> Result<&'a [u8]> {
        let remain = self.buf.len() - self.pos;
        if remain < n {
            let ctx = layer.map(|l| format!("layer {l}: ")).unwrap_or_default();
            return Err(Error::Integrity(format!(
                "{ctx}truncated {what} (need {n} bytes, {remain} remain)"
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self, what: &str, layer: Option<&str>) -> Result<u8> {
        Ok(self.take(1, what, layer)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str, layer: Option<&str>) -> Result<u16> {
        let b = self.take(2, what, layer)?;
        Ok(u16::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str, layer: Option<&str>) -> Result<u32> {
        let b = self.take(4, what, layer)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str, layer: Option<&str>) -> Result<u64> {
        let b = self.take(8, what, layer)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Loads an `SDT1` container from disk.
pub fn load_layer_set(path: &Path) -> Result<LayerSet> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    LayerSet::from_bytes(&bytes)
}

/// Writes an `SDT1` container; the encoding is canonical.
pub fn save_layer_set(set: &LayerSet, path: &Path) -> Result<()> {
    let bytes = set.to_bytes()?;
    fs::write(path, bytes)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(())
}

/// Per-layer difference `finetuned - pretrained`.
///
/// Both sets must have the same layer ids in the same order with matching
/// shapes; every mismatch is listed in one structural error.
pub fn delta(finetuned: &LayerSet, pretrained: &LayerSet) -> Result<LayerSet> {
    let mut problems = Vec::new();
    if finetuned.len() != pretrained.len() {
        problems.push(format!(
            "layer counts differ ({} vs {})",
            finetuned.len(),
            pretrained.len()
        ));
    }
    for (f, p) in finetuned.layers().iter().zip(pretrained.layers()) {
        if f.id != p.id {
            problems.push(format!("id mismatch '{}' vs '{}'", f.id, p.id));
        } else if f.matrix.shape() != p.matrix.shape() {
            problems.push(format!(
                "layer '{}': shape {}x{} vs {}x{}",
                f.id,
                f.matrix.rows(),
                f.matrix.cols(),
                p.matrix.rows(),
                p.matrix.cols()
            ));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Structural(problems.join("; ")));
    }
    let mut layers = Vec::with_capacity(finetuned.len());
    for (f, p) in finetuned.layers().iter().zip(pretrained.layers()) {
        let mut values = Vec::with_capacity(f.matrix.len());
        for (j, (a, b)) in f.matrix.values().iter().zip(p.matrix.values()).enumerate() {
            let v = a - b;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "layer '{}': difference overflows at index {j}",
                    f.id
                )));
            }
            values.push(v);
        }
        layers.push(Layer {
            id: f.id.clone(),
            matrix: DenseMatrix::new(f.matrix.rows(), f.matrix.cols(), values)?,
        });
    }
    LayerSet::new(layers)
}

/// Role-to-path manifest for a set of related containers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetuned: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient: Option<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Ok(())
    }
}
