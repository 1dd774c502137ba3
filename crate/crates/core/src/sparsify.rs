//! Magnitude sparsification and the bit-packed record codecs.
//!
//! Sparse entries are (flat row-major index, f32 value) with strictly
//! increasing indices and only nonzero finite values. Index streams are
//! bit-packed at ceil(log2(matrix size)) bits per index, big-endian within
//! the stream, zero-padded to a byte boundary; value streams are raw
//! little-endian f32. The factor-pair record magic is `OSD1`, the
//! single-matrix record magic is `OSDS`.

use crate::budget::{ceil_log2, sparse_cost};
use crate::error::{Error, Result};
use crate::matio::{ByteReader, DenseMatrix};

const PAIR_MAGIC: &[u8; 4] = b"OSD1";
const SINGLE_MAGIC: &[u8; 4] = b"OSDS";

/// Sparse view of a single matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<(u64, f32)>,
}

impl SparseMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<(u64, f32)>) -> Result<Self> {
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
        validate_entries(&entries, rows as u64 * cols as u64).map_err(Error::Argument)?;
        Ok(Self { rows, cols, entries })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[(u64, f32)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Flat-index width for this matrix's cells.
    pub fn idx_bits(&self) -> u8 {
        ceil_log2(self.rows as u64 * self.cols as u64) as u8
    }

    /// Exact payload bits: (32 + idx_bits) per entry.
    pub fn payload_bits(&self) -> u64 {
        sparse_cost(self.entries.len() as u64, self.rows as u64, self.cols as u64)
    }

    /// Dense matrix with the stored entries placed and zeros elsewhere.
    pub fn densify(&self) -> DenseMatrix {
        let mut values = vec![0.0f32; self.rows * self.cols];
        for &(idx, v) in &self.entries {
            values[idx as usize] = v;
        }
        DenseMatrix::new(self.rows, self.cols, values).expect("shape validated")
    }
}

fn validate_entries(entries: &[(u64, f32)], cells: u64) -> std::result::Result<(), String> {
    let mut prev: Option<u64> = None;
    for &(idx, v) in entries {
        if idx >= cells {
            return Err(format!("index {idx} out of range for {cells} cells"));
        }
        if let Some(p) = prev {
            if idx <= p {
                return Err(format!("indices not strictly increasing at {idx}"));
            }
        }
        if v == 0.0 || !v.is_finite() {
            return Err(format!("value at index {idx} must be nonzero and finite"));
        }
        prev = Some(idx);
    }
    Ok(())
}

/// Keeps the `s` largest-magnitude entries of `m`.
///
/// Ties break toward the lower flat index; zeros and non-finite values are
/// never retained, so the result holds min(s, number of retainable values)
/// entries in canonical (strictly increasing index) order.
pub fn top_s(m: &DenseMatrix, s: u64) -> SparseMatrix {
    let mut items: Vec<(u64, f32)> = m
        .values()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0 && v.is_finite())
        .map(|(i, v)| (i as u64, *v))
        .collect();
    let keep = (s.min(items.len() as u64)) as usize;
    let by_magnitude = |a: &(u64, f32), b: &(u64, f32)| {
        b.1.abs()
            .partial_cmp(&a.1.abs())
            .expect("finite magnitudes")
            .then(a.0.cmp(&b.0))
    };
    if keep < items.len() {
        items.select_nth_unstable_by(keep, by_magnitude);
        items.truncate(keep);
    }
    items.sort_unstable_by_key(|e| e.0);
    SparseMatrix {
        rows: m.rows(),
        cols: m.cols(),
        entries: items,
    }
}

/// Jointly sparsified SVD factors: entries of u' (n*k) and v' (k*d).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFactorPair {
    shape_u: (usize, usize),
    shape_v: (usize, usize),
    entries_u: Vec<(u64, f32)>,
    entries_v: Vec<(u64, f32)>,
    idx_bits_u: u8,
    idx_bits_v: u8,
}

impl SparseFactorPair {
    pub fn new(
        shape_u: (usize, usize),
        shape_v: (usize, usize),
        entries_u: Vec<(u64, f32)>,
        entries_v: Vec<(u64, f32)>,
    ) -> Result<Self> {
        let (n, ku) = shape_u;
        let (kv, d) = shape_v;
        if n == 0 || ku == 0 || kv == 0 || d == 0 {
            return Err(Error::Argument(format!(
                "factor shapes must be positive, got {n}x{ku} and {kv}x{d}"
            )));
        }
        if n > u32::MAX as usize || d > u32::MAX as usize || ku > u32::MAX as usize {
            return Err(Error::Argument("factor dimensions must fit u32".into()));
        }
        if ku != kv {
            return Err(Error::Argument(format!(
                "factor ranks disagree: u' is {n}x{ku}, v' is {kv}x{d}"
            )));
        }
        validate_entries(&entries_u, n as u64 * ku as u64)
            .map_err(|e| Error::Argument(format!("u' entries: {e}")))?;
        validate_entries(&entries_v, kv as u64 * d as u64)
            .map_err(|e| Error::Argument(format!("v' entries: {e}")))?;
        Ok(Self {
            shape_u,
            shape_v,
            entries_u,
            entries_v,
            idx_bits_u: ceil_log2(n as u64 * ku as u64) as u8,
            idx_bits_v: ceil_log2(kv as u64 * d as u64) as u8,
        })
    }

    /// Empty pair for an n*d layer at working rank k.
    pub fn empty(n: usize, k: usize, d: usize) -> Result<Self> {
        Self::new((n, k), (k, d), Vec::new(), Vec::new())
    }

    pub fn shape_u(&self) -> (usize, usize) {
        self.shape_u
    }

    pub fn shape_v(&self) -> (usize, usize) {
        self.shape_v
    }

    /// Working rank k shared by both factors.
    pub fn k(&self) -> usize {
        self.shape_u.1
    }

    pub fn entries_u(&self) -> &[(u64, f32)] {
        &self.entries_u
    }

    pub fn entries_v(&self) -> &[(u64, f32)] {
        &self.entries_v
    }

    pub fn idx_bits_u(&self) -> u8 {
        self.idx_bits_u
    }

    pub fn idx_bits_v(&self) -> u8 {
        self.idx_bits_v
    }

    pub fn is_empty(&self) -> bool {
        self.entries_u.is_empty() && self.entries_v.is_empty()
    }

    /// Exact payload bits across both factors.
    pub fn payload_bits(&self) -> u64 {
        let (n, ku) = self.shape_u;
        let (kv, d) = self.shape_v;
        sparse_cost(self.entries_u.len() as u64, n as u64, ku as u64)
            + sparse_cost(self.entries_v.len() as u64, kv as u64, d as u64)
    }

    /// Dense factor matrices with dropped entries as zeros.
    pub fn densify(&self) -> (DenseMatrix, DenseMatrix) {
        let u = SparseMatrix {
            rows: self.shape_u.0,
            cols: self.shape_u.1,
            entries: self.entries_u.clone(),
        };
        let v = SparseMatrix {
            rows: self.shape_v.0,
            cols: self.shape_v.1,
            entries: self.entries_v.clone(),
        };
        (u.densify(), v.densify())
    }

    /// The n*d product of the sparsified factors, accumulated in f64.
    pub fn reconstruct(&self) -> DenseMatrix {
        let (n, k) = self.shape_u;
        let (_, d) = self.shape_v;
        let mut u_by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); k];
        for &(idx, v) in &self.entries_u {
            u_by_col[(idx % k as u64) as usize].push(((idx / k as u64) as usize, v as f64));
        }
        let mut v_by_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); k];
        for &(idx, v) in &self.entries_v {
            v_by_row[(idx / d as u64) as usize].push(((idx % d as u64) as usize, v as f64));
        }
        let mut acc = vec![0.0f64; n * d];
        for j in 0..k {
            for &(i, uv) in &u_by_col[j] {
                let row = &mut acc[i * d..(i + 1) * d];
                for &(t, vv) in &v_by_row[j] {
                    row[t] += uv * vv;
                }
            }
        }
        let values: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
        DenseMatrix::new(n, d, values).expect("shape validated")
    }
}

/// Exact bit accounting for one serialized record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordStats {
    /// Value and index bits per the sparse-cost accounting.
    pub payload_bits: u64,
    /// Fixed header fields.
    pub header_bits: u64,
    /// Zero bits appended to align each index stream to a byte boundary.
    pub padding_bits: u64,
}

fn stream_pad_bits(total_bits: u64) -> u64 {
    (8 - total_bits % 8) % 8
}

fn stream_byte_len(count: u64, width: u8) -> usize {
    let bits = count as u128 * width as u128;
    bits.div_ceil(8) as usize
}

/// Packs values MSB-first at a fixed width, zero-padding the final byte.
fn pack_bits(values: impl Iterator<Item = u64>, width: u8) -> Vec<u8> {
    let mut out = Vec::new();
    let mut acc: u128 = 0;
    let mut nbits: u32 = 0;
    for v in values {
        debug_assert!(width == 64 || v < (1u64 << width));
        acc = (acc << width) | v as u128;
        nbits += width as u32;
        while nbits >= 8 {
            out.push((acc >> (nbits - 8)) as u8);
            nbits -= 8;
            acc &= (1u128 << nbits) - 1;
        }
    }
    if nbits > 0 {
        out.push((acc << (8 - nbits)) as u8);
    }
    out
}

/// Inverse of `pack_bits`; rejects nonzero padding bits.
fn unpack_bits(bytes: &[u8], width: u8, count: u64) -> Result<Vec<u64>> {
    let mut out = Vec::with_capacity(count as usize);
    let mut acc: u128 = 0;
    let mut nbits: u32 = 0;
    let mut iter = bytes.iter();
    for _ in 0..count {
        while nbits < width as u32 {
            acc = (acc << 8) | *iter.next().expect("stream sliced to exact length") as u128;
            nbits += 8;
        }
        out.push((acc >> (nbits - width as u32)) as u64);
        nbits -= width as u32;
        if nbits > 0 {
            acc &= (1u128 << nbits) - 1;
        } else {
            acc = 0;
        }
    }
    if acc != 0 {
        return Err(Error::Format("nonzero padding bits in index stream".into()));
    }
    Ok(out)
}

fn write_entry_streams(out: &mut Vec<u8>, entries: &[(u64, f32)], width: u8) {
    out.extend_from_slice(&pack_bits(entries.iter().map(|e| e.0), width));
    for &(_, v) in entries {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_entry_streams(
    rd: &mut ByteReader<'_>,
    count: u64,
    width: u8,
    cells: u64,
    what: &str,
) -> Result<Vec<(u64, f32)>> {
    // Each entry needs 4 value bytes; bound `count` by the remaining input
    // before any length arithmetic or allocation.
    let remain = (rd.buf.len() - rd.pos) as u64;
    if count > remain / 4 {
        return Err(Error::Integrity(format!(
            "{what}: truncated streams ({count} entries declared, {remain} bytes remain)"
        )));
    }
    let idx_bytes = rd.take(stream_byte_len(count, width), "index stream", Some(what))?;
    let indices = unpack_bits(idx_bytes, width, count)?;
    let val_bytes = rd.take((count as usize) * 4, "value stream", Some(what))?;
    let mut entries = Vec::with_capacity(count as usize);
    for (i, chunk) in val_bytes.chunks_exact(4).enumerate() {
        entries.push((indices[i], f32::from_le_bytes(chunk.try_into().unwrap())));
    }
    // Canonical order and in-range indices are format obligations; value
    // invariants are data obligations.
    let mut prev: Option<u64> = None;
    for &(idx, v) in &entries {
        if idx >= cells {
            return Err(Error::Format(format!(
                "{what}: index {idx} out of range for {cells} cells"
            )));
        }
        if let Some(p) = prev {
            if idx <= p {
                return Err(Error::Format(format!(
                    "{what}: non-canonical index order at {idx}"
                )));
            }
        }
        if v == 0.0 || !v.is_finite() {
            return Err(Error::Data(format!(
                "{what}: stored value at index {idx} must be nonzero and finite"
            )));
        }
        prev = Some(idx);
    }
    Ok(entries)
}

/// One compressed layer: a sparse factor pair plus its (r, c) plan.
///
/// Record layout (`OSD1`, all integers little-endian): magic; u32 n, d, k,
/// r, c; u64 s_u, s_v; u8 idx_bits_u, idx_bits_v; U index bitstream; U
/// values; V index bitstream; V values.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub pair: SparseFactorPair,
    pub r: u32,
    pub c: u32,
}

impl LayerRecord {
    pub fn new(pair: SparseFactorPair, r: u32, c: u32) -> Result<Self> {
        if r == 0 {
            return Err(Error::Argument("rank r must be >= 1".into()));
        }
        if pair.k() as u64 != r as u64 + c as u64 {
            return Err(Error::Argument(format!(
                "working rank {} does not equal r+c = {}",
                pair.k(),
                r as u64 + c as u64
            )));
        }
        Ok(Self { pair, r, c })
    }

    pub fn encode(&self) -> Vec<u8> {
        let (n, k) = self.pair.shape_u;
        let (_, d) = self.pair.shape_v;
        let mut out = Vec::new();
        out.extend_from_slice(PAIR_MAGIC);
        for v in [n as u32, d as u32, k as u32, self.r, self.c] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.pair.entries_u.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.pair.entries_v.len() as u64).to_le_bytes());
        out.push(self.pair.idx_bits_u);
        out.push(self.pair.idx_bits_v);
        write_entry_streams(&mut out, &self.pair.entries_u, self.pair.idx_bits_u);
        write_entry_streams(&mut out, &self.pair.entries_v, self.pair.idx_bits_v);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader { buf: bytes, pos: 0 };
        let magic = rd.take(4, "magic", None)?;
        if magic != PAIR_MAGIC {
            return Err(Error::Format(format!(
                "bad record magic {magic:?}, expected \"OSD1\""
            )));
        }
        let n = rd.u32("n", None)? as u64;
        let d = rd.u32("d", None)? as u64;
        let k = rd.u32("k", None)? as u64;
        let r = rd.u32("r", None)?;
        let c = rd.u32("c", None)?;
        if n == 0 || d == 0 || k == 0 {
            return Err(Error::Format(format!("zero dimension in header ({n}, {d}, {k})")));
        }
        if r == 0 || k != r as u64 + c as u64 {
            return Err(Error::Format(format!("k={k} does not equal r+c = {}+{c}", r)));
        }
        let s_u = rd.u64("s_u", None)?;
        let s_v = rd.u64("s_v", None)?;
        if s_u > n * k || s_v > k * d {
            return Err(Error::Format(format!(
                "entry counts ({s_u}, {s_v}) exceed factor sizes ({}, {})",
                n * k,
                k * d
            )));
        }
        let idx_bits_u = rd.u8("idx_bits_u", None)?;
        let idx_bits_v = rd.u8("idx_bits_v", None)?;
        if idx_bits_u as u32 != ceil_log2(n * k) || idx_bits_v as u32 != ceil_log2(k * d) {
            return Err(Error::Format(format!(
                "index widths ({idx_bits_u}, {idx_bits_v}) do not match shapes"
            )));
        }
        let entries_u = read_entry_streams(&mut rd, s_u, idx_bits_u, n * k, "u'")?;
        let entries_v = read_entry_streams(&mut rd, s_v, idx_bits_v, k * d, "v'")?;
        if rd.pos != bytes.len() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes after record",
                bytes.len() - rd.pos
            )));
        }
        let pair = SparseFactorPair::new(
            (n as usize, k as usize),
            (k as usize, d as usize),
            entries_u,
            entries_v,
        )?;
        LayerRecord::new(pair, r, c)
    }

    pub fn stats(&self) -> RecordStats {
        let su = self.pair.entries_u.len() as u64;
        let sv = self.pair.entries_v.len() as u64;
        RecordStats {
            payload_bits: self.pair.payload_bits(),
            header_bits: 42 * 8,
            padding_bits: stream_pad_bits(su * self.pair.idx_bits_u as u64)
                + stream_pad_bits(sv * self.pair.idx_bits_v as u64),
        }
    }
}

/// One compressed layer for the pure-sparsification baseline.
///
/// Record layout (`OSDS`): magic; u32 rows, cols, r; u64 s; u8 idx_bits;
/// index bitstream; values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrixRecord {
    pub matrix: SparseMatrix,
    pub r: u32,
}

impl SparseMatrixRecord {
    pub fn new(matrix: SparseMatrix, r: u32) -> Result<Self> {
        if r == 0 {
            return Err(Error::Argument("rank r must be >= 1".into()));
        }
        Ok(Self { matrix, r })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SINGLE_MAGIC);
        for v in [self.matrix.rows as u32, self.matrix.cols as u32, self.r] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.matrix.entries.len() as u64).to_le_bytes());
        out.push(self.matrix.idx_bits());
        write_entry_streams(&mut out, &self.matrix.entries, self.matrix.idx_bits());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader { buf: bytes, pos: 0 };
        let magic = rd.take(4, "magic", None)?;
        if magic != SINGLE_MAGIC {
            return Err(Error::Format(format!(
                "bad record magic {magic:?}, expected \"OSDS\""
            )));
        }
        let rows = rd.u32("rows", None)? as u64;
        let cols = rd.u32("cols", None)? as u64;
        let r = rd.u32("r", None)?;
        if rows == 0 || cols == 0 {
            return Err(Error::Format(format!("zero dimension in header ({rows}x{cols})")));
        }
        if r == 0 {
            return Err(Error::Format("rank r must be >= 1".into()));
        }
        let s = rd.u64("s", None)?;
        if s > rows * cols {
            return Err(Error::Format(format!(
                "entry count {s} exceeds matrix size {}",
                rows * cols
            )));
        }
        let idx_bits = rd.u8("idx_bits", None)?;
        if idx_bits as u32 != ceil_log2(rows * cols) {
            return Err(Error::Format(format!(
                "index width {idx_bits} does not match {rows}x{cols}"
            )));
        }
        let entries = read_entry_streams(&mut rd, s, idx_bits, rows * cols, "matrix")?;
        if rd.pos != bytes.len() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes after record",
                bytes.len() - rd.pos
            )));
        }
        let matrix = SparseMatrix::new(rows as usize, cols as usize, entries)?;
        SparseMatrixRecord::new(matrix, r)
    }

    pub fn stats(&self) -> RecordStats {
        RecordStats {
            payload_bits: self.matrix.payload_bits(),
            header_bits: 25 * 8,
            padding_bits: stream_pad_bits(
                self.matrix.entries.len() as u64 * self.matrix.idx_bits() as u64,
            ),
        }
    }
}
