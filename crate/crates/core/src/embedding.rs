//! Embedding matrices, label vectors and their on-disk formats.
//!
//! The binary `EMB1` layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "EMB1"
//! 4       1     version = 1
//! 5       1     dtype = 0 (f32)
//! 6       2     reserved = 0
//! 8       8     count (u64)
//! 16      4     dim (u32)
//! 20      4*count*dim  f32 payload, row-major
//! ```
//!
//! An optional label block may follow the payload: magic `"LBL1"`, `count`
//! as u64, then `count` i64 labels. The format is agnostic to the
//! dimensionality of the features it stores.
//!
//! CSV input is one row per line, comma-separated decimal floats, no header.

use std::collections::HashMap;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const LABEL_MAGIC: &[u8; 4] = b"LBL1";
pub const EMB_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 20;

/// Rows with a Euclidean norm at or below this cannot be normalized.
pub const MIN_NORM: f64 = 1e-12;
/// Allowed deviation from unit norm for a matrix flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// On-disk encoding of an embedding matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Binary,
    Csv,
}

impl Format {
    /// `.csv` files are CSV, everything else is `EMB1`.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }
}

/// Dense row-major `count × dim` matrix of f32 features.
///
/// Row indices are stable: row `i` is the `i`-th row of the file it was
/// loaded from. The matrix is immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    count: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Builds a matrix, rejecting bad shapes and non-finite values.
    pub fn new(count: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        let m = Self::from_raw(count, dim, data)?;
        if let Some((row, col)) = m.first_non_finite() {
            return Err(Error::NonFinite { row, col });
        }
        Ok(m)
    }

    /// Builds a matrix checking only its shape. Non-finite values are kept so
    /// that [`validate`] can report them.
    pub fn from_raw(count: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if count == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "count and dim must be at least 1 (got {count}x{dim})"
            )));
        }
        let expected = count
            .checked_mul(dim)
            .ok_or_else(|| Error::Shape(format!("{count}x{dim} overflows")))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{count}x{dim} matrix needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            count,
            dim,
            data,
            normalized: false,
        })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::RowLength {
                    row: i,
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    /// Flags the matrix as normalized after checking every row norm.
    pub fn assume_normalized(mut self) -> Result<Self> {
        for (row, r) in self.rows().enumerate() {
            let norm = row_norm(r);
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(Error::NotNormalized { row, norm });
            }
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    /// Copies the given rows, in order, into a new matrix. The normalized
    /// flag carries over.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.count {
                return Err(Error::OutOfBounds {
                    index: i,
                    len: self.count,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        let mut m = Self::from_raw(indices.len(), self.dim, data)?;
        m.normalized = self.normalized;
        Ok(m)
    }

    /// Number of bitwise-distinct rows.
    pub fn distinct_rows(&self) -> usize {
        let mut groups: HashMap<u64, Vec<usize>> = HashMap::new();
        let mut distinct = 0;
        for (i, r) in self.rows().enumerate() {
            let bucket = groups.entry(row_hash(r)).or_default();
            if !bucket.iter().any(|&j| bits_equal(self.row(j), r)) {
                bucket.push(i);
                distinct += 1;
            }
        }
        distinct
    }

    fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|p| (p / self.dim, p % self.dim))
    }

    pub(crate) fn set_normalized_unchecked(&mut self, flag: bool) {
        self.normalized = flag;
    }
}

/// Integer class id per matrix row; [`LabelVector::UNLABELED`] marks rows
/// without a label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    labels: Vec<i64>,
}

impl LabelVector {
    pub const UNLABELED: i64 = -1;

    pub fn new(labels: Vec<i64>) -> Self {
        Self { labels }
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> Option<i64> {
        self.labels.get(i).copied()
    }

    /// Fails unless the vector pairs with a matrix of `count` rows.
    pub fn check_paired(&self, count: usize) -> Result<()> {
        if self.labels.len() != count {
            return Err(Error::Shape(format!(
                "label vector has {} entries but the matrix has {count} rows",
                self.labels.len()
            )));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn row_norm(r: &[f32]) -> f64 {
    r.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

fn row_hash(r: &[f32]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for v in r {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

fn bits_equal(a: &[f32], b: &[f32]) -> bool {
    a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(matrix.data.len());
    for (row, r) in matrix.rows().enumerate() {
        let norm = row_norm(r);
        if !(norm > MIN_NORM) {
            return Err(Error::ZeroNorm { row, norm });
        }
        data.extend(r.iter().map(|&v| (f64::from(v) / norm) as f32));
    }
    let mut out = EmbeddingMatrix::new(matrix.count, matrix.dim, data)?;
    out.normalized = true;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub count: usize,
    pub dim: usize,
    /// Smallest row norm among rows with finite norm.
    pub min_norm: Option<f64>,
    pub max_norm: Option<f64>,
    pub all_finite: bool,
    /// `(row, col)` of the first non-finite values, capped at
    /// [`ValidationReport::MAX_LOCATIONS`].
    pub non_finite: Vec<(usize, usize)>,
    pub non_finite_total: usize,
    pub normalized_flag: bool,
}

impl ValidationReport {
    pub const MAX_LOCATIONS: usize = 32;

    pub fn is_unit_norm(&self, tol: f64) -> bool {
        match (self.min_norm, self.max_norm) {
            (Some(lo), Some(hi)) => self.all_finite && (lo - 1.0).abs() <= tol && (hi - 1.0).abs() <= tol,
            _ => false,
        }
    }
}

/// Summarizes shape, norms and finiteness without touching the matrix.
pub fn validate(matrix: &EmbeddingMatrix) -> ValidationReport {
    let mut min_norm: Option<f64> = None;
    let mut max_norm: Option<f64> = None;
    let mut non_finite = Vec::new();
    let mut non_finite_total = 0;
    for (row, r) in matrix.rows().enumerate() {
        for (col, v) in r.iter().enumerate() {
            if !v.is_finite() {
                non_finite_total += 1;
                if non_finite.len() < ValidationReport::MAX_LOCATIONS {
                    non_finite.push((row, col));
                }
            }
        }
        let norm = row_norm(r);
        if norm.is_finite() {
            min_norm = Some(min_norm.map_or(norm, |m| m.min(norm)));
            max_norm = Some(max_norm.map_or(norm, |m| m.max(norm)));
        }
    }
    ValidationReport {
        count: matrix.count,
        dim: matrix.dim,
        min_norm,
        max_norm,
        all_finite: non_finite_total == 0,
        non_finite,
        non_finite_total,
        normalized_flag: matrix.normalized,
    }
}

/// Parsed `EMB1` header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Emb1Header {
    pub count: u64,
    pub dim: u32,
}

fn parse_header(path: &Path, bytes: &[u8; HEADER_LEN]) -> Result<Emb1Header> {
    if &bytes[0..4] != EMB_MAGIC {
        return Err(Error::format(path, "bad magic, expected \"EMB1\""));
    }
    if bytes[4] != EMB_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::format(path, format!("unsupported dtype {}", bytes[5])));
    }
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::format(path, "reserved header bytes must be zero"));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
    if count == 0 || dim == 0 {
        return Err(Error::format(
            path,
            format!("header declares {count}x{dim}, both must be at least 1"),
        ));
    }
    Ok(Emb1Header { count, dim })
}

/// Reads only the header of an `EMB1` file.
pub fn read_header(path: impl AsRef<Path>) -> Result<Emb1Header> {
    let path = path.as_ref();
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = [0u8; HEADER_LEN];
    f.read_exact(&mut buf)
        .map_err(|_| Error::format(path, "file shorter than the 20-byte header"))?;
    parse_header(path, &buf)
}

/// Loads a matrix, rejecting non-finite values. The result is never flagged
/// as normalized; call [`l2_normalize`] or
/// [`EmbeddingMatrix::assume_normalized`] as needed.
pub fn load_embeddings(path: impl AsRef<Path>, format: Format) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    match format {
        Format::Binary => load_binary(path, true).map(|(m, _)| m),
        Format::Csv => load_csv(path, true),
    }
}

/// Like [`load_embeddings`] but keeps non-finite values, for inspection.
pub fn load_embeddings_lenient(path: impl AsRef<Path>, format: Format) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    match format {
        Format::Binary => load_binary(path, false).map(|(m, _)| m),
        Format::Csv => load_csv(path, false),
    }
}

/// Loads an `EMB1` file together with its optional label block.
pub fn load_with_labels(path: impl AsRef<Path>) -> Result<(EmbeddingMatrix, Option<LabelVector>)> {
    load_binary(path.as_ref(), true)
}

/// Loads just the label block of an `EMB1` file.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVector> {
    let path = path.as_ref();
    load_binary(path, false)?
        .1
        .ok_or_else(|| Error::format(path, "no LBL1 label block"))
}

fn load_binary(path: &Path, strict: bool) -> Result<(EmbeddingMatrix, Option<LabelVector>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::with_capacity(1 << 20, file);
    let mut hdr = [0u8; HEADER_LEN];
    reader
        .read_exact(&mut hdr)
        .map_err(|_| Error::format(path, "file shorter than the 20-byte header"))?;
    let header = parse_header(path, &hdr)?;
    let count = usize::try_from(header.count)
        .map_err(|_| Error::format(path, "count does not fit in memory"))?;
    let dim = header.dim as usize;
    let total = count
        .checked_mul(dim)
        .ok_or_else(|| Error::format(path, "count x dim overflows"))?;

    let mut data = Vec::with_capacity(total);
    let mut buf = vec![0u8; 1 << 20];
    while data.len() < total {
        let want = ((total - data.len()) * 4).min(buf.len());
        let got = read_fully(&mut reader, &mut buf[..want]).map_err(|e| Error::io(path, e))?;
        data.extend(
            buf[..got - got % 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
        );
        if got < want {
            let have = data.len();
            return Err(Error::RowLength {
                row: have / dim,
                expected: dim,
                found: have % dim,
            });
        }
    }
    if strict {
        if let Some(p) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: p / dim,
                col: p % dim,
            });
        }
    }

    let mut rest = Vec::new();
    reader
        .read_to_end(&mut rest)
        .map_err(|e| Error::io(path, e))?;
    let labels = if rest.is_empty() {
        None
    } else {
        Some(parse_label_block(path, &rest, count)?)
    };
    Ok((EmbeddingMatrix::from_raw(count, dim, data)?, labels))
}

fn read_fully(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut off = 0;
    while off < buf.len() {
        match r.read(&mut buf[off..]) {
            Ok(0) => break,
            Ok(n) => off += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(off)
}

fn parse_label_block(path: &Path, bytes: &[u8], count: usize) -> Result<LabelVector> {
    if bytes.len() < 12 || &bytes[0..4] != LABEL_MAGIC {
        return Err(Error::format(path, "trailing bytes after payload are not a LBL1 block"));
    }
    let n = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    if n != count as u64 {
        return Err(Error::format(
            path,
            format!("label block has {n} entries but the matrix has {count} rows"),
        ));
    }
    let body = &bytes[12..];
    if body.len() != count * 8 {
        return Err(Error::format(
            path,
            format!("label block needs {} bytes, found {}", count * 8, body.len()),
        ));
    }
    Ok(LabelVector::new(
        body.chunks_exact(8)
            .map(|b| i64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
    ))
}

fn load_csv(path: &Path, strict: bool) -> Result<EmbeddingMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let mut dim = 0;
    let mut data = Vec::new();
    let mut count = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        if row == 0 {
            dim = record.len();
        } else if record.len() != dim {
            return Err(Error::RowLength {
                row,
                expected: dim,
                found: record.len(),
            });
        }
        for (col, field) in record.iter().enumerate() {
            let v: f32 = field.parse().map_err(|_| Error::Parse {
                row,
                col,
                text: field.to_string(),
            })?;
            if strict && !v.is_finite() {
                return Err(Error::NonFinite { row, col });
            }
            data.push(v);
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::format(path, "no rows"));
    }
    EmbeddingMatrix::from_raw(count, dim, data)
}

/// Writes `matrix` as `EMB1`.
pub fn save_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    save_embeddings_with_labels(matrix, None, path)
}

/// Writes `matrix` as `EMB1`, appending a label block when given.
pub fn save_embeddings_with_labels(
    matrix: &EmbeddingMatrix,
    labels: Option<&LabelVector>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    // Re-check the invariants: a matrix can only be empty if it was built by hand.
    if matrix.count == 0 || matrix.dim == 0 {
        return Err(Error::Shape("cannot save an empty matrix".into()));
    }
    let dim = u32::try_from(matrix.dim)
        .map_err(|_| Error::Shape(format!("dim {} exceeds u32", matrix.dim)))?;
    if let Some(l) = labels {
        l.check_paired(matrix.count)?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let io = |e| Error::io(path, e);
    w.write_all(EMB_MAGIC).map_err(io)?;
    w.write_all(&[EMB_VERSION, DTYPE_F32, 0, 0]).map_err(io)?;
    w.write_all(&(matrix.count as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&dim.to_le_bytes()).map_err(io)?;
    let mut buf = Vec::with_capacity(1 << 16);
    for chunk in matrix.data.chunks(1 << 14) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    if let Some(l) = labels {
        w.write_all(LABEL_MAGIC).map_err(io)?;
        w.write_all(&(l.count() as u64).to_le_bytes()).map_err(io)?;
        for v in l.labels() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Writes `matrix` as headerless CSV. `f32` display output is the shortest
/// string that parses back to the same value, so the round trip is exact.
pub fn save_embeddings_csv(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for r in matrix.rows() {
        let mut first = true;
        for v in r {
            if !first {
                w.write_all(b",").map_err(io)?;
            }
            first = false;
            write!(w, "{v:?}").map_err(io)?;
        }
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Exact (bitwise) duplicate rows within and across two matrices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DuplicateReport {
    /// `(target row, open row)` pairs with identical bits.
    pub cross: Vec<(usize, usize)>,
    /// Groups of open-set rows (ascending, size ≥ 2) with identical bits.
    pub within_open: Vec<Vec<usize>>,
}

impl DuplicateReport {
    pub fn is_clean(&self) -> bool {
        self.cross.is_empty() && self.within_open.is_empty()
    }
}

/// Finds bitwise-identical rows between `target` and `open`, and inside `open`.
pub fn find_duplicates(target: &EmbeddingMatrix, open: &EmbeddingMatrix) -> Result<DuplicateReport> {
    if target.dim != open.dim {
        return Err(Error::DimMismatch {
            expected: target.dim,
            found: open.dim,
        });
    }
    // hash -> groups of bitwise-identical open rows
    let mut buckets: HashMap<u64, Vec<Vec<usize>>> = HashMap::new();
    for (i, r) in open.rows().enumerate() {
        let groups = buckets.entry(row_hash(r)).or_default();
        match groups.iter_mut().find(|g| bits_equal(open.row(g[0]), r)) {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    let mut cross = Vec::new();
    for (t, r) in target.rows().enumerate() {
        if let Some(groups) = buckets.get(&row_hash(r)) {
            if let Some(g) = groups.iter().find(|g| bits_equal(open.row(g[0]), r)) {
                cross.extend(g.iter().map(|&u| (t, u)));
            }
        }
    }
    let mut within_open: Vec<Vec<usize>> = buckets
        .into_values()
        .flatten()
        .filter(|g| g.len() > 1)
        .collect();
    within_open.sort();
    Ok(DuplicateReport { cross, within_open })
}
