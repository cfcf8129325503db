//! Embedding sets and the EBF interchange format.
//!
//! EBF v1, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "ECGE"
//! version    u8       1
//! n, d       u32, u32
//! source_tag u16 length + UTF-8 bytes
//! ids        n x (u16 length + UTF-8 bytes)
//! labels     n bytes, 0x00 or 0x01
//! features   n*d binary32, row-major
//! ```
//!
//! The reader rejects anything that would produce an invalid
//! [`EmbeddingSet`]; it never repairs input.

use std::collections::{HashMap, HashSet};
use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const EBF_MAGIC: [u8; 4] = *b"ECGE";
pub const EBF_VERSION: u8 = 1;

/// Record ids, binary labels and an `n x d` f32 feature matrix from one
/// embedding producer (or a fused pair).
///
/// Immutable once constructed; [`EmbeddingSet::new`] enforces every
/// invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<String>,
    labels: Vec<u8>,
    features: Matrix<f32>,
    source_tag: String,
}

impl EmbeddingSet {
    pub fn new(
        ids: Vec<String>,
        labels: Vec<u8>,
        features: Matrix<f32>,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::Validation(
                "embedding set must have at least one row".into(),
            ));
        }
        if labels.len() != n || features.rows() != n {
            return Err(Error::Validation(format!(
                "length mismatch: {n} ids, {} labels, {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if features.cols() == 0 {
            return Err(Error::Validation(
                "feature dimension must be at least 1".into(),
            ));
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(Error::Validation(format!(
                "row {i}: label {} is not 0 or 1",
                labels[i]
            )));
        }
        let d = features.cols();
        if let Some(k) = features.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite feature at row {}, column {}",
                k / d,
                k % d
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation(format!("duplicate id {id:?}")));
            }
        }
        Ok(Self {
            ids,
            labels,
            features,
            source_tag: source_tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn features(&self) -> &Matrix<f32> {
        &self.features
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (self.len() - pos, pos)
    }

    /// Subset in the given row order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Self::new(
            rows.iter().map(|&i| self.ids[i].clone()).collect(),
            rows.iter().map(|&i| self.labels[i]).collect(),
            self.features.select_rows(rows),
            self.source_tag.clone(),
        )
    }

    pub fn with_features(
        &self,
        features: Matrix<f32>,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        Self::new(self.ids.clone(), self.labels.clone(), features, source_tag)
    }

    /// True when `other` carries the same ids and labels in the same order.
    pub fn is_aligned_with(&self, other: &Self) -> bool {
        self.ids == other.ids && self.labels == other.labels
    }
}

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes).map_err(|source| Error::IoAt {
            offset: self.written,
            source,
        })?;
        self.written += bytes.len() as u64;
        Ok(())
    }
}

fn put_str(w: &mut CountingWriter<impl Write>, s: &str, what: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::Validation(format!("{what} longer than 65535 bytes")))?;
    w.put(&len.to_le_bytes())?;
    w.put(s.as_bytes())
}

/// Serializes `set` as EBF v1. Output is a pure function of the set.
pub fn write_ebf<W: Write>(set: &EmbeddingSet, sink: W) -> Result<()> {
    let n =
        u32::try_from(set.len()).map_err(|_| Error::Validation("too many rows for EBF".into()))?;
    let d = u32::try_from(set.dim())
        .map_err(|_| Error::Validation("dimension too large for EBF".into()))?;
    let mut w = CountingWriter {
        inner: io::BufWriter::new(sink),
        written: 0,
    };
    w.put(&EBF_MAGIC)?;
    w.put(&[EBF_VERSION])?;
    w.put(&n.to_le_bytes())?;
    w.put(&d.to_le_bytes())?;
    put_str(&mut w, &set.source_tag, "source tag")?;
    for id in &set.ids {
        put_str(&mut w, id, "id")?;
    }
    w.put(&set.labels)?;
    let mut buf = Vec::with_capacity(set.dim() * 4);
    for row in set.features.row_iter() {
        buf.clear();
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.put(&buf)?;
    }
    let offset = w.written;
    w.inner
        .flush()
        .map_err(|source| Error::IoAt { offset, source })
}

/// Encodes into a fresh byte vector.
pub fn to_ebf_bytes(set: &EmbeddingSet) -> Vec<u8> {
    let mut out = Vec::new();
    write_ebf(set, &mut out).expect("writing to a Vec cannot fail");
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::Truncated {
                expected: self.pos as u64 + len as u64,
                actual: self.buf.len() as u64,
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))
    }
}

/// Parses EBF v1 from any byte source.
pub fn read_ebf<R: Read>(mut source: R) -> Result<EmbeddingSet> {
    let mut buf = Vec::new();
    source.read_to_end(&mut buf)?;
    from_ebf_bytes(&buf)
}

pub fn from_ebf_bytes(buf: &[u8]) -> Result<EmbeddingSet> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c
        .take(4)
        .map_err(|_| Error::Format("file too short for magic bytes".into()))?;
    if magic != EBF_MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:02x?}")));
    }
    let version = c.take(1)?[0];
    if version != EBF_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = c.u32()? as usize;
    let d = c.u32()? as usize;
    if n == 0 {
        return Err(Error::Validation("n must be at least 1".into()));
    }
    if d == 0 {
        return Err(Error::Validation("d must be at least 1".into()));
    }
    let source_tag = c.string("source tag")?;

    // Every id costs at least two bytes, so cap preallocation by what is left.
    let mut ids = Vec::with_capacity(n.min((buf.len() - c.pos) / 2));
    for i in 0..n {
        ids.push(c.string(&format!("id {i}"))?);
    }
    let labels = c.take(n)?.to_vec();
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(Error::Validation(format!(
            "row {i}: label byte {:#04x} is not 0 or 1",
            labels[i]
        )));
    }
    let payload = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format("n*d overflows".into()))?;
    let expected_total = c.pos as u64 + payload as u64;
    if (buf.len() as u64) < expected_total {
        return Err(Error::Truncated {
            expected: expected_total,
            actual: buf.len() as u64,
        });
    }
    let raw = c.take(payload)?;
    if c.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after feature payload",
            buf.len() - c.pos
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Validation(format!(
                "non-finite feature at row {}, column {}",
                k / d,
                k % d
            )));
        }
        data.push(v);
    }
    EmbeddingSet::new(ids, labels, Matrix::new(n, d, data)?, source_tag)
}

/// Parses the CSV fixture format `id,label,f0,...,f{d-1}`.
///
/// No quoting or escaping; fields are split on commas verbatim.
pub fn read_csv<R: Read>(mut source: R) -> Result<EmbeddingSet> {
    let mut text = String::new();
    source
        .read_to_string(&mut text)
        .map_err(|e| Error::Validation(format!("input is not UTF-8 text: {e}")))?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')));

    let (_, header) = lines.next().ok_or(Error::Line {
        line: 1,
        message: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    let header_ok = cols.len() >= 3
        && cols[0] == "id"
        && cols[1] == "label"
        && cols[2..]
            .iter()
            .enumerate()
            .all(|(j, c)| *c == format!("f{j}"));
    if !header_ok {
        return Err(Error::Line {
            line: 1,
            message: "header must be id,label,f0,f1,...".into(),
        });
    }
    let d = cols.len() - 2;

    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut seen = HashSet::new();
    for (line, row) in lines {
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != d + 2 {
            return Err(Error::Line {
                line,
                message: format!("expected {} fields, found {}", d + 2, fields.len()),
            });
        }
        if !seen.insert(fields[0]) {
            return Err(Error::Line {
                line,
                message: format!("duplicate id {:?}", fields[0]),
            });
        }
        let label = match fields[1].trim() {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(Error::Line {
                    line,
                    message: format!("label {other:?} is not 0 or 1"),
                })
            }
        };
        for (j, f) in fields[2..].iter().enumerate() {
            let v: f32 = f.trim().parse().map_err(|_| Error::Line {
                line,
                message: format!("column f{j}: cannot parse {f:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Line {
                    line,
                    message: format!("column f{j}: non-finite value"),
                });
            }
            data.push(v);
        }
        ids.push(fields[0].to_string());
        labels.push(label);
    }
    if ids.is_empty() {
        return Err(Error::Line {
            line: 2,
            message: "no data rows".into(),
        });
    }
    let n = ids.len();
    EmbeddingSet::new(ids, labels, Matrix::new(n, d, data)?, "")
}

/// Restricts both sets to their shared ids, sorted lexicographically.
pub fn align(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<(EmbeddingSet, EmbeddingSet)> {
    let b_index: HashMap<&str, usize> = b
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut shared: Vec<(&str, usize, usize)> = a
        .ids
        .iter()
        .enumerate()
        .filter_map(|(i, id)| b_index.get(id.as_str()).map(|&j| (id.as_str(), i, j)))
        .collect();
    if shared.is_empty() {
        return Err(Error::Alignment("the two sets share no ids".into()));
    }
    shared.sort_unstable_by(|x, y| x.0.cmp(y.0));
    for &(id, i, j) in &shared {
        if a.labels[i] != b.labels[j] {
            return Err(Error::LabelConflict { id: id.to_string() });
        }
    }
    let rows_a: Vec<usize> = shared.iter().map(|s| s.1).collect();
    let rows_b: Vec<usize> = shared.iter().map(|s| s.2).collect();
    Ok((a.select(&rows_a)?, b.select(&rows_b)?))
}
