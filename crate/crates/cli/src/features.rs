//! Binary region-feature files.
//!
//! Layout (little-endian): `"MSAF"`, `u32` record count, `u32 N`, `u32 D`,
//! then per record a `u32` id length, the UTF-8 id and `N * D` `f64` values
//! in row-major order.

use std::fs;
use std::path::Path;

use msa_core::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"MSAF";
pub const HEADER_BYTES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    /// `N x D`.
    pub features: Tensor,
}

/// Exact file size for `ids` with `n x d` matrices.
pub fn encoded_len<S: AsRef<str>>(ids: &[S], n: usize, d: usize) -> usize {
    HEADER_BYTES + ids.iter().map(|i| 4 + i.as_ref().len() + n * d * 8).sum::<usize>()
}

pub fn encode(records: &[FeatureRecord]) -> Result<Vec<u8>> {
    let (n, d) = match records.first() {
        Some(r) => (r.features.shape()[0], r.features.shape()[1]),
        None => (0, 0),
    };
    let mut out = Vec::with_capacity(HEADER_BYTES);
    out.extend_from_slice(MAGIC);
    for v in [records.len(), n, d] {
        out.extend_from_slice(&to_u32(v, "header field")?.to_le_bytes());
    }
    for r in records {
        if r.features.shape() != [n, d] {
            return Err(CliError::Data(format!(
                "record `{}` has shape {:?}, expected [{n}, {d}]",
                r.id,
                r.features.shape()
            )));
        }
        out.extend_from_slice(&to_u32(r.id.len(), "id length")?.to_le_bytes());
        out.extend_from_slice(r.id.as_bytes());
        for v in r.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| CliError::Data(format!("{what} {v} does not fit in u32")))
}

pub fn save(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let bytes = encode(records)?;
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> CliError {
        CliError::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!(
                "truncated {what}: need {len} bytes, {} left",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

/// Parses a whole feature file; any defect fails the entire load.
pub fn decode(path: &Path, bytes: &[u8]) -> Result<Vec<FeatureRecord>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, expected MSAF"));
    }
    let count = r.u32("record count")?;
    let n = r.u32("region count")?;
    let d = r.u32("feature width")?;
    if count > 0 && (n == 0 || d == 0) {
        return Err(r.fail(format!("degenerate feature shape {n}x{d}")));
    }
    let values = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| r.fail("feature block size overflows"))?;
    let mut out = Vec::with_capacity(count.min(bytes.len() / values.max(1)));
    for _ in 0..count {
        let len = r.u32("id length")?;
        let start = r.pos;
        let id = std::str::from_utf8(r.take(len, "id")?)
            .map_err(|e| CliError::Format {
                path: path.to_path_buf(),
                offset: start as u64,
                message: format!("id is not UTF-8: {e}"),
            })?
            .to_string();
        let raw = r.take(values, "feature block")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(FeatureRecord {
            id,
            features: Tensor::new(vec![n, d], data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes after last record", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<FeatureRecord>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(path, &bytes)
}
