//! Binary checkpoints: parameters plus optional optimiser state.
//!
//! Layout (little-endian): `"MSACKPT1"`, `u32` epoch, `u32` parameter count,
//! then per parameter a `u32` name length, the name, `u32` rank, `rank`
//! `u32` extents and the `f64` values. A trailing `u8` flag announces Adam
//! state: `u64` step count and, per parameter, first then second moments.

use std::fs;
use std::path::Path;

use msa_core::optim::Adam;
use msa_core::{ParamSet, Tensor};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"MSACKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn of(adam: &Adam) -> Self {
        let (m, v) = adam.moments();
        AdamState {
            step: adam.steps_taken(),
            first: m.to_vec(),
            second: v.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Number of completed epochs.
    pub epoch: u32,
    pub params: Vec<(String, Tensor)>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn capture(epoch: u32, params: &ParamSet, adam: Option<&Adam>) -> Self {
        Checkpoint {
            epoch,
            params: params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            adam: adam.map(AdamState::of),
        }
    }

    /// Copies values into `target`, which must have the same names, order
    /// and shapes.
    pub fn restore_params(&self, target: &mut ParamSet) -> Result<()> {
        if self.params.len() != target.len() {
            return Err(CliError::Checkpoint {
                name: "*".into(),
                message: format!("{} parameters stored, model has {}", self.params.len(), target.len()),
            });
        }
        let ids: Vec<_> = target.ids().collect();
        for ((name, value), id) in self.params.iter().zip(ids) {
            if target.name(id) != name {
                return Err(CliError::Checkpoint {
                    name: name.clone(),
                    message: format!("model expects `{}` at this position", target.name(id)),
                });
            }
            let slot = target.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(CliError::Checkpoint {
                    name: name.clone(),
                    message: format!("shape {:?} does not match model shape {:?}", value.shape(), slot.shape()),
                });
            }
            *slot = value.clone();
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.epoch as usize);
        put_u32(&mut out, self.params.len());
        for (name, t) in &self.params {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len());
            for &e in t.shape() {
                put_u32(&mut out, e);
            }
            put_f64s(&mut out, t.data());
        }
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                for m in a.first.iter().chain(&a.second) {
                    put_f64s(&mut out, m);
                }
            }
        }
        out
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            r.pos = 0;
            return Err(r.fail("bad magic, expected MSACKPT1"));
        }
        let epoch = r.u32()? as u32;
        let count = r.u32()?;
        let mut params = Vec::new();
        for _ in 0..count {
            let len = r.u32()?;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.fail("name is not UTF-8"))?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r.f64s(n)?;
            params.push((name, Tensor::new(shape, data)?));
        }
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let sizes: Vec<usize> = params.iter().map(|(_, t)| t.len()).collect();
                let first = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
                let second = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
                Some(AdamState { step, first, second })
            }
            f => return Err(r.fail(format!("unknown optimiser flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes"));
        }
        Ok(Checkpoint { epoch, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(path, &bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, message: impl Into<String>) -> CliError {
        CliError::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(len).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail("truncated checkpoint")),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| self.fail("tensor size overflows"))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
