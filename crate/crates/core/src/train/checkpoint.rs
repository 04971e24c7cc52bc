//! Little-endian checkpoint container.
//!
//! Layout: `b"LEUG"`, format version `u32`, architecture hash `u64`,
//! iteration `u64`, generator and discriminator optimizer steps (`u64`
//! each), seven architecture extents (`u32` each), edge kernel code `u8`,
//! record count `u32`, then per tensor: name length `u32`, UTF-8 name, rank
//! `u32`, extents (`u32` each) and `f32` values.

use std::collections::HashMap;
use std::path::Path;

use crate::edge::EdgeKernel;
use crate::error::{Error, Result};
use crate::nn::ArchConfig;
use crate::param::{Module, Param};
use crate::Tensor;

pub const MAGIC: &[u8; 4] = b"LEUG";
pub const FORMAT_VERSION: u32 = 1;

/// FNV-1a over the architecture fields.
pub fn arch_hash(arch: &ArchConfig) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for v in arch_fields(arch) {
        eat(&v.to_le_bytes());
    }
    eat(&[arch.edge_kernel.code() as u8]);
    h
}

fn arch_fields(a: &ArchConfig) -> [u32; 7] {
    [
        a.image_size,
        a.base_channels,
        a.n_down,
        a.n_res_blocks,
        a.d_base_channels,
        a.d_local_down,
        a.d_global_down,
    ]
    .map(|v| v as u32)
}

/// Rounds every value to the nearest `f32` so the state survives a
/// save/load cycle unchanged.
pub fn round_to_f32(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub iteration: u64,
    pub g_steps: u64,
    pub d_steps: u64,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&arch_hash(&self.arch).to_le_bytes());
        for v in [self.iteration, self.g_steps, self.d_steps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in arch_fields(&self.arch) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.arch.edge_kernel.code() as u8);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let hash = r.u64()?;
        let (iteration, g_steps, d_steps) = (r.u64()?, r.u64()?, r.u64()?);
        let mut f = [0usize; 7];
        for v in &mut f {
            *v = r.u32()? as usize;
        }
        let edge_kernel =
            EdgeKernel::from_code(r.u8()? as u32).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let arch = ArchConfig {
            image_size: f[0],
            base_channels: f[1],
            n_down: f[2],
            n_res_blocks: f[3],
            d_base_channels: f[4],
            d_local_down: f[5],
            d_global_down: f[6],
            edge_kernel,
        };
        if arch_hash(&arch) != hash {
            return Err(Error::Checkpoint("architecture hash does not match header".into()));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint {
            arch,
            iteration,
            g_steps,
            d_steps,
            tensors,
        })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn index(&self) -> HashMap<&str, &Tensor> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }
}

/// Appends every parameter and buffer of `module` as a named record.
pub fn push_module(out: &mut Vec<(String, Tensor)>, module: &dyn Module) {
    module.visit(&mut |p| out.push((p.name().to_string(), p.value.clone())));
    module.visit_buffers(&mut |p| out.push((p.name().to_string(), p.value.clone())));
}

/// Copies named records into `module`. Every parameter and buffer must be
/// present with a matching shape.
pub fn load_module(module: &mut dyn Module, index: &HashMap<&str, &Tensor>) -> Result<()> {
    let mut problem = None;
    let mut apply = |p: &mut Param| {
        if problem.is_some() {
            return;
        }
        match index.get(p.name()) {
            Some(t) if t.shape() == p.value.shape() => p.value = (*t).clone(),
            Some(t) => {
                problem = Some(Error::Checkpoint(format!(
                    "{} has shape {:?} in the checkpoint, model expects {:?}",
                    p.name(),
                    t.shape(),
                    p.value.shape()
                )))
            }
            None => problem = Some(Error::Checkpoint(format!("missing tensor {}", p.name()))),
        }
    };
    module.visit_mut(&mut apply);
    module.visit_buffers_mut(&mut apply);
    problem.map_or(Ok(()), Err)
}
