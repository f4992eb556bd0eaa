//! Binary model containers.
//!
//! Parameter checkpoint (`.ckpt`): magic `VTCK`, u32 version, u32 metadata
//! length + UTF-8 JSON metadata (the embedded config), u32 entry count,
//! then per entry: u16 name length + name bytes, u8 rank, u32 dims...,
//! little-endian f32 values. Saving the result of a load reproduces the
//! file byte for byte.
//!
//! K-means codebook (`.kmm`): magic `VTKM`, u32 version, u32 K, u32 d,
//! f64 inertia, then K*d centroid values row-major little-endian f64.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use valtime_core::params::ParamSet;
use valtime_core::units::KMeansModel;

const CKPT_MAGIC: &[u8; 4] = b"VTCK";
const CKPT_VERSION: u32 = 1;
const KM_MAGIC: &[u8; 4] = b"VTKM";
const KM_VERSION: u32 = 1;

/// One named parameter tensor, f32 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct CkptEntry {
    pub name: String,
    pub dims: Vec<u32>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta_json: String,
    pub entries: Vec<CkptEntry>,
}

impl Checkpoint {
    /// Capture every parameter of a store (f64 -> f32).
    pub fn from_params<M: Serialize>(ps: &ParamSet, meta: &M) -> Result<Self> {
        let entries = ps
            .iter()
            .map(|(_, p)| CkptEntry {
                name: p.name.clone(),
                dims: vec![p.rows as u32, p.cols as u32],
                values: p.values.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Ok(Self {
            meta_json: serde_json::to_string(meta)?,
            entries,
        })
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        Ok(serde_json::from_str(&self.meta_json)?)
    }

    pub fn entry(&self, name: &str) -> Option<&CkptEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Copy values into an already-built parameter store with identical
    /// names and shapes, optionally rewriting checkpoint names first.
    pub fn load_into(&self, ps: &mut ParamSet, rename: impl Fn(&str) -> Option<String>) -> Result<usize> {
        let mut loaded = 0usize;
        for e in &self.entries {
            let Some(target) = rename(&e.name) else { continue };
            let id = ps
                .find(&target)
                .with_context(|| format!("checkpoint entry '{}' has no parameter '{target}'", e.name))?;
            let p = ps.get_mut(id);
            if e.dims != [p.rows as u32, p.cols as u32] {
                bail!(
                    "shape mismatch for '{target}': checkpoint {:?}, model {}x{}",
                    e.dims,
                    p.rows,
                    p.cols
                );
            }
            for (dst, &src) in p.values.iter_mut().zip(&e.values) {
                *dst = src as f64;
            }
            loaded += 1;
        }
        Ok(loaded)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let meta = self.meta_json.as_bytes();
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(e.dims.len() as u8);
            for &d in &e.dims {
                buf.extend_from_slice(&d.to_le_bytes());
            }
            for &v in &e.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            bail!("not a checkpoint file (bad magic)");
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            bail!("unsupported checkpoint version {version}");
        }
        let meta_len = r.u32()? as usize;
        let meta_json = String::from_utf8(r.take(meta_len)?.to_vec())?;
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())?;
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()?);
            }
            let count: usize = dims.iter().map(|&d| d as usize).product();
            let raw = r.take(count * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(CkptEntry { name, dims, values });
        }
        if r.pos != bytes.len() {
            bail!("trailing bytes after checkpoint payload");
        }
        Ok(Self { meta_json, entries })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .context("truncated checkpoint")?;
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).with_context(|| format!("writing {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)
}

pub fn save_kmeans(path: &Path, model: &KMeansModel) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + model.centroids.len() * 8);
    buf.extend_from_slice(KM_MAGIC);
    buf.extend_from_slice(&KM_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.k as u32).to_le_bytes());
    buf.extend_from_slice(&(model.dim as u32).to_le_bytes());
    buf.extend_from_slice(&model.inertia.to_le_bytes());
    for &c in &model.centroids {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

pub fn load_kmeans(path: &Path) -> Result<KMeansModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != KM_MAGIC {
        bail!("not a k-means codebook file (bad magic)");
    }
    let version = r.u32()?;
    if version != KM_VERSION {
        bail!("unsupported codebook version {version}");
    }
    let k = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let inertia = f64::from_le_bytes(r.take(8)?.try_into()?);
    let raw = r.take(k * dim * 8)?;
    let centroids = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(KMeansModel {
        centroids,
        k,
        dim,
        inertia,
    })
}
