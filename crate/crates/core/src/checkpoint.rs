//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MUCP" | version: u32 | manifest_len: u32 | manifest (TOML) | zero pad to 64 | f32 blob
//! ```
//!
//! The manifest carries the model spec, training metadata and one entry per
//! tensor (`name`, `dtype`, `shape`, `offset` into the blob). Tensors are
//! stored in name order, back to back.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{check_params, init_params, ParamStore};
use crate::spec::ModelSpec;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MUCP";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: usize = 64;
const HEADER: usize = 12;

/// Model parameters plus the metadata needed to rebuild and resume them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub step: u64,
    pub seed: u64,
    /// Set by upcycling surgery; distinguishes upcycled from scratch MoE models.
    pub upcycled: bool,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    step: u64,
    /// Decimal string: TOML integers stop at `i64::MAX`.
    seed: String,
    upcycled: bool,
    blob_bytes: u64,
    model: ModelSpec,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Randomly initialized model at step 0.
    pub fn fresh(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = init_params(&spec, seed)?;
        Ok(Self { spec, step: 0, seed, upcycled: false, params })
    }

    /// Checks names and shapes against the spec.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        check_params(&self.spec, &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            tensors.push(Entry { name: name.clone(), dtype: "f32".into(), shape: t.shape().to_vec(), offset });
            offset += 4 * t.numel() as u64;
        }
        let manifest = Manifest {
            step: self.step,
            seed: self.seed.to_string(),
            upcycled: self.upcycled,
            blob_bytes: offset,
            model: self.spec.clone(),
            tensors,
        };
        let text = toml::to_string(&manifest).map_err(|e| bad(format!("manifest encoding failed: {e}")))?;
        let mlen = u32::try_from(text.len()).map_err(|_| bad("manifest exceeds 4 GiB"))?;
        let blob_start = (HEADER + text.len()).div_ceil(ALIGN) * ALIGN;

        let mut out = Vec::with_capacity(blob_start + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&mlen.to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.resize(blob_start, 0);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let text = bytes.get(HEADER..HEADER + mlen).ok_or_else(|| bad("truncated manifest"))?;
        let text = std::str::from_utf8(text).map_err(|_| bad("manifest is not UTF-8"))?;
        let manifest: Manifest = toml::from_str(text).map_err(|e| bad(format!("malformed manifest: {e}")))?;
        let seed = manifest.seed.parse().map_err(|_| bad(format!("malformed seed `{}`", manifest.seed)))?;

        let blob_start = (HEADER + mlen).div_ceil(ALIGN) * ALIGN;
        let blob = bytes.get(blob_start..).ok_or_else(|| bad("truncated blob"))?;
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(bad(format!("blob holds {} bytes, manifest declares {}", blob.len(), manifest.blob_bytes)));
        }

        let mut params = ParamStore::new();
        let mut end = 0u64;
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(bad(format!("tensor `{}` has unsupported dtype `{}`", e.name, e.dtype)));
            }
            if e.offset < end {
                return Err(bad(format!("tensor `{}` overlaps its predecessor or is out of order", e.name)));
            }
            let n: usize = e.shape.iter().product();
            end = e.offset + 4 * n as u64;
            if end > manifest.blob_bytes {
                return Err(bad(format!("tensor `{}` extends past the blob", e.name)));
            }
            let raw = &blob[e.offset as usize..end as usize];
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| bad(format!("tensor `{}`: {err}", e.name)))?;
            if params.contains(&e.name) {
                return Err(bad(format!("duplicate tensor `{}`", e.name)));
            }
            params.insert(e.name.clone(), t);
        }
        let ck = Checkpoint { spec: manifest.model, step: manifest.step, seed, upcycled: manifest.upcycled, params };
        ck.validate().map_err(|e| bad(format!("checkpoint does not match its model spec: {e}")))?;
        Ok(ck)
    }

    /// Writes via a sibling temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}
