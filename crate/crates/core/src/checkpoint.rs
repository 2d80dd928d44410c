//! Single-file checkpoint container: a JSON metadata block followed by named
//! little-endian tensors.
//!
//! Layout:
//! ```text
//! magic "XVIEWCKP" | u32 format version | u64 metadata length | metadata JSON
//! u32 tensor count
//! per tensor: u32 name length | name | u8 dtype (0 = f32, 1 = f64)
//!             u32 rank | u64 dims... | raw data
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"XVIEWCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningState {
    pub active: bool,
    pub activated_at: Option<u64>,
    /// Recent ranking losses used for plateau detection.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub step: u64,
    pub seed: u64,
    pub mining: MiningState,
    /// Update counts of the G, D and R optimizers.
    pub optimizer_steps: [u64; 3],
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn dtype_tag(dtype: DType) -> Result<u8> {
    match dtype {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(Error::InvalidArgument(format!("cannot store {other:?} tensors"))),
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dtype_tag(t.dtype())?);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let flat = t.flatten_all()?;
            match t.dtype() {
                DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                _ => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = temp_path(path);
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, device).map_err(|e| match e {
            Error::Checkpoint { reason, .. } => corrupt(path, reason),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let here = Path::new("<memory>");
        let mut r = Reader { bytes, pos: 0 };
        fn take<'a>(r: &mut Reader<'a>, n: usize) -> Result<&'a [u8]> {
            r.take(n).ok_or_else(|| corrupt(Path::new("<memory>"), "truncated file"))
        }
        if take(&mut r, 8)? != MAGIC {
            return Err(corrupt(here, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(take(&mut r, 4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(here, format!("unsupported format version {version}")));
        }
        let meta_len = u64::from_le_bytes(take(&mut r, 8)?.try_into().unwrap()) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(take(&mut r, meta_len)?)?;
        let count = u32::from_le_bytes(take(&mut r, 4)?.try_into().unwrap());
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut r, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut r, name_len)?.to_vec())
                .map_err(|_| corrupt(here, "tensor name is not UTF-8"))?;
            let tag = take(&mut r, 1)?[0];
            let rank = u32::from_le_bytes(take(&mut r, 4)?.try_into().unwrap()) as usize;
            let dims = (0..rank)
                .map(|_| Ok(u64::from_le_bytes(take(&mut r, 8)?.try_into().unwrap()) as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let t = match tag {
                0 => {
                    let raw = take(&mut r, 4 * n)?;
                    let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, device)?
                }
                1 => {
                    let raw = take(&mut r, 8 * n)?;
                    let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, device)?
                }
                other => return Err(corrupt(here, format!("unknown dtype tag {other} for {name}"))),
            };
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(corrupt(here, "trailing bytes after last tensor"));
        }
        Ok(Self { meta, tensors })
    }

    /// Adds every variable and buffer of `store` under `prefix/`.
    pub fn capture_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, var) in store.vars() {
            self.tensors.insert(format!("{prefix}/{name}"), var.as_tensor().clone());
        }
        for (name, buf) in store.buffers() {
            self.tensors.insert(format!("{prefix}/{name}"), buf.read().unwrap().clone());
        }
    }

    /// Loads every variable and buffer of `store` from `prefix/` entries.
    pub fn restore_store(&self, prefix: &str, store: &ParamStore) -> Result<()> {
        let names = store
            .vars()
            .into_iter()
            .map(|(n, _)| n)
            .chain(store.buffers().into_iter().map(|(n, _)| n));
        for name in names {
            let key = format!("{prefix}/{name}");
            let t = self
                .tensors
                .get(&key)
                .ok_or_else(|| corrupt(Path::new("<memory>"), format!("missing tensor {key}")))?;
            store.assign(&name, t)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.tensors.get(key)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }
}
