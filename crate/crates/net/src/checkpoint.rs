//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "UDCVRCKP"
//! version  u32      currently 1
//! hlen     u64      length of the JSON header
//! header   hlen bytes of JSON: run config (TOML text), iteration,
//!          parameter names and shapes, whether optimizer state follows
//! params   f32 values of every parameter, in header order
//! adam     per parameter: u64 step count, then m and v as f32 (optional)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use udcvr_core::config::RunConfig;
use udcvr_tensor::{AdamState, ParamStore};

use crate::error::{NetError, Result};

const MAGIC: &[u8; 8] = b"UDCVRCKP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    iter: u64,
    params: Vec<(String, Vec<usize>)>,
    has_optimizer: bool,
}

/// Everything needed to restore a model or resume a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iter: u64,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub optimizer: Option<Vec<AdamState>>,
}

impl Checkpoint {
    /// Copies the stored values into `store`, matching by name and shape.
    pub fn load_into(&self, store: &mut ParamStore, path: &Path) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(ck_err(
                path,
                format!("{} parameters stored, model has {}", self.params.len(), store.len()),
            ));
        }
        for ((name, shape, values), (_, p)) in self.params.iter().zip(store.iter_mut()) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(ck_err(
                    path,
                    format!("parameter {name} {shape:?} does not match {} {:?}", p.name, p.value.shape()),
                ));
            }
            p.value.data_mut().copy_from_slice(values);
        }
        Ok(())
    }
}

fn ck_err(path: &Path, msg: impl Into<String>) -> NetError {
    NetError::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Writes atomically via a temporary sibling file.
pub fn save_checkpoint(
    path: &Path,
    config: &RunConfig,
    iter: u64,
    store: &ParamStore,
    optimizer: Option<&[AdamState]>,
) -> Result<()> {
    let header = Header {
        config: config.to_toml_string(),
        iter,
        params: store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec()))
            .collect(),
        has_optimizer: optimizer.is_some(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| ck_err(path, e.to_string()))?;
    let mut buf = Vec::with_capacity(header.len() + 16 + store.num_scalars() * 12);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, p) in store.iter() {
        put_f32s(&mut buf, p.value.data());
    }
    if let Some(states) = optimizer {
        for st in states {
            buf.extend_from_slice(&st.steps.to_le_bytes());
            put_f32s(&mut buf, &st.m);
            put_f32s(&mut buf, &st.v);
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| ck_err(path, e.to_string()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| ck_err(path, e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| ck_err(path, e.to_string()))?;
    Ok(())
}

fn put_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ck_err(self.path, "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| ck_err(self.path, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| ck_err(path, e.to_string()))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(ck_err(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ck_err(path, format!("unsupported version {version}")));
    }
    let hlen = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| ck_err(path, e.to_string()))?;
    let config = RunConfig::from_toml_str(&header.config, &[])?;
    let mut params = Vec::with_capacity(header.params.len());
    for (name, shape) in header.params {
        let values = r.f32s(shape.iter().product())?;
        params.push((name, shape, values));
    }
    let optimizer = if header.has_optimizer {
        let mut states = Vec::with_capacity(params.len());
        for (_, _, values) in &params {
            let steps = r.u64()?;
            let m = r.f32s(values.len())?;
            let v = r.f32s(values.len())?;
            states.push(AdamState { m, v, steps });
        }
        Some(states)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(ck_err(path, "trailing bytes"));
    }
    Ok(Checkpoint {
        config,
        iter: header.iter,
        params,
        optimizer,
    })
}
