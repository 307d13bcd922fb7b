//! Byte-stable checkpoint container.
//!
//! Layout: a 4-byte magic, a little-endian u32 format version, a
//! little-endian u64 header length, a JSON header (model config, seed,
//! adapter bookkeeping, step counter, and the ordered parameter manifest
//! with shapes and trainability), then each parameter's values as f64
//! little-endian in manifest order, then — when optimizer state is present
//! — each parameter's first and second Adam moments in the same order.
//! Serializing the same model twice yields identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::io::atomic_write;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::Model;
use crate::numerics::optimizer::{AdamState, Param};

const MAGIC: &[u8; 4] = b"DKCP";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    seed: u64,
    adapter_groups: Vec<String>,
    active_adapter: Option<String>,
    step: u64,
    has_optimizer: bool,
    params: Vec<ParamMeta>,
}

/// Serialize a model, optional optimizer state, and step counter.
pub fn checkpoint_bytes(
    model: &Model,
    optimizer: Option<&AdamState>,
    step: u64,
) -> Result<Vec<u8>> {
    if let Some(st) = optimizer {
        if st.first_moments().len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state covers {} parameters, model has {}",
                st.first_moments().len(),
                model.params.len(),
            )));
        }
    }
    for p in &model.params {
        if p.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Checkpoint(format!(
                "refusing to save non-finite values in parameter '{}'",
                p.name
            )));
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.cfg.clone(),
        seed: model.seed,
        adapter_groups: model.adapter_groups.clone(),
        active_adapter: model.active_adapter.clone(),
        step,
        has_optimizer: optimizer.is_some(),
        params: model
            .params
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                shape: p.shape.clone(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for p in &model.params {
        for &x in &p.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(st) = optimizer {
        for (m, v) in st.first_moments().iter().zip(st.second_moments()) {
            for &x in m {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for &x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    optimizer: Option<&AdamState>,
    step: u64,
) -> Result<()> {
    atomic_write(path, &checkpoint_bytes(model, optimizer, step)?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos.saturating_add(n) > self.buf.len() {
            return Err(Error::Checkpoint("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<AdamState>, u64)> {
    let buf = std::fs::read(path)?;
    parse_checkpoint(&buf)
}

pub fn parse_checkpoint(buf: &[u8]) -> Result<(Model, Option<AdamState>, u64)> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(cur.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("bad checkpoint header: {e}")))?;
    header.config.validate()?;

    let mut params = Vec::with_capacity(header.params.len());
    for meta in &header.params {
        let len: usize = meta.shape.iter().product();
        let data = cur.f64s(len)?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Checkpoint(format!(
                "non-finite values in parameter '{}'",
                meta.name
            )));
        }
        let mut p = Param::new(meta.name.clone(), meta.shape.clone(), data);
        p.trainable = meta.trainable;
        params.push(p);
    }
    let optimizer = if header.has_optimizer {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for p in &params {
            m.push(cur.f64s(p.data.len())?);
            v.push(cur.f64s(p.data.len())?);
        }
        Some(AdamState::from_moments(m, v)?)
    } else {
        None
    };
    if cur.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after checkpoint payload",
            buf.len() - cur.pos
        )));
    }

    let stored_flags: Vec<bool> = params.iter().map(|p| p.trainable).collect();
    let mut model = Model::from_parts(
        header.config,
        params,
        header.adapter_groups,
        header.active_adapter.clone(),
        header.seed,
    )?;
    // Recompute trainability from the adapter bookkeeping; a mismatch with
    // the stored flags means the file is internally inconsistent.
    model.set_active_adapter(header.active_adapter.as_deref())?;
    for (p, &stored) in model.params.iter().zip(&stored_flags) {
        if p.trainable != stored {
            return Err(Error::Checkpoint(format!("trainable flag mismatch for '{}'", p.name)));
        }
    }
    Ok((model, optimizer, header.step))
}
