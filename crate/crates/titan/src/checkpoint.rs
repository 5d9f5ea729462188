//! E3TF checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "E3TF" | u32 version | u32 n | n bytes key=value header
//! u32 tensor count | per tensor: u16 name length, name, u8 flags, u8 rank,
//!                    rank x u32 dims, u64 payload offset in bytes
//! f32 payload
//! ```
//!
//! Flag bit 0 marks auxiliary (distillation-only) layers, bit 1 marks
//! optimizer moments, stored as `opt.m/<param>` and `opt.v/<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context, Result};
use sha2::{Digest, Sha256};
use titan_core::model::{param_shapes, Model, ModelConfig, ModelParams, AUX_PREFIX};
use titan_core::tasks::OptimizerState;
use titan_core::Tensor;

use crate::config::{model_config_from, model_config_to_kv};
use crate::kv::Kv;

pub const MAGIC: &[u8; 4] = b"E3TF";
pub const VERSION: u32 = 1;
pub const FLAG_AUX: u8 = 1;
pub const FLAG_OPTIMIZER: u8 = 2;

const HEADER_PREFIX: &str = "model.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    /// Header fields beyond the model configuration, such as `step`,
    /// `seed` and `vocab_hash`.
    pub meta: BTreeMap<String, String>,
}

/// One tensor directory entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub flags: u8,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl Checkpoint {
    pub fn new(model: Model<f32>) -> Self {
        Self {
            model,
            optimizer: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta_u64(&self, key: &str) -> Result<Option<u64>> {
        self.meta
            .get(key)
            .map(|v| v.parse().map_err(|e| anyhow!("header field `{key}`: {e}")))
            .transpose()
    }

    pub fn step(&self) -> Result<u64> {
        Ok(self.meta_u64("step")?.unwrap_or(0))
    }

    pub fn header(&self) -> Kv {
        let mut kv = Kv::new();
        model_config_to_kv(&self.model.config, &mut kv, HEADER_PREFIX);
        for (k, v) in &self.meta {
            kv.set(k.clone(), v);
        }
        if let Some(o) = &self.optimizer {
            kv.set("optimizer_step", o.step);
        }
        kv
    }

    fn tensors(&self) -> Vec<(String, u8, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (name, t) in self.model.params.iter() {
            let flags = if name.starts_with(AUX_PREFIX) { FLAG_AUX } else { 0 };
            out.push((name.clone(), flags, t));
        }
        if let Some(o) = &self.optimizer {
            for (tag, slots) in [("m", &o.m), ("v", &o.v)] {
                for (name, t) in slots.iter() {
                    let flags = FLAG_OPTIMIZER | if name.starts_with(AUX_PREFIX) { FLAG_AUX } else { 0 };
                    out.push((format!("opt.{tag}/{name}"), flags, t));
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for key in self.meta.keys() {
            ensure!(!key.starts_with(HEADER_PREFIX), "meta key `{key}` collides with the model header");
            ensure!(key != "optimizer_step", "meta key `optimizer_step` is reserved");
        }
        let header = self.header().render();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let tensors = self.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, flags, t) in &tensors {
            ensure!(name.len() <= u16::MAX as usize, "tensor name too long");
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(*flags);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.numel() as u64;
        }
        for (_, _, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_bytes()?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, entries, payload) = parse(bytes)?;
        let section = header.section(HEADER_PREFIX.trim_end_matches('.'));
        let r = section.reader();
        let config = model_config_from(&r, "", ModelConfig::toy(1))?;
        r.finish().context("checkpoint header")?;
        let optimizer_step: Option<u64> = header.raw("optimizer_step").map(str::parse).transpose()?;
        let meta = header
            .iter()
            .filter(|(k, _)| !k.starts_with(HEADER_PREFIX) && k.as_str() != "optimizer_step")
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();

        let expected: BTreeMap<String, Vec<usize>> = param_shapes(&config).into_iter().collect();
        let mut params = ModelParams::default();
        let mut m = ModelParams::default();
        let mut v = ModelParams::default();
        for e in &entries {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            ensure!(end <= payload.len(), "tensor `{}` runs past the payload", e.name);
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let moment = e.flags & FLAG_OPTIMIZER != 0;
            let tensor = Tensor::new(e.shape.clone(), data)?.with_requires_grad(!moment);
            let (store, name) = if moment {
                if let Some(n) = e.name.strip_prefix("opt.m/") {
                    (&mut m, n)
                } else if let Some(n) = e.name.strip_prefix("opt.v/") {
                    (&mut v, n)
                } else {
                    bail!("optimizer tensor `{}` has no moment prefix", e.name);
                }
            } else {
                (&mut params, e.name.as_str())
            };
            let shape = expected
                .get(name)
                .ok_or_else(|| anyhow!("tensor `{}` is not part of the configured model", e.name))?;
            ensure!(
                shape == &e.shape,
                "tensor `{}` has shape {:?}, config expects {:?}",
                e.name,
                e.shape,
                shape
            );
            ensure!(
                (e.flags & FLAG_AUX != 0) == name.starts_with(AUX_PREFIX),
                "tensor `{}` has a wrong auxiliary flag",
                e.name
            );
            ensure!(store.insert(name, tensor).is_none(), "duplicate tensor `{}`", e.name);
        }
        for name in expected.keys() {
            ensure!(params.contains(name), "checkpoint lacks tensor `{name}`");
        }
        let optimizer = match optimizer_step {
            Some(step) => {
                for name in expected.keys() {
                    ensure!(m.contains(name) && v.contains(name), "optimizer state lacks `{name}`");
                }
                Some(OptimizerState { step, m, v })
            }
            None => {
                ensure!(m.is_empty() && v.is_empty(), "optimizer tensors without optimizer_step");
                None
            }
        };
        Ok(Self {
            model: Model { config, params },
            optimizer,
            meta,
        })
    }
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| anyhow!("truncated file"))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn u32_at(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into()?))
}

/// Header, tensor directory and payload, without shape validation.
pub fn parse(bytes: &[u8]) -> Result<(Kv, Vec<TensorEntry>, &[u8])> {
    let mut pos = 0;
    ensure!(take(bytes, &mut pos, 4)? == MAGIC, "not an E3TF file");
    let version = u32_at(bytes, &mut pos)?;
    ensure!(version == VERSION, "unsupported checkpoint version {version}");
    let n = u32_at(bytes, &mut pos)? as usize;
    let header = Kv::parse(std::str::from_utf8(take(bytes, &mut pos, n)?)?)?;
    let count = u32_at(bytes, &mut pos)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(bytes, &mut pos, 2)?.try_into()?) as usize;
        let name = String::from_utf8(take(bytes, &mut pos, len)?.to_vec())?;
        let flags = take(bytes, &mut pos, 1)?[0];
        let rank = take(bytes, &mut pos, 1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| u32_at(bytes, &mut pos).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into()?);
        entries.push(TensorEntry {
            name,
            flags,
            shape,
            offset,
        });
    }
    Ok((header, entries, &bytes[pos..]))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}
