//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `SCBCT`, `u32` format version, `u32`
//! header length and a UTF-8 `key=value` header (training configuration plus
//! `dtype`, `step`, `seed`), `u32` blob count, then per blob in
//! alphabetical order: `u32` name length, name, `u32` rank, `u64` dims,
//! `u64` element count and the payload.

use std::io::{Read, Write};
use std::path::Path;

use cbct_nn::Tensor;

use crate::config::TrainConfig;
use crate::model::Model;
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"SCBCT";
pub const FORMAT_VERSION: u32 = 1;
/// Environment switch for bit-exact (64-bit) checkpoints.
pub const DETERMINISTIC_ENV: &str = "SCBCT_DETERMINISTIC";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlobDtype {
    F32,
    F64,
}

impl BlobDtype {
    /// `F64` when `SCBCT_DETERMINISTIC=1`, else `F32`.
    pub fn from_env() -> Self {
        if deterministic_mode() {
            BlobDtype::F64
        } else {
            BlobDtype::F32
        }
    }

    fn name(self) -> &'static str {
        match self {
            BlobDtype::F32 => "f32le",
            BlobDtype::F64 => "f64le",
        }
    }
}

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

/// What a checkpoint restores besides the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub step: u64,
    pub dtype: BlobDtype,
}

pub fn save_checkpoint(model: &Model, cfg: &TrainConfig, step: u64, dtype: BlobDtype, path: impl AsRef<Path>) -> Result<()> {
    if cfg.model != model.cfg {
        return Err(Error::Checkpoint("training config does not describe this model".into()));
    }
    let mut header = cfg.to_kv_string();
    header.push_str(&format!("dtype={}\nstep={step}\n", dtype.name()));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let ids = model.store.sorted_ids();
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        let name = model.store.name(id);
        let t = model.store.get(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        match dtype {
            BlobDtype::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            BlobDtype::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = r.u32("header length")? as usize;
    let header = std::str::from_utf8(r.take(hlen, "header")?)
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let mut dtype = None;
    let mut step = None;
    for line in header.lines() {
        match line.split_once('=') {
            Some(("dtype", "f32le")) => dtype = Some(BlobDtype::F32),
            Some(("dtype", "f64le")) => dtype = Some(BlobDtype::F64),
            Some(("dtype", other)) => return Err(Error::Checkpoint(format!("unknown dtype '{other}'"))),
            Some(("step", s)) => step = Some(s.parse().map_err(|_| Error::Checkpoint(format!("bad step '{s}'")))?),
            _ => {}
        }
    }
    let dtype = dtype.ok_or_else(|| Error::Checkpoint("header lacks dtype".into()))?;
    let step = step.ok_or_else(|| Error::Checkpoint("header lacks step".into()))?;
    let config = TrainConfig::parse_kv(header, &["dtype", "step"])?;
    let mut model = Model::new(config.model.clone(), config.seed)?;

    let count = r.u32("blob count")? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!("{count} blobs, model has {} tensors", model.store.len())));
    }
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let nlen = r.u32("blob name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "blob name")?)
            .map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?
            .to_string();
        if prev.as_deref().is_some_and(|p| p >= name.as_str()) {
            return Err(Error::Checkpoint(format!("blob '{name}' out of order")));
        }
        let rank = r.u32("blob rank")? as usize;
        let shape = (0..rank).map(|_| r.u64("blob dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = r.u64("blob length")? as usize;
        let id = model.store.id(&name).ok_or_else(|| Error::Checkpoint(format!("unknown blob '{name}'")))?;
        if model.store.get(id).shape() != shape.as_slice() || shape.iter().product::<usize>() != n {
            return Err(Error::Shape(format!(
                "blob '{name}' has shape {shape:?}, model expects {:?}",
                model.store.get(id).shape()
            )));
        }
        let data: Vec<f64> = match dtype {
            BlobDtype::F32 => {
                r.take(4 * n, "blob payload")?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
            }
            BlobDtype::F64 => {
                r.take(8 * n, "blob payload")?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            }
        };
        *model.store.get_mut(id) = Tensor::from_vec(&shape, data);
        prev = Some(name);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after the last blob".into()));
    }
    Ok((model, CheckpointMeta { config, step, dtype }))
}
