//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "LSTCNCKP"
//! version  u32 LE   1
//! meta_len u32 LE   followed by the model config as TOML text (UTF-8)
//! count    u32 LE   number of records
//! record*  u64 LE record byte length, then
//!          u16 LE name length, name (UTF-8)
//!          u8 dtype tag (1 = f64, 2 = f32), u8 ndim, ndim x u64 LE dims
//!          payload, little-endian values in row-major order
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{LstcnModel, ModelConfig, ModelError};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"LSTCNCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config in checkpoint does not match: {0}")]
    ConfigMismatch(String),
    #[error("record {name}: {detail}")]
    Record { name: String, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn write_store<S: Scalar, W: Write>(
    w: &mut W,
    config: &ModelConfig,
    store: &ParamStore<S>,
    dtype: DType,
) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = config.to_text();
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for e in store.entries() {
        let mut rec = Vec::new();
        rec.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        rec.extend_from_slice(e.name.as_bytes());
        rec.push(dtype.tag());
        rec.push(e.value.rank() as u8);
        for &d in e.value.shape() {
            rec.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in e.value.data() {
            match dtype {
                DType::F64 => rec.extend_from_slice(&x.as_f64().to_le_bytes()),
                DType::F32 => rec.extend_from_slice(&(x.as_f64() as f32).to_le_bytes()),
            }
        }
        w.write_all(&(rec.len() as u64).to_le_bytes())?;
        w.write_all(&rec)?;
    }
    Ok(())
}

/// Write `model` with values stored as `dtype`. The file is written to a
/// temporary sibling first and then renamed into place.
pub fn save_checkpoint<S: Scalar>(
    model: &LstcnModel<S>,
    path: &Path,
    dtype: DType,
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_store(&mut buf, model.config(), model.store(), dtype)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Corrupt(format!(
                "truncated while reading {what}"
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct RawRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn parse(buf: &[u8]) -> Result<(ModelConfig, Vec<RawRecord>), CheckpointError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8, "magic").map_err(|_| CheckpointError::Magic)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let meta_len = c.u32("metadata length")? as usize;
    let meta = std::str::from_utf8(c.take(meta_len, "metadata")?)
        .map_err(|_| CheckpointError::Corrupt("metadata is not UTF-8".into()))?;
    let config = ModelConfig::from_text(meta)
        .map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;
    let count = c.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let len = c.u64("record length")? as usize;
        let start = c.pos;
        let name_len = c.u16("name length")? as usize;
        let name = String::from_utf8(c.take(name_len, "name")?.to_vec())
            .map_err(|_| CheckpointError::Corrupt(format!("record {i} name is not UTF-8")))?;
        let bad = |detail: String| CheckpointError::Record {
            name: name.clone(),
            detail,
        };
        let dtype =
            DType::from_tag(c.u8("dtype")?).ok_or_else(|| bad("unknown dtype tag".into()))?;
        let ndim = c.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64("dim")? as usize);
        }
        let n = numel(&shape);
        let payload = c.take(n * dtype.size(), "payload")?;
        let values = match dtype {
            DType::F64 => payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            DType::F32 => payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
        };
        if c.pos - start != len {
            return Err(bad(format!(
                "length field {len} disagrees with contents {}",
                c.pos - start
            )));
        }
        records.push(RawRecord {
            name,
            shape,
            values,
        });
    }
    if c.pos != buf.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            buf.len() - c.pos
        )));
    }
    Ok((config, records))
}

/// Read the config stored in a checkpoint without loading weights.
pub fn read_checkpoint_config(path: &Path) -> Result<ModelConfig, CheckpointError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(parse(&buf)?.0)
}

/// Load a checkpoint, rebuilding the model from its stored config.
/// Every record must match a parameter by name and shape, and every
/// parameter must be present.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<LstcnModel<S>, CheckpointError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let (config, records) = parse(&buf)?;
    let mut model = LstcnModel::<S>::new(config)?;
    let mut store = model.store().clone();
    let mut seen = vec![false; store.len()];
    for r in records {
        let id = store.find(&r.name).ok_or_else(|| CheckpointError::Record {
            name: r.name.clone(),
            detail: "no such parameter in the model".into(),
        })?;
        if seen[id.index()] {
            return Err(CheckpointError::Record {
                name: r.name,
                detail: "duplicate record".into(),
            });
        }
        let expected = store.get(id).shape().to_vec();
        if r.shape != expected {
            return Err(CheckpointError::Record {
                name: r.name,
                detail: format!("shape {:?} but model expects {expected:?}", r.shape),
            });
        }
        let values: Vec<S> = r.values.iter().map(|&v| S::lit(v)).collect();
        *store.get_mut(id) =
            Tensor::from_vec(expected, values).map_err(|e| CheckpointError::Record {
                name: r.name.clone(),
                detail: e.to_string(),
            })?;
        seen[id.index()] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(CheckpointError::Record {
            name: store.entries()[i].name.clone(),
            detail: "missing from checkpoint".into(),
        });
    }
    model.replace_store(store);
    Ok(model)
}

/// [`load_checkpoint`], refusing a checkpoint trained with a different config.
pub fn load_checkpoint_expecting<S: Scalar>(
    path: &Path,
    expected: &ModelConfig,
) -> Result<LstcnModel<S>, CheckpointError> {
    let model = load_checkpoint::<S>(path)?;
    if model.config() != expected {
        let stored = model.config().to_text();
        let want = expected.to_text();
        let diff: Vec<String> = stored
            .lines()
            .zip(want.lines())
            .filter(|(a, b)| a != b)
            .map(|(a, b)| format!("checkpoint `{a}` vs requested `{b}`"))
            .collect();
        return Err(CheckpointError::ConfigMismatch(diff.join("; ")));
    }
    Ok(model)
}
