//! Checkpoint layout (little endian):
//!
//! ```text
//! "LMCK" | u32 version | u32 n | n bytes of config text (key=value lines)
//! u32 tensor count | per tensor: u32 n | n bytes of name | tensor record
//! ```
//!
//! Tensor records use the `TLM1` tensor serialization.

use std::io::{Read, Write};

use super::{Model, ModelConfig};
use crate::config::KvConfig;
use crate::error::{LmError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LMCK";

pub fn write_checkpoint<W: Write>(w: &mut W, model: &Model) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let header = model.config().to_kv();
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for (name, t) in model.param_names().iter().zip(model.params()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_to(w)?;
    }
    Ok(())
}

/// Contents of a checkpoint before they are checked against the config.
#[derive(Clone, Debug)]
pub struct RawCheckpoint {
    pub version: u32,
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(LmError::Data(format!("checkpoint {what} length {n} is implausible")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| LmError::Data(format!("checkpoint {what} is not UTF-8")))
}

pub fn read_checkpoint_raw<R: Read>(r: &mut R) -> Result<RawCheckpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(LmError::Data("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(LmError::Unsupported(format!("checkpoint format version {version}")));
    }
    let config_text = read_string(r, "config")?;
    let n = read_u32(r)? as usize;
    let mut tensors = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let name = read_string(r, "tensor name")?;
        tensors.push((name, Tensor::read_from(r)?));
    }
    Ok(RawCheckpoint {
        version,
        config_text,
        tensors,
    })
}

/// Loads a model. With `expected`, the stored config must match it exactly.
pub fn read_checkpoint<R: Read>(r: &mut R, expected: Option<&ModelConfig>) -> Result<Model> {
    let raw = read_checkpoint_raw(r)?;
    let mut kv = KvConfig::parse(&raw.config_text)?;
    let config = ModelConfig::from_kv(&mut kv)?;
    kv.finish()?;
    if let Some(e) = expected {
        if e != &config {
            return Err(LmError::Config(format!(
                "checkpoint config does not match:\n--- checkpoint\n{}--- expected\n{}",
                config.to_kv(),
                e.to_kv()
            )));
        }
    }
    let specs = config.param_specs();
    if specs.len() != raw.tensors.len() {
        return Err(LmError::Data(format!(
            "checkpoint has {} tensors, config implies {}",
            raw.tensors.len(),
            specs.len()
        )));
    }
    for (s, (name, _)) in specs.iter().zip(&raw.tensors) {
        if &s.name != name {
            return Err(LmError::Data(format!("checkpoint tensor {name:?}, expected {:?}", s.name)));
        }
    }
    Model::from_params(config, raw.tensors.into_iter().map(|(_, t)| t).collect())
}
