//! Model checkpoints.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "DVTC" | version u8 = 1
//! config_len u64 | config as TOML (config_len bytes)
//! count u32
//! count × { name_len u32 | name (UTF-8) | message_len u64 | DVTN message }
//! ```
//!
//! Every tensor uses the same message format as the device→cloud uplink.

use std::io::Write;
use std::path::Path;

use crate::error::CheckpointError;
use crate::model::{ModelConfig, SplitModel};
use crate::wire::{decode_message, encode_message};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DVTC";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn encode_checkpoint(model: &SplitModel) -> Result<Vec<u8>, CheckpointError> {
    let config = toml::to_string(&model.config).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, name, tensor) in model.params.iter() {
        let msg = encode_message(tensor).map_err(|source| CheckpointError::Tensor {
            name: name.to_string(),
            source,
        })?;
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(msg.len() as u64).to_le_bytes());
        out.extend_from_slice(&msg);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let s = self
            .bytes
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or(CheckpointError::Truncated { offset: self.pos })?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SplitModel, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Mismatch("bad checkpoint magic".into()));
    }
    let version = r.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Mismatch(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config_len = r.u64()? as usize;
    let config_text =
        std::str::from_utf8(r.take(config_len)?).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let config: ModelConfig =
        toml::from_str(config_text).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut model = SplitModel::new(config, 0)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "checkpoint holds {count} tensors, model expects {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Mismatch("tensor name is not UTF-8".into()))?
            .to_string();
        let msg_len = r.u64()? as usize;
        let tensor = decode_message(r.take(msg_len)?).map_err(|source| CheckpointError::Tensor {
            name: name.clone(),
            source,
        })?;
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("unknown parameter `{name}`")))?;
        if model.params.get(id).shape() != tensor.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                tensor.shape(),
                model.params.get(id).shape()
            )));
        }
        *model.params.get_mut(id) = tensor;
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} trailing bytes at offset {}",
            bytes.len() - r.pos,
            r.pos
        )));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &SplitModel, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SplitModel, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}
