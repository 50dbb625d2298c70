//! Model checkpoints.
//!
//! ```text
//! "SVCK" | version u32 | header length u64 | header (canonical JSON)
//! | parameter count u32
//! | per parameter: name length u32, name, rank u32, dims u32…, trainable u8
//! | payloads: every parameter's values as f64, in manifest order
//! | crc32 of everything before it
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use syncvoice_core::fmtrain::{ModelConfig, SyncVoiceModel, TrainConfig};
use syncvoice_core::numcore::{Grid, ParamEntry};

use crate::bytes::{len_u32, put_f64s, put_u32, put_u64, Reader};
use crate::error::{io_err, AppError, AppResult};

pub const MAGIC: &[u8; 4] = b"SVCK";
pub const VERSION: u32 = 1;

/// Everything needed to rebuild the run that produced the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub step: usize,
    pub model_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// SHA-256 of the corpus file the run trained on.
    pub corpus_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: SyncVoiceModel,
}

pub fn encode_checkpoint(header: &CheckpointHeader, model: &SyncVoiceModel) -> AppResult<Vec<u8>> {
    if header.model != model.config || header.model_seed != model.seed {
        return Err(AppError::Format(
            "checkpoint header does not describe this model".into(),
        ));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let text = serde_json::to_vec(header)?;
    put_u64(&mut out, text.len() as u64);
    out.extend_from_slice(&text);
    let entries = model.params.entries();
    put_u32(&mut out, len_u32(entries.len(), "parameter count")?);
    for e in entries {
        put_u32(&mut out, len_u32(e.name.len(), "parameter name length")?);
        out.extend_from_slice(e.name.as_bytes());
        put_u32(&mut out, len_u32(e.value.shape().len(), "rank")?);
        for &d in e.value.shape() {
            put_u32(&mut out, len_u32(d, "dimension")?);
        }
        out.push(e.trainable as u8);
    }
    for e in entries {
        put_f64s(&mut out, e.value.data());
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> AppResult<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(AppError::Format("not a checkpoint file (missing SVCK magic)".into()));
    }
    if bytes.len() < 12 {
        return Err(AppError::Corruption("checkpoint truncated inside the header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader::new(body, "checkpoint");
    r.take(4)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(AppError::Format(format!(
            "checkpoint version {version} is not supported (expected {VERSION})"
        )));
    }
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(AppError::Corruption(format!(
            "checkpoint CRC32 {actual:08x} does not match stored {stored:08x}"
        )));
    }
    let header_len = usize::try_from(r.u64()?).map_err(|_| AppError::Corruption("header length overflows".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| AppError::Corruption(format!("checkpoint header: {e}")))?;
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| AppError::Corruption("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| Ok(r.u32()? as usize))
            .collect::<AppResult<Vec<usize>>>()?;
        let trainable = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(AppError::Corruption(format!("parameter {name}: trainable flag {b}"))),
        };
        manifest.push((name, shape, trainable));
    }
    let mut entries = Vec::with_capacity(count);
    for (name, shape, trainable) in manifest {
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| AppError::Corruption(format!("parameter {name}: shape overflows")))?;
        let value = Grid::new(shape, r.f64s(n)?).map_err(|e| AppError::Corruption(format!("parameter {name}: {e}")))?;
        entries.push(ParamEntry { name, value, trainable });
    }
    if r.remaining() != 0 {
        return Err(AppError::Corruption(format!(
            "{} unexpected bytes before the checksum",
            r.remaining()
        )));
    }
    let model = SyncVoiceModel::with_params(header.model, header.model_seed, entries)?;
    Ok(Checkpoint { header, model })
}

pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, model: &SyncVoiceModel) -> AppResult<()> {
    std::fs::write(path, encode_checkpoint(header, model)?).map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> AppResult<Checkpoint> {
    decode_checkpoint(&std::fs::read(path).map_err(io_err(path))?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> AppResult<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(io_err(path))?))
}
