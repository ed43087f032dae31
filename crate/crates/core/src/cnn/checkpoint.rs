//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TIDM" | version: u8 | config_len: u32 | config JSON | crc64: u64 | tensors: f64...
//! ```
//!
//! The CRC-64/XZ covers the config JSON followed by the tensor bytes.
//! Tensors follow [`CnnConfig::tensor_layout`] order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{CnnConfig, CnnModel, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TIDM";
pub const CHECKPOINT_VERSION: u8 = 1;
const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);
const FIXED_HEADER: usize = 4 + 1 + 4;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a model checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u8, expected: u8 },
    #[error("checkpoint checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("checkpoint truncated before the end of its header")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn write_checkpoint<F: Scalar, W: Write>(mut sink: W, model: &CnnModel<F>) -> Result<(), CheckpointError> {
    let config = serde_json::to_vec(&model.config).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let tensors: Vec<u8> = model
        .params
        .iter()
        .flatten()
        .flat_map(|w| w.f64().to_le_bytes())
        .collect();
    let mut digest = CRC64.digest();
    digest.update(&config);
    digest.update(&tensors);

    sink.write_all(CHECKPOINT_MAGIC)?;
    sink.write_all(&[CHECKPOINT_VERSION])?;
    sink.write_all(&(config.len() as u32).to_le_bytes())?;
    sink.write_all(&config)?;
    sink.write_all(&digest.finalize().to_le_bytes())?;
    sink.write_all(&tensors)?;
    Ok(())
}

pub fn read_checkpoint<F: Scalar, R: Read>(mut source: R) -> Result<CnnModel<F>, CheckpointError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < FIXED_HEADER {
        return Err(CheckpointError::Truncated);
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: bytes[4],
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let crc_at = FIXED_HEADER + config_len;
    if bytes.len() < crc_at + 8 {
        return Err(CheckpointError::Truncated);
    }
    let config_bytes = &bytes[FIXED_HEADER..crc_at];
    let stored = u64::from_le_bytes(bytes[crc_at..crc_at + 8].try_into().expect("8 bytes"));
    let tensor_bytes = &bytes[crc_at + 8..];
    let mut digest = CRC64.digest();
    digest.update(config_bytes);
    digest.update(tensor_bytes);
    let computed = digest.finalize();
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }

    let config: CnnConfig = serde_json::from_slice(config_bytes).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut model = CnnModel::<F>::zeros(config).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    if tensor_bytes.len() != model.param_count() * 8 {
        return Err(CheckpointError::Corrupt(format!(
            "{} tensor bytes for {} parameters",
            tensor_bytes.len(),
            model.param_count()
        )));
    }
    let mut values = tensor_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for tensor in &mut model.params {
        for w in tensor.iter_mut() {
            *w = F::of(values.next().expect("length checked"));
        }
    }
    Ok(model)
}

pub fn save_checkpoint<F: Scalar>(model: &CnnModel<F>, path: &Path) -> Result<(), CheckpointError> {
    let file = |source| CheckpointError::File {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(file)?);
    write_checkpoint(&mut w, model)?;
    w.flush().map_err(file)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<CnnModel<F>, CheckpointError> {
    let f = File::open(path).map_err(|source| CheckpointError::File {
        path: path.display().to_string(),
        source,
    })?;
    read_checkpoint(BufReader::new(f))
}
