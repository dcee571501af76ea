//! Model checkpoints.
//!
//! Layout: magic `SPCK`, then a 32-bit little-endian format version, then a
//! 32-bit little-endian header length, then that many bytes of JSON header
//! (model kind, model config, ordered parameter names and shapes), then the
//! parameter values as 64-bit little-endian IEEE-754 floats, concatenated in
//! header order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shortcut_probe_core::model::{Model, ModelConfig, ModelError, ModelKind};

pub const CKPT_MAGIC: [u8; 4] = *b"SPCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: magic {found:?} is not {:?}", path.display(), CKPT_MAGIC)]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{}: unsupported checkpoint version {version}", path.display())]
    BadVersion { path: PathBuf, version: u32 },
    #[error("{}: header: {detail}", path.display())]
    BadHeader { path: PathBuf, detail: String },
    #[error("parameter {index} is {found} but the model built from the header has {expected}")]
    ParamMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("{}: parameter data truncated", path.display())]
    Truncated { path: PathBuf },
    #[error("{}: {extra} trailing bytes after parameter data", path.display())]
    Trailing { path: PathBuf, extra: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    kind: ModelKind,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(path))?;
        }
    }
    let params = model.params();
    let header = CkptHeader {
        kind: model.kind(),
        config: model.config().clone(),
        params: model
            .param_names()
            .into_iter()
            .zip(&params)
            .map(|(name, p)| ParamEntry {
                name,
                shape: p.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| CheckpointError::BadHeader {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;

    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    out.write_all(&CKPT_MAGIC).map_err(io_err(path))?;
    out.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io_err(path))?;
    out.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(io_err(path))?;
    out.write_all(&header_json).map_err(io_err(path))?;
    for p in params {
        for &v in p.data() {
            out.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
        }
    }
    out.flush().map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Model, CheckpointError> {
    let mut file = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(io_err(path))?;
    if magic != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word).map_err(io_err(path))?;
    let version = u32::from_le_bytes(word);
    if version != CKPT_VERSION {
        return Err(CheckpointError::BadVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    file.read_exact(&mut word).map_err(io_err(path))?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json).map_err(io_err(path))?;
    let header: CkptHeader =
        serde_json::from_slice(&header_json).map_err(|e| CheckpointError::BadHeader {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;

    // The scaffold seed is irrelevant: every parameter is overwritten below.
    let mut model = match header.kind {
        ModelKind::Dual => Model::dual(header.config.clone(), 0)?,
        ModelKind::StainOnly => Model::stain_only(header.config.clone(), 0)?,
    };
    let names = model.param_names();
    if names.len() != header.params.len() {
        return Err(CheckpointError::ParamMismatch {
            index: names.len().min(header.params.len()),
            expected: format!("{} parameters", names.len()),
            found: format!("{} parameters", header.params.len()),
        });
    }
    let mut buf = Vec::new();
    for (index, (param, entry)) in model.params_mut().into_iter().zip(&header.params).enumerate() {
        if names[index] != entry.name || param.shape() != entry.shape.as_slice() {
            return Err(CheckpointError::ParamMismatch {
                index,
                expected: format!("{} {:?}", names[index], param.shape()),
                found: format!("{} {:?}", entry.name, entry.shape),
            });
        }
        let bytes = param.len() * 8;
        buf.resize(bytes, 0);
        file.read_exact(&mut buf)
            .map_err(|_| CheckpointError::Truncated {
                path: path.to_path_buf(),
            })?;
        for (dst, src) in param.data_mut().iter_mut().zip(buf.chunks_exact(8)) {
            *dst = f64::from_le_bytes([
                src[0], src[1], src[2], src[3], src[4], src[5], src[6], src[7],
            ]);
        }
    }
    let mut extra = [0u8; 1];
    match file.read(&mut extra) {
        Ok(0) => Ok(model),
        Ok(_) => {
            let mut rest = Vec::new();
            file.read_to_end(&mut rest).map_err(io_err(path))?;
            Err(CheckpointError::Trailing {
                path: path.to_path_buf(),
                extra: rest.len() as u64 + 1,
            })
        }
        Err(e) => Err(io_err(path)(e)),
    }
}
