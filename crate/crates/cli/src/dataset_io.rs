//! On-disk dataset format.
//!
//! A dataset directory holds:
//! - `manifest.csv` with header `patch_id,group_id,center_id,stain,lesion,offset`,
//!   one row per patch, where `offset` is the byte position of the patch's
//!   pixel block inside the blob;
//! - `patches.bin`, starting with the magic bytes `GLM1`, then three 32-bit
//!   little-endian unsigned integers N, C, H (patches are square, W = H),
//!   then N*C*H*W 32-bit little-endian IEEE-754 floats in row-major
//!   [N, C, H, W] order;
//! - optionally `split.json` (the group split) and `gen.json` (the generator
//!   spec the data came from).
//!
//! Writes are deterministic: the same records produce byte-identical files.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use shortcut_probe_core::synth::{Dataset, GenError, GenSpec, PatchRecord, SplitPlan};

pub const BLOB_MAGIC: [u8; 4] = *b"GLM1";
pub const MANIFEST_NAME: &str = "manifest.csv";
pub const BLOB_NAME: &str = "patches.bin";
pub const SPLIT_NAME: &str = "split.json";
pub const GEN_NAME: &str = "gen.json";

const MANIFEST_HEADER: &str = "patch_id,group_id,center_id,stain,lesion,offset";
const HEADER_BYTES: u64 = 16;

#[derive(Debug, thiserror::Error)]
pub enum DatasetIoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: blob magic {found:?} is not {:?}", path.display(), BLOB_MAGIC)]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{}: blob truncated, needs {expected} bytes but holds {found}", path.display())]
    TruncatedBlob {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("{}: {extra} unexpected trailing bytes after pixel data", path.display())]
    TrailingBytes { path: PathBuf, extra: u64 },
    #[error("manifest lists {manifest} patches but blob header promises {blob}")]
    CountMismatch { manifest: usize, blob: usize },
    #[error("{}: manifest {detail}", path.display())]
    BadManifest { path: PathBuf, detail: String },
    #[error("{}: {detail}", path.display())]
    BadJson { path: PathBuf, detail: String },
    #[error(transparent)]
    Dataset(#[from] GenError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetIoError + '_ {
    move |source| DatasetIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `manifest.csv` and `patches.bin` into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<(), DatasetIoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (c, h, w) = data.shape();
    let pixel_bytes = (c * h * w * 4) as u64;

    let manifest_path = dir.join(MANIFEST_NAME);
    let mut manifest = BufWriter::new(File::create(&manifest_path).map_err(io_err(&manifest_path))?);
    writeln!(manifest, "{MANIFEST_HEADER}").map_err(io_err(&manifest_path))?;
    for (i, rec) in data.records().iter().enumerate() {
        let offset = HEADER_BYTES + i as u64 * pixel_bytes;
        writeln!(
            manifest,
            "{},{},{},{},{},{}",
            rec.patch_id, rec.group_id, rec.center_id, rec.stain, rec.lesion, offset
        )
        .map_err(io_err(&manifest_path))?;
    }
    manifest.flush().map_err(io_err(&manifest_path))?;

    let blob_path = dir.join(BLOB_NAME);
    let mut blob = BufWriter::new(File::create(&blob_path).map_err(io_err(&blob_path))?);
    blob.write_all(&BLOB_MAGIC).map_err(io_err(&blob_path))?;
    for dim in [data.len() as u32, c as u32, h as u32] {
        blob.write_all(&dim.to_le_bytes()).map_err(io_err(&blob_path))?;
    }
    for rec in data.records() {
        for &v in &rec.pixels {
            blob.write_all(&v.to_le_bytes()).map_err(io_err(&blob_path))?;
        }
    }
    blob.flush().map_err(io_err(&blob_path))?;
    Ok(())
}

struct ManifestRow {
    patch_id: u32,
    group_id: u32,
    center_id: u8,
    stain: u8,
    lesion: u8,
    offset: u64,
}

fn bad_manifest(path: &Path, detail: impl Into<String>) -> DatasetIoError {
    DatasetIoError::BadManifest {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, DatasetIoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == MANIFEST_HEADER => {}
        Some(h) => return Err(bad_manifest(path, format!("header `{h}` != `{MANIFEST_HEADER}`"))),
        None => return Err(bad_manifest(path, "is empty")),
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad_manifest(
                path,
                format!("row {}: expected 6 fields, got {}", lineno + 2, fields.len()),
            ));
        }
        let parse = |idx: usize| -> Result<u64, DatasetIoError> {
            fields[idx].trim().parse::<u64>().map_err(|e| {
                bad_manifest(path, format!("row {}: field {}: {e}", lineno + 2, idx + 1))
            })
        };
        let row = ManifestRow {
            patch_id: parse(0)? as u32,
            group_id: parse(1)? as u32,
            center_id: parse(2)? as u8,
            stain: parse(3)? as u8,
            lesion: parse(4)? as u8,
            offset: parse(5)?,
        };
        if row.stain >= 4 || row.lesion >= 2 {
            return Err(bad_manifest(
                path,
                format!("row {}: stain {} / lesion {} out of range", lineno + 2, row.stain, row.lesion),
            ));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Reads a dataset directory back into memory. Bad magic, a truncated blob,
/// and a manifest/blob patch-count mismatch each produce their own error.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetIoError> {
    let blob_path = dir.join(BLOB_NAME);
    let file_len = fs::metadata(&blob_path).map_err(io_err(&blob_path))?.len();
    if file_len < HEADER_BYTES {
        return Err(DatasetIoError::TruncatedBlob {
            path: blob_path,
            expected: HEADER_BYTES,
            found: file_len,
        });
    }
    let mut blob = BufReader::new(File::open(&blob_path).map_err(io_err(&blob_path))?);
    let mut magic = [0u8; 4];
    blob.read_exact(&mut magic).map_err(io_err(&blob_path))?;
    if magic != BLOB_MAGIC {
        return Err(DatasetIoError::BadMagic {
            path: blob_path,
            found: magic,
        });
    }
    let mut dims = [0u32; 3];
    for d in &mut dims {
        let mut buf = [0u8; 4];
        blob.read_exact(&mut buf).map_err(io_err(&blob_path))?;
        *d = u32::from_le_bytes(buf);
    }
    let [n, c, h] = dims;
    let per_patch = c as u64 * h as u64 * h as u64 * 4;
    let expected = HEADER_BYTES + n as u64 * per_patch;
    if file_len < expected {
        return Err(DatasetIoError::TruncatedBlob {
            path: blob_path,
            expected,
            found: file_len,
        });
    }
    if file_len > expected {
        return Err(DatasetIoError::TrailingBytes {
            path: blob_path,
            extra: file_len - expected,
        });
    }

    let manifest_path = dir.join(MANIFEST_NAME);
    let rows = read_manifest(&manifest_path)?;
    if rows.len() != n as usize {
        return Err(DatasetIoError::CountMismatch {
            manifest: rows.len(),
            blob: n as usize,
        });
    }

    let mut records = Vec::with_capacity(rows.len());
    let mut raw = vec![0u8; per_patch as usize];
    for (i, row) in rows.into_iter().enumerate() {
        let expected_offset = HEADER_BYTES + i as u64 * per_patch;
        if row.offset != expected_offset {
            return Err(bad_manifest(
                &manifest_path,
                format!("row {}: offset {} != blob layout {}", i + 2, row.offset, expected_offset),
            ));
        }
        blob.read_exact(&mut raw).map_err(io_err(&blob_path))?;
        let pixels: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push(PatchRecord {
            patch_id: row.patch_id,
            group_id: row.group_id,
            center_id: row.center_id,
            stain: row.stain,
            lesion: row.lesion,
            pixels,
        });
    }
    Ok(Dataset::new(records)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), DatasetIoError> {
    let mut out = serde_json::to_string_pretty(value).map_err(|e| DatasetIoError::BadJson {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    out.push('\n');
    fs::write(path, out).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DatasetIoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatasetIoError::BadJson {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn write_split(dir: &Path, plan: &SplitPlan) -> Result<(), DatasetIoError> {
    write_json(&dir.join(SPLIT_NAME), plan)
}

pub fn read_split(dir: &Path) -> Result<SplitPlan, DatasetIoError> {
    read_json(&dir.join(SPLIT_NAME))
}

pub fn split_exists(dir: &Path) -> bool {
    dir.join(SPLIT_NAME).is_file()
}

pub fn write_gen_spec(dir: &Path, spec: &GenSpec) -> Result<(), DatasetIoError> {
    write_json(&dir.join(GEN_NAME), spec)
}

pub fn read_gen_spec(dir: &Path) -> Result<GenSpec, DatasetIoError> {
    read_json(&dir.join(GEN_NAME))
}

pub fn gen_spec_exists(dir: &Path) -> bool {
    dir.join(GEN_NAME).is_file()
}
