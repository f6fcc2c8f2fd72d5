//! Single-file checkpoint archive.
//!
//! Layout: an 8-byte magic, a JSON metadata block (model kind, config echo,
//! seed, frozen flag, content digest), then each parameter as a name, a
//! `rows x cols` shape tag, and row-major little-endian `f32` data, in
//! sorted name order. The digest is SHA-256 over the concatenated
//! little-endian parameter bytes in that same order, so any corruption of
//! the tensor data is detected on load.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LTACKPT1";

/// Metadata block stored alongside the tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Model family ("backbone", "generator", "linear_generator").
    pub kind: String,
    /// Config of the saved model, echoed verbatim.
    pub config: serde_json::Value,
    pub seed: u64,
    pub frozen: bool,
    /// Hex SHA-256 over the parameter bytes.
    pub digest: String,
}

/// Hex SHA-256 over row-major little-endian `f32` bytes of the parameters
/// in sorted name order.
pub fn digest_hex(params: &BTreeMap<String, Array2<f32>>) -> String {
    let mut hasher = Sha256::new();
    for array in params.values() {
        for v in array.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    let out = hasher.finalize();
    let mut hex = String::with_capacity(out.len() * 2);
    for b in out {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

pub fn save(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    seed: u64,
    frozen: bool,
    params: &BTreeMap<String, Array2<f32>>,
) -> Result<CheckpointMeta> {
    let meta = CheckpointMeta {
        kind: kind.to_string(),
        config,
        seed,
        frozen,
        digest: digest_hex(params),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    out.write_all(&meta_bytes)?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, array) in params {
        let name_bytes = name.as_bytes();
        out.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        out.write_all(name_bytes)?;
        let (rows, cols) = array.dim();
        out.write_all(&(rows as u32).to_le_bytes())?;
        out.write_all(&(cols as u32).to_le_bytes())?;
        for v in array.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(meta)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Corrupt("archive truncated".to_string()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, Array2<f32>>)> {
    let mut file = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 8];
    read_exact(&mut file, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Corrupt("bad magic".to_string()));
    }

    let meta_len = read_u32(&mut file)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact(&mut file, &mut meta_bytes)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Corrupt(format!("bad metadata block: {e}")))?;

    let n_params = read_u32(&mut file)? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..n_params {
        let mut len_bytes = [0u8; 2];
        read_exact(&mut file, &mut len_bytes)?;
        let mut name_bytes = vec![0u8; u16::from_le_bytes(len_bytes) as usize];
        read_exact(&mut file, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Corrupt("parameter name is not utf-8".to_string()))?;
        let rows = read_u32(&mut file)? as usize;
        let cols = read_u32(&mut file)? as usize;
        let mut data = vec![0f32; rows * cols];
        for v in &mut data {
            let mut b = [0u8; 4];
            read_exact(&mut file, &mut b)?;
            *v = f32::from_le_bytes(b);
        }
        let array = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Corrupt(format!("bad shape tag: {e}")))?;
        if params.insert(name.clone(), array).is_some() {
            return Err(Error::Corrupt(format!("duplicate parameter {name:?}")));
        }
    }

    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(Error::Corrupt("trailing bytes after archive".to_string()));
    }
    let digest = digest_hex(&params);
    if digest != meta.digest {
        return Err(Error::Corrupt(format!(
            "digest mismatch: stored {}, computed {digest}",
            meta.digest
        )));
    }
    Ok((meta, params))
}
