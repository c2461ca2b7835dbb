//! Single-file parameter archive: a magic tag, a JSON header describing the
//! model and the tensor layout, then raw little-endian f64 data. The header
//! carries an arbitrary JSON `meta` blob (model kind, config, preprocessing
//! constants) so a checkpoint is self-describing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::NnError;

const MAGIC: &[u8; 8] = b"MKCKPT01";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn save(
    path: &Path,
    meta: &serde_json::Value,
    state: &[(String, ArrayD<f64>)],
) -> Result<(), NnError> {
    let header = Header {
        format_version: 1,
        meta: meta.clone(),
        entries: state
            .iter()
            .map(|(name, t)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| NnError::Checkpoint(format!("header encode: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, tensor) in state {
        // Standard (row-major) order; tensors we store are always contiguous.
        for &v in tensor.as_standard_layout().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(serde_json::Value, Vec<(String, ArrayD<f64>)>), NnError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| NnError::Checkpoint(format!("header decode: {e}")))?;
    if header.format_version != 1 {
        return Err(NnError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let mut state = Vec::with_capacity(header.entries.len());
    for entry in header.entries {
        let n: usize = entry.shape.iter().product();
        let mut data = vec![0f64; n];
        for v in data.iter_mut() {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let tensor = ArrayD::from_shape_vec(ndarray::IxDyn(&entry.shape), data)
            .map_err(|e| NnError::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
        state.push((entry.name, tensor));
    }
    Ok((header.meta, state))
}

/// Read only the meta header of a checkpoint.
pub fn load_meta(path: &Path) -> Result<serde_json::Value, NnError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| NnError::Checkpoint(format!("header decode: {e}")))?;
    Ok(header.meta)
}
