//! Parameter checkpoints: a one-line JSON manifest of (name, shape, byte
//! offset) followed by a flat little-endian IEEE-754 f64 blob. Round-trips
//! are bit-exact, including NaN payloads and signed zeros.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    /// Byte offset of this tensor's data within the blob.
    offset: u64,
}

pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<(), NnError> {
    let mut manifest = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, t) in params.iter() {
        manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: [t.rows(), t.cols()],
            offset,
        });
        offset += 8 * t.len() as u64;
    }
    let header = serde_json::to_string(&manifest)
        .map_err(|e| NnError::MalformedCheckpoint(e.to_string()))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(header.as_bytes())?;
    w.write_all(b"\n")?;
    for t in params.tensors() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet, NnError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| NnError::MalformedCheckpoint("missing manifest line".into()))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| NnError::MalformedCheckpoint(format!("bad manifest: {e}")))?;
    let blob = &bytes[newline + 1..];

    let mut seen = HashSet::new();
    let mut params = ParamSet::new();
    for entry in manifest {
        if !seen.insert(entry.name.clone()) {
            return Err(NnError::MalformedCheckpoint(format!(
                "duplicate parameter {:?}",
                entry.name
            )));
        }
        let n = entry.shape[0] * entry.shape[1];
        let start = entry.offset as usize;
        let end = start + 8 * n;
        if end > blob.len() {
            return Err(NnError::MalformedCheckpoint(format!(
                "tensor {:?} extends past end of blob",
                entry.name
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(entry.name, Tensor::from_vec(entry.shape[0], entry.shape[1], data));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut p = ParamSet::new();
        p.push("w1", Tensor::from_vec(2, 3, vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300, -7.25, 0.1]));
        p.push("b1", Tensor::from_vec(1, 2, vec![f64::NAN, -1e-308]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &p).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert!(p.bits_eq(&q));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &p).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(NnError::MalformedCheckpoint(_))));
    }

    #[test]
    fn missing_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, [0u8; 16]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(NnError::MalformedCheckpoint(_))));
    }
}
