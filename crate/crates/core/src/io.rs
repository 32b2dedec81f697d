//! Small file helpers shared by every artifact writer.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Raw little-endian `f32` values.
pub fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = read_bytes(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Serialization(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn write_bincode<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &bincode::serialize(value)?)
}

pub fn read_bincode<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(bincode::deserialize(&read_bytes(path)?)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// A child seed for `key`, stable across runs and platforms.
pub fn derive_seed(root: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

/// Formats a float for CSV output with a fixed number of decimals.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.bin");
        let v = vec![0.0f32, -1.5, f32::MAX, 3.25e-7];
        write_f32(&p, &v).unwrap();
        assert_eq!(read_f32(&p).unwrap(), v);
        fs::write(&p, [1u8, 2, 3]).unwrap();
        assert!(matches!(read_f32(&p), Err(Error::Serialization(_))));
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
