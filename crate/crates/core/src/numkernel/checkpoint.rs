//! Parameter checkpoints: a flat little-endian `f64` blob (`<stem>.bin`) plus
//! a JSON manifest (`<stem>.json`) locating every named matrix in the blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::optim::{OptimConfig, OptimCounters, Optimizer};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub blob: String,
    pub byte_len: u64,
    pub params: Vec<ManifestEntry>,
}

pub fn blob_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.bin"))
}

pub fn manifest_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.json"))
}

/// Serializes a store into blob bytes and its manifest.
pub fn encode_store(store: &ParamStore, blob_name: &str) -> (Vec<u8>, Manifest) {
    let mut bytes = Vec::with_capacity(store.scalar_count() * 8);
    let mut params = Vec::with_capacity(store.len());
    for (_, name, m) in store.iter() {
        params.push(ManifestEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            byte_offset: bytes.len() as u64,
        });
        for v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        blob: blob_name.to_string(),
        byte_len: bytes.len() as u64,
        params,
    };
    (bytes, manifest)
}

pub fn decode_store(bytes: &[u8], manifest: &Manifest) -> Result<ParamStore> {
    if bytes.len() as u64 != manifest.byte_len {
        return Err(Error::Data(format!(
            "blob holds {} bytes, manifest expects {}",
            bytes.len(),
            manifest.byte_len
        )));
    }
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let start = e.byte_offset as usize;
        let len = e.rows * e.cols * 8;
        let chunk = bytes.get(start..start + len).ok_or_else(|| {
            Error::Data(format!("parameter `{}` extends past the blob", e.name))
        })?;
        let data = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(e.name.clone(), Matrix::from_vec(e.rows, e.cols, data)?)?;
    }
    Ok(store)
}

pub fn save_store(store: &ParamStore, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let blob_name = format!("{stem}.bin");
    let (bytes, manifest) = encode_store(store, &blob_name);
    fs::write(blob_path(dir, stem), bytes)?;
    fs::write(
        manifest_path(dir, stem),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

pub fn load_store(dir: &Path, stem: &str) -> Result<ParamStore> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path(dir, stem))?)?;
    let bytes = fs::read(dir.join(&manifest.blob))?;
    decode_store(&bytes, &manifest)
}

/// Writes Adam moments as `<stem>.m` / `<stem>.v` stores plus
/// `<stem>.counters.json`.
pub fn save_optimizer(opt: &Optimizer, params: &ParamStore, dir: &Path, stem: &str) -> Result<()> {
    let (m, v, counters) = opt.export(params)?;
    save_store(&m, dir, &format!("{stem}.m"))?;
    save_store(&v, dir, &format!("{stem}.v"))?;
    fs::write(
        dir.join(format!("{stem}.counters.json")),
        serde_json::to_string(&counters)? + "\n",
    )?;
    Ok(())
}

pub fn load_optimizer(config: OptimConfig, params: &ParamStore, dir: &Path, stem: &str) -> Result<Optimizer> {
    let m = load_store(dir, &format!("{stem}.m"))?;
    let v = load_store(dir, &format!("{stem}.v"))?;
    let counters: OptimCounters =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.counters.json")))?)?;
    Optimizer::import(config, params, &m, &v, &counters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::SeededRng;

    #[test]
    fn round_trip_preserves_bits() {
        let mut rng = SeededRng::new(1);
        let mut s = ParamStore::new();
        s.insert_uniform("cell.w_x", 3, 4, &mut rng).unwrap();
        s.insert_uniform("embed", 5, 3, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_store(&s, dir.path(), "bank").unwrap();
        let back = load_store(dir.path(), "bank").unwrap();
        assert_eq!(back, s);
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(manifest_path(dir.path(), "bank")).unwrap())
                .unwrap();
        assert_eq!(manifest.params[1].byte_offset, 3 * 4 * 8);
        assert_eq!(fs::read(blob_path(dir.path(), "bank")).unwrap().len(), (12 + 15) * 8);
    }

    #[test]
    fn truncated_blob_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Matrix::zeros(2, 2)).unwrap();
        let (bytes, manifest) = encode_store(&s, "x.bin");
        assert!(decode_store(&bytes[..16], &manifest).is_err());
    }
}
