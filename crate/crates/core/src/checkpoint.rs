//! Parameter checkpoints: a small binary container holding every tensor
//! of a store as little-endian f32, indexed by a JSON manifest so a
//! loader can validate names and shapes before touching the data.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::TensorData;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"TOKSEG01";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    shape: Vec<usize>,
    /// Element offset into the data section.
    offset: u64,
}

fn manifest_of(store: &ParamStore<f32>) -> BTreeMap<String, ManifestEntry> {
    let mut manifest = BTreeMap::new();
    let mut offset = 0u64;
    for (name, tensor) in store.iter() {
        manifest.insert(
            name.to_string(),
            ManifestEntry { shape: tensor.shape().to_vec(), offset },
        );
        offset += tensor.numel() as u64;
    }
    manifest
}

pub fn save(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    let manifest = manifest_of(store);
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint { what: format!("manifest serialization: {e}") })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for (_, tensor) in store.iter() {
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint {
            what: format!("bad magic {magic:?}, not a checkpoint file"),
        });
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(Error::Checkpoint {
            what: format!("unsupported version {version}, this build reads {VERSION}"),
        });
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8)?;
    let manifest_len = u64::from_le_bytes(l8) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: BTreeMap<String, ManifestEntry> = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Checkpoint { what: format!("manifest parse: {e}") })?;

    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() % 4 != 0 {
        return Err(Error::Checkpoint {
            what: format!("data section of {} bytes is not f32-aligned", data.len()),
        });
    }
    let total_elems = (data.len() / 4) as u64;

    let mut store = ParamStore::new();
    for (name, entry) in &manifest {
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + numel as u64;
        if end > total_elems {
            return Err(Error::Checkpoint {
                what: format!("{name} runs past the data section ({end} > {total_elems})"),
            });
        }
        let start = entry.offset as usize * 4;
        let values: Vec<f32> = data[start..start + numel * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.insert(name, TensorData::new(entry.shape.clone(), values)?)?;
    }
    Ok(store)
}

/// Load a checkpoint that must describe exactly the parameters of
/// `template` (as built by fresh registration), name for name and shape
/// for shape.
pub fn load_matching(path: &Path, template: &ParamStore<f32>) -> Result<ParamStore<f32>> {
    let loaded = load(path)?;
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    for (name, tensor) in template.iter() {
        match loaded.get(name) {
            Ok(t) if t.shape() == tensor.shape() => {}
            Ok(t) => mismatched.push(format!(
                "{name}: checkpoint {:?} vs model {:?}",
                t.shape(),
                tensor.shape()
            )),
            Err(_) => missing.push(name.to_string()),
        }
    }
    let extra: Vec<String> = loaded
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| template.get(n).is_err())
        .collect();
    if !missing.is_empty() || !mismatched.is_empty() || !extra.is_empty() {
        return Err(Error::Checkpoint {
            what: format!(
                "parameter set mismatch; missing {missing:?}, shape conflicts {mismatched:?}, unexpected {extra:?}"
            ),
        });
    }
    Ok(loaded)
}
