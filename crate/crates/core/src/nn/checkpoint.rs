//! Parameter checkpoints: a JSON manifest of (name, shape, offset) entries
//! followed by a flat block of little-endian 32-bit floats.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::store::ParamStore;

const MAGIC: &[u8; 4] = b"TFCP";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data block, in f32 elements.
    offset: usize,
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut manifest = Vec::new();
    let mut data: Vec<f32> = Vec::with_capacity(store.n_scalars());
    for id in store.ids() {
        let value = store.get(id);
        manifest.push(ManifestEntry {
            name: store.name(id).to_string(),
            shape: value.shape().to_vec(),
            offset: data.len(),
        });
        data.extend(value.iter().map(|&v| v as f32));
    }
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&manifest_bytes)?;
    let mut raw = Vec::with_capacity(data.len() * 4);
    for v in &data {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&raw)?;
    Ok(())
}

/// Loads a checkpoint into an existing store: every entry must name a known
/// parameter with a matching shape, and every store parameter must be
/// present in the file.
pub fn load(store: &mut ParamStore, path: &Path) -> Result<()> {
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; 16];
    f.read_exact(&mut head)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &head[0..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let manifest_len = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    f.read_exact(&mut manifest_bytes)
        .map_err(|_| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Checkpoint(format!("manifest decode: {e}")))?;
    let mut raw = Vec::new();
    f.read_to_end(&mut raw)?;
    if raw.len() % 4 != 0 {
        return Err(Error::Checkpoint("data block not a multiple of 4 bytes".into()));
    }
    let floats: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut seen = 0usize;
    for entry in &manifest {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n;
        if end > floats.len() {
            return Err(Error::Checkpoint(format!(
                "{}: data block too short",
                entry.name
            )));
        }
        store.set_from(&entry.name, &entry.shape, &floats[entry.offset..end])?;
        seen += 1;
    }
    if seen != store.len() {
        return Err(Error::Checkpoint(format!(
            "file has {seen} parameters, model expects {}",
            store.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::store::trunc_normal;
    use rand::SeedableRng;

    #[test]
    fn round_trip_preserves_f32_values() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.add("w", trunc_normal(&[3, 4], 0.5, &mut rng));
        store.add("b", trunc_normal(&[7], 0.5, &mut rng));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save(&store, &path).unwrap();

        let mut other = ParamStore::new();
        other.add("w", crate::nn::store::zeros(&[3, 4]));
        other.add("b", crate::nn::store::zeros(&[7]));
        load(&mut other, &path).unwrap();
        for (a, b) in store.get2(store.by_name("w").unwrap()).iter().zip(
            other.get2(other.by_name("w").unwrap()).iter(),
        ) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        store.add("w", crate::nn::store::zeros(&[2, 2]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save(&store, &path).unwrap();
        let mut other = ParamStore::new();
        other.add("w", crate::nn::store::zeros(&[2, 3]));
        assert!(matches!(
            load(&mut other, &path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn missing_parameter_is_rejected() {
        let mut store = ParamStore::new();
        store.add("w", crate::nn::store::zeros(&[2]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save(&store, &path).unwrap();
        let mut other = ParamStore::new();
        other.add("w", crate::nn::store::zeros(&[2]));
        other.add("extra", crate::nn::store::zeros(&[2]));
        assert!(matches!(
            load(&mut other, &path),
            Err(Error::Checkpoint(_))
        ));
    }
}
