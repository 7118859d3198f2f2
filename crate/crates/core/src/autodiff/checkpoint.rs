//! Parameter checkpoints: `<stem>.bin` holds little-endian `f64` values
//! followed by the masks of every parameter in store order; `<stem>.json`
//! indexes names, shapes and offsets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::param::{MaskedParam, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MTSPCKPT";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Element offset (not bytes) of the values within the payload.
    pub value_offset: usize,
    pub mask_offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointIndex {
    pub version: u32,
    pub endianness: String,
    pub dtype: String,
    pub entries: Vec<CheckpointEntry>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

pub fn save(store: &ParamStore, stem: &Path) -> Result<()> {
    let (bin_path, json_path) = paths(stem);
    let mut payload: Vec<f64> = Vec::new();
    let mut entries = Vec::with_capacity(store.len());
    for id in store.ids() {
        let p = store.get(id);
        let value_offset = payload.len();
        payload.extend_from_slice(p.value().data());
        let mask_offset = payload.len();
        payload.extend_from_slice(p.mask().data());
        entries.push(CheckpointEntry {
            name: store.info(id).name.clone(),
            shape: p.shape().to_vec(),
            trainable: p.trainable(),
            value_offset,
            mask_offset,
        });
    }
    let mut bytes = Vec::with_capacity(16 + payload.len() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    for v in &payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
    let index = CheckpointIndex {
        version: CHECKPOINT_VERSION,
        endianness: "little".into(),
        dtype: "f64".into(),
        entries,
    };
    let json = serde_json::to_string_pretty(&index)?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

/// Load values and masks into a store with the same parameter names and shapes.
pub fn load_into(store: &mut ParamStore, stem: &Path) -> Result<()> {
    let (bin_path, json_path) = paths(stem);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let index: CheckpointIndex = serde_json::from_str(&text)?;
    if index.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {}", index.version)));
    }
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Data("checkpoint payload has a bad header".into()));
    }
    let count = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 16 + count * 8 {
        return Err(Error::Data("checkpoint payload length mismatch".into()));
    }
    let payload: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    for entry in &index.entries {
        let id = store
            .find(&entry.name)
            .ok_or_else(|| Error::Data(format!("checkpoint parameter `{}` not in network", entry.name)))?;
        if store.get(id).shape() != entry.shape.as_slice() {
            return Err(Error::Data(format!("shape mismatch for `{}`", entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        let slice = |off: usize| {
            payload
                .get(off..off + n)
                .map(|s| s.to_vec())
                .ok_or_else(|| Error::Data(format!("offset out of range for `{}`", entry.name)))
        };
        let value = Tensor::new(entry.shape.clone(), slice(entry.value_offset)?)?;
        let mask = Tensor::new(entry.shape.clone(), slice(entry.mask_offset)?)?;
        let mut p = MaskedParam::new(value, mask)?;
        p.set_trainable(entry.trainable);
        *store.get_mut(id) = p;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::param::ParamKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_preserves_values_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.init("a.w", ParamKind::DenseWeight, vec![3, 4], 3, &mut rng);
        store.init("a.b", ParamKind::Bias, vec![4], 3, &mut rng);
        let mut mask = vec![1.0; 12];
        mask[5] = 0.0;
        store.get_mut(w).set_mask(Tensor::new(vec![3, 4], mask).unwrap()).unwrap();

        let stem = dir.path().join("ckpt");
        save(&store, &stem).unwrap();

        let mut other = ParamStore::new();
        other.init("a.w", ParamKind::DenseWeight, vec![3, 4], 3, &mut rng);
        other.init("a.b", ParamKind::Bias, vec![4], 3, &mut rng);
        load_into(&mut other, &stem).unwrap();
        for id in store.ids() {
            assert_eq!(store.get(id), other.get(id));
        }
    }
}
