//! Checkpoint container: one file holding named 32-bit float arrays behind a
//! JSON manifest (architecture fingerprint, config echo, epoch, metric
//! snapshot). Loading verifies the fingerprint and refuses mismatched
//! architectures.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"HSDCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub kind: ArrayKind,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayKind {
    Param,
    Buffer,
    Momentum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub fingerprint: String,
    pub config: serde_json::Value,
    pub epoch: u64,
    pub iteration: u64,
    pub metrics: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub arrays: Vec<ArrayD<f32>>,
}

/// Writes params, buffers and (optionally) optimizer momenta.
pub fn save(
    store: &ParamStore<f32>,
    path: &Path,
    config: serde_json::Value,
    epoch: u64,
    iteration: u64,
    metrics: serde_json::Value,
    include_momentum: bool,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<&ArrayD<f32>> = Vec::new();
    for (id, name, value) in store.iter_params() {
        entries.push(ArrayEntry {
            name: name.to_string(),
            kind: ArrayKind::Param,
            shape: value.shape().to_vec(),
        });
        payload.push(value);
        if include_momentum {
            entries.push(ArrayEntry {
                name: name.to_string(),
                kind: ArrayKind::Momentum,
                shape: value.shape().to_vec(),
            });
            payload.push(store.momentum(id));
        }
    }
    for (_, name, value) in store.iter_buffers() {
        entries.push(ArrayEntry {
            name: name.to_string(),
            kind: ArrayKind::Buffer,
            shape: value.shape().to_vec(),
        });
        payload.push(value);
    }
    let manifest = Manifest {
        schema_version: 1,
        fingerprint: store.architecture_fingerprint(),
        config,
        epoch,
        iteration,
        metrics,
        arrays: entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(manifest_bytes.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&manifest_bytes).map_err(io)?;
    for arr in payload {
        for &v in arr.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let mut manifest_bytes = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut manifest_bytes).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;

    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for entry in &manifest.arrays {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        arrays.push(
            ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::Checkpoint(format!("array {}: {e}", entry.name)))?,
        );
    }
    Ok(Checkpoint { manifest, arrays })
}

/// Copies checkpoint values into `store` after verifying the architecture
/// fingerprint. Momenta are restored when present.
pub fn apply(ckpt: &Checkpoint, store: &mut ParamStore<f32>) -> Result<()> {
    let expected = store.architecture_fingerprint();
    if ckpt.manifest.fingerprint != expected {
        return Err(Error::FingerprintMismatch {
            expected,
            found: ckpt.manifest.fingerprint.clone(),
        });
    }
    for (entry, arr) in ckpt.manifest.arrays.iter().zip(ckpt.arrays.iter()) {
        match entry.kind {
            ArrayKind::Param => {
                let id = store.param_by_name(&entry.name).ok_or_else(|| {
                    Error::Checkpoint(format!("unknown param `{}`", entry.name))
                })?;
                store.value_mut(id).assign(arr);
            }
            ArrayKind::Momentum => {
                let id = store.param_by_name(&entry.name).ok_or_else(|| {
                    Error::Checkpoint(format!("unknown param `{}`", entry.name))
                })?;
                store.momentum_mut(id).assign(arr);
            }
            ArrayKind::Buffer => {
                let id = store.buffer_by_name(&entry.name).ok_or_else(|| {
                    Error::Checkpoint(format!("unknown buffer `{}`", entry.name))
                })?;
                store.buffer_mut(id).assign(arr);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_nn::{build_conv, ConvSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build_store(seed: u64) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ConvSpec {
            normalization: crate::core_nn::Normalization::BatchNorm,
            ..ConvSpec::plain(4, 8, 3, 1)
        };
        build_conv(spec, &mut store, "conv", &mut rng).unwrap();
        store
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = build_store(1);
        save(
            &store,
            &path,
            serde_json::json!({"side": "teacher"}),
            3,
            225,
            serde_json::json!({"cdr": 0.93}),
            true,
        )
        .unwrap();

        let ckpt = load(&path).unwrap();
        assert_eq!(ckpt.manifest.epoch, 3);
        assert_eq!(ckpt.manifest.schema_version, 1);
        assert_eq!(ckpt.manifest.config["side"], "teacher");

        let mut fresh = build_store(99); // different init, same architecture
        apply(&ckpt, &mut fresh).unwrap();
        assert_eq!(fresh.weights_hash(), store.weights_hash());
    }

    #[test]
    fn fingerprint_mismatch_fails_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = build_store(1);
        save(&store, &path, serde_json::Value::Null, 0, 0, serde_json::Value::Null, false)
            .unwrap();
        let ckpt = load(&path).unwrap();

        let mut other = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        build_conv(ConvSpec::plain(4, 4, 3, 1), &mut other, "conv", &mut rng).unwrap();
        let err = apply(&ckpt, &mut other).unwrap_err();
        assert!(matches!(err, Error::FingerprintMismatch { .. }), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(load(&path).is_err());
    }
}
