//! Deterministic checkpoint storage: a JSON manifest plus a flat f32-le
//! parameter file.
//!
//! Every trained stage serializes to the same container: a `kind` tag so a
//! checkpoint cannot be loaded as the wrong model, the training seed, the
//! stage configuration as JSON, named scalars (detector thresholds and the
//! like), and named tensors laid out contiguously in `params.bin`. Maps are
//! ordered, floats are written in a fixed order, and JSON is rendered with
//! stable key order, so retraining with the same inputs reproduces the files
//! byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::io;
use crate::nn::Mat;
use crate::{Error, Result};

const CHECKPOINT_FORMAT: &str = "avgzsl-checkpoint";

/// In-memory form of a saved model stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub scalars: BTreeMap<String, f64>,
    tensors: Vec<(String, Mat)>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Element (not byte) offset into params.bin.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    kind: String,
    dtype: String,
    seed: u64,
    config: serde_json::Value,
    scalars: BTreeMap<String, f64>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64, config: serde_json::Value) -> Checkpoint {
        Checkpoint {
            kind: kind.to_string(),
            seed,
            config,
            scalars: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push_tensor(&mut self, name: &str, m: Mat) {
        assert!(
            self.tensors.iter().all(|(n, _)| n != name),
            "duplicate tensor name {name}"
        );
        self.tensors.push((name.to_string(), m));
    }

    /// Convenience for appending a model's named parameter list under a
    /// prefix, e.g. prefix "gen" stores "gen.w0".
    pub fn push_named(&mut self, prefix: &str, named: &[(String, &Mat)]) {
        for (name, m) in named {
            self.push_tensor(&format!("{prefix}.{name}"), (*m).clone());
        }
    }

    pub fn set_scalar(&mut self, name: &str, v: f64) {
        self.scalars.insert(name.to_string(), v);
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.scalars
            .get(name)
            .copied()
            .ok_or_else(|| Error::CheckpointKind(format!("missing scalar {name:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::CheckpointKind(format!("missing tensor {name:?}")))
    }

    pub fn tensor_names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::CheckpointKind(format!(
                "checkpoint holds a {:?} model, expected {kind:?}",
                self.kind
            )))
        }
    }

    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::CheckpointKind(format!("config does not parse: {e}")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, m) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), rows: m.rows, cols: m.cols, offset });
            offset += m.len();
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            kind: self.kind.clone(),
            dtype: "f32-le".into(),
            seed: self.seed,
            config: self.config.clone(),
            scalars: self.scalars.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Manifest {
            path: dir.display().to_string(),
            reason: e.to_string(),
        })?;
        io::write_bytes(&dir.join("manifest.json"), &json)?;
        io::write_f32s(
            &dir.join("params.bin"),
            self.tensors.iter().flat_map(|(_, m)| m.data.iter().copied()),
        )
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let mpath = dir.join("manifest.json");
        let bytes = io::read_bytes(&mpath)?;
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes).map_err(|e| {
            Error::Manifest { path: mpath.display().to_string(), reason: e.to_string() }
        })?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Manifest {
                path: mpath.display().to_string(),
                reason: format!("unexpected format tag {:?}", manifest.format),
            });
        }
        if manifest.dtype != "f32-le" {
            return Err(Error::Manifest {
                path: mpath.display().to_string(),
                reason: format!("unsupported dtype {:?}", manifest.dtype),
            });
        }
        let total: usize = manifest.tensors.iter().map(|t| t.rows * t.cols).sum();
        let flat = io::read_f32s(&dir.join("params.bin"), total)?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            let len = entry.rows * entry.cols;
            if entry.offset + len > flat.len() {
                return Err(Error::Manifest {
                    path: mpath.display().to_string(),
                    reason: format!("tensor {:?} overruns params.bin", entry.name),
                });
            }
            let data = flat[entry.offset..entry.offset + len].to_vec();
            tensors.push((entry.name.clone(), Mat::from_vec(entry.rows, entry.cols, data)));
        }
        Ok(Checkpoint {
            kind: manifest.kind,
            seed: manifest.seed,
            config: manifest.config,
            scalars: manifest.scalars,
            tensors,
        })
    }
}

/// Loads tensors named `prefix.name` back into a parameter list in the order
/// given by `named`, converting f32 storage to f64 math exactly.
pub fn restore_named(ck: &Checkpoint, prefix: &str, named: &mut [(String, &mut Mat)]) -> Result<()> {
    for (name, target) in named.iter_mut() {
        let stored = ck.tensor(&format!("{prefix}.{name}"))?;
        if (stored.rows, stored.cols) != (target.rows, target.cols) {
            return Err(Error::Shape(format!(
                "tensor {prefix}.{name}: stored {}x{}, model expects {}x{}",
                stored.rows, stored.cols, target.rows, target.cols
            )));
        }
        target.data.copy_from_slice(&stored.data);
    }
    Ok(())
}

/// Restores an [`crate::nn::Mlp`]'s parameters from tensors stored under
/// `prefix`.
pub fn restore_mlp(ck: &Checkpoint, prefix: &str, mlp: &mut crate::nn::Mlp) -> Result<()> {
    let names: Vec<String> = mlp.named_params().iter().map(|(n, _)| n.clone()).collect();
    let mut slots: Vec<(String, &mut Mat)> = names.into_iter().zip(mlp.params_mut()).collect();
    restore_named(ck, prefix, &mut slots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample_checkpoint() -> Checkpoint {
        let mut ck = Checkpoint::new("test-stage", 99, json!({"lr": 0.001, "epochs": 5}));
        ck.set_scalar("threshold", 0.625);
        ck.push_tensor("w0", Mat::from_vec(2, 3, vec![1.0, -2.0, 3.5, 0.0, 0.25, -0.125]));
        ck.push_tensor("b0", Mat::from_vec(1, 2, vec![0.5, -0.5]));
        ck
    }

    #[test]
    fn save_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample_checkpoint();
        ck.save(dir.path()).unwrap();
        let loaded = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(ck, loaded);
        assert_eq!(loaded.scalar("threshold").unwrap(), 0.625);
        assert_eq!(loaded.tensor("w0").unwrap().rows, 2);
    }

    #[test]
    fn save_is_byte_stable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        sample_checkpoint().save(a.path()).unwrap();
        sample_checkpoint().save(b.path()).unwrap();
        for file in ["manifest.json", "params.bin"] {
            let ba = std::fs::read(a.path().join(file)).unwrap();
            let bb = std::fs::read(b.path().join(file)).unwrap();
            assert_eq!(ba, bb, "{file} differs between identical saves");
        }
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let ck = sample_checkpoint();
        assert!(ck.expect_kind("test-stage").is_ok());
        let err = ck.expect_kind("other-stage").unwrap_err();
        assert!(matches!(err, Error::CheckpointKind(_)));
    }

    #[test]
    fn missing_names_are_reported() {
        let ck = sample_checkpoint();
        assert!(ck.tensor("nope").is_err());
        assert!(ck.scalar("nope").is_err());
    }

    #[test]
    fn values_are_quantized_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::new("test-stage", 1, json!({}));
        let fine = 0.1f64 + 1e-12;
        ck.push_tensor("w", Mat::from_vec(1, 1, vec![fine]));
        ck.save(dir.path()).unwrap();
        let loaded = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(loaded.tensor("w").unwrap().data[0], fine as f32 as f64);
    }
}
