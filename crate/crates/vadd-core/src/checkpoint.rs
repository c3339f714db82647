//! Checkpoint serialization: a single JSON document holding run metadata and
//! every parameter tensor by name. Parameter order is the store's sorted
//! order and floats print in shortest round-trip form, so saving the same
//! store twice produces byte-identical files.
//!
//! Optimizer moments are deliberately not persisted; a resumed run restarts
//! Adam's moment estimates while continuing the step count and schedules.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VaddError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Hash of the resolved config that produced the parameters.
    pub config_hash: String,
    /// Optimizer steps completed.
    pub step_count: u64,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    meta: CheckpointMeta,
    params: BTreeMap<String, ParamEntry>,
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, config_hash: &str) -> Result<()> {
    let mut params = BTreeMap::new();
    for (name, tensor) in store.iter() {
        params.insert(
            name.to_string(),
            ParamEntry { shape: [tensor.rows(), tensor.cols()], values: tensor.values().to_vec() },
        );
    }
    let file = CheckpointFile {
        meta: CheckpointMeta { config_hash: config_hash.to_string(), step_count: store.step_count },
        params,
    };
    let json = serde_json::to_string(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| {
        VaddError::Usage(format!("checkpoint {} is not valid: {e}", path.display()))
    })?;
    if file.params.is_empty() {
        return Err(VaddError::Usage(format!(
            "checkpoint {} holds no parameters",
            path.display()
        )));
    }
    let mut store = ParamStore::new();
    for (name, entry) in file.params {
        let [rows, cols] = entry.shape;
        if rows * cols != entry.values.len() {
            return Err(VaddError::Usage(format!(
                "parameter {name:?} claims shape {rows}x{cols} but holds {} values",
                entry.values.len()
            )));
        }
        if entry.values.iter().any(|x| !x.is_finite()) {
            return Err(VaddError::NonFinite(format!(
                "parameter {name:?} holds non-finite values"
            )));
        }
        store.insert(&name, Tensor::from_vec(rows, cols, entry.values));
    }
    store.step_count = file.meta.step_count;
    Ok((store, file.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{infer_dims, Denoiser, ModelDims, Recognizer};
    use crate::rng::{Rng, STREAM_INIT};

    fn small_store() -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5, STREAM_INIT);
        let dims = ModelDims { v: 7, n_positions: 2, d_latent: 3, width: 6 };
        Denoiser { dims: dims.clone(), has_latent: true }.init(&mut store, &mut rng);
        Recognizer { dims }.init(&mut store, &mut rng);
        store.step_count = 42;
        store
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let store = small_store();
        save_checkpoint(&path, &store, "abc123").unwrap();
        let (loaded, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta.config_hash, "abc123");
        assert_eq!(meta.step_count, 42);
        assert_eq!(loaded.step_count, 42);
        assert_eq!(loaded.n_scalars(), store.n_scalars());
        for (name, tensor) in store.iter() {
            let other = loaded.get(name);
            assert_eq!(other.shape(), tensor.shape());
            assert_eq!(other.values(), tensor.values());
        }
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        let store = small_store();
        save_checkpoint(&a, &store, "h").unwrap();
        save_checkpoint(&b, &store, "h").unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        // Save-load-save is also stable.
        let (loaded, meta) = load_checkpoint(&a).unwrap();
        let c = dir.path().join("c.json");
        save_checkpoint(&c, &loaded, &meta.config_hash).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    }

    #[test]
    fn model_shapes_survive_the_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &small_store(), "h").unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        let (dims, has_latent, has_recognizer) = infer_dims(&loaded);
        assert_eq!((dims.v, dims.n_positions, dims.d_latent, dims.width), (7, 2, 3, 6));
        assert!(has_latent);
        assert!(has_recognizer);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        std::fs::write(&path, "{oops").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(VaddError::Usage(_))));
        std::fs::write(
            &path,
            r#"{"meta":{"config_hash":"h","step_count":0},"params":{}}"#,
        )
        .unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::write(
            &path,
            r#"{"meta":{"config_hash":"h","step_count":0},
                "params":{"a":{"shape":[2,2],"values":[1.0,2.0,3.0]}}}"#,
        )
        .unwrap();
        assert!(matches!(load_checkpoint(&path), Err(VaddError::Usage(_))));
        std::fs::write(
            &path,
            r#"{"meta":{"config_hash":"h","step_count":0},
                "params":{"a":{"shape":[1,2],"values":[1.0,null]}}}"#,
        )
        .unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
