//! Model checkpoints: a [`TensorArchive`] holding every parameter as
//! `param/<name>`, the Adam moments as `adam_m/<name>` and `adam_v/<name>`,
//! and a JSON `meta` document (format tag, full training config and its
//! sha256, epoch, optimizer step count, data shape and RNG stream state).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{NamedArray, TensorArchive};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::tensorize::TensorCohort;
use crate::train::{StreamState, TrainConfig, TrainOutcome};

pub const CHECKPOINT_FORMAT: &str = "stratimpute-checkpoint/1";

/// Data shape a checkpoint was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataShape {
    pub features: usize,
    pub horizon: usize,
    pub static_width: usize,
}

impl DataShape {
    pub fn of(cohort: &TensorCohort) -> Self {
        Self {
            features: cohort.n_features(),
            horizon: cohort.horizon,
            static_width: cohort.static_width(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    config_hash: String,
    config: TrainConfig,
    epoch: usize,
    epochs_run: usize,
    seed: u64,
    shape: DataShape,
    adam: AdamMeta,
    streams: StreamState,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adam,
    /// Epoch whose parameters are stored.
    pub epoch: usize,
    pub epochs_run: usize,
    pub shape: DataShape,
    pub streams: StreamState,
}

/// Hex sha256 of the config's canonical JSON.
pub fn config_hash(config: &TrainConfig) -> Result<String> {
    let json = serde_json::to_string(config)?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl Checkpoint {
    pub fn from_outcome(
        outcome: TrainOutcome,
        config: &TrainConfig,
        cohort: &TensorCohort,
    ) -> Self {
        Self {
            config: config.clone(),
            model: outcome.model,
            optimizer: outcome.optimizer,
            epoch: outcome.best_epoch,
            epochs_run: outcome.epochs_run,
            shape: DataShape::of(cohort),
            streams: outcome.streams,
        }
    }

    /// Errors naming the first of N, T, g that differs from the cohort.
    pub fn check_compatible(&self, cohort: &TensorCohort) -> Result<()> {
        let data = DataShape::of(cohort);
        let pairs = [
            ("feature count N", self.shape.features, data.features),
            ("horizon T", self.shape.horizon, data.horizon),
            ("static width g", self.shape.static_width, data.static_width),
        ];
        for (what, ours, theirs) in pairs {
            if ours != theirs {
                return Err(Error::Shape(format!(
                    "checkpoint was trained with {what} = {ours}, data has {theirs}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut archive = TensorArchive::default();
        for (id, name, value) in self.model.store.iter() {
            archive
                .arrays
                .insert(format!("param/{name}"), NamedArray::from_array2(value));
            archive.arrays.insert(
                format!("adam_m/{name}"),
                NamedArray::from_array2(&self.optimizer.m[id.0]),
            );
            archive.arrays.insert(
                format!("adam_v/{name}"),
                NamedArray::from_array2(&self.optimizer.v[id.0]),
            );
        }
        let meta = Meta {
            format: CHECKPOINT_FORMAT.to_string(),
            config_hash: config_hash(&self.config)?,
            config: self.config.clone(),
            epoch: self.epoch,
            epochs_run: self.epochs_run,
            seed: self.config.seed,
            shape: self.shape,
            adam: AdamMeta {
                lr: self.optimizer.lr,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
                t: self.optimizer.t,
            },
            streams: self.streams.clone(),
        };
        archive.meta = serde_json::to_string_pretty(&meta)?;
        Ok(archive)
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&archive.meta)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Archive(format!(
                "not a checkpoint (format {:?})",
                meta.format
            )));
        }
        if config_hash(&meta.config)? != meta.config_hash {
            return Err(Error::Archive(
                "config hash does not match the stored config".into(),
            ));
        }
        let mut model = Model::new(
            meta.config.model.clone(),
            meta.shape.features,
            meta.shape.static_width,
            meta.config.seed,
        )?;
        let mut optimizer = Adam::new(&model.store, meta.adam.lr);
        optimizer.beta1 = meta.adam.beta1;
        optimizer.beta2 = meta.adam.beta2;
        optimizer.eps = meta.adam.eps;
        optimizer.t = meta.adam.t;
        let expected = 3 * model.store.len();
        if archive.arrays.len() != expected {
            return Err(Error::Archive(format!(
                "checkpoint holds {} arrays, the configured model needs {expected}",
                archive.arrays.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let shape = model.store.get(id).dim();
            let load = |prefix: &str| -> Result<ndarray::Array2<f64>> {
                let a = archive.get(&format!("{prefix}/{name}"))?.to_array2()?;
                if a.dim() != shape {
                    return Err(Error::Archive(format!(
                        "{prefix}/{name} has shape {:?}, expected {shape:?}",
                        a.dim()
                    )));
                }
                Ok(a)
            };
            *model.store.get_mut(id) = load("param")?;
            optimizer.m[id.0] = load("adam_m")?;
            optimizer.v[id.0] = load("adam_v")?;
        }
        Ok(Self {
            config: meta.config,
            model,
            optimizer,
            epoch: meta.epoch,
            epochs_run: meta.epochs_run,
            shape: meta.shape,
            streams: meta.streams,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_archive()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_archive(&TensorArchive::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{synthesize, SynthConfig};
    use crate::train::{prepare, train};

    fn small_run() -> (TensorCohort, Checkpoint) {
        let cohort = synthesize(&SynthConfig {
            n_patients: 40,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
        .tensorize(3)
        .unwrap();
        let mut cfg = TrainConfig {
            batch_size: 16,
            epochs: 2,
            ..Default::default()
        };
        cfg.model.task = crate::model::Task::Prediction;
        let data = prepare(&cohort, &cfg).unwrap();
        let out = train(&cohort, &data, &cfg).unwrap();
        let ckpt = Checkpoint::from_outcome(out, &cfg, &cohort);
        (cohort, ckpt)
    }

    #[test]
    fn save_load_save_is_bit_exact() {
        let (cohort, ckpt) = small_run();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.model.store, ckpt.model.store);
        assert_eq!(back.optimizer, ckpt.optimizer);
        back.check_compatible(&cohort).unwrap();
    }

    #[test]
    fn shape_mismatch_names_the_dimension() {
        let (_, mut ckpt) = small_run();
        let cohort = synthesize(&SynthConfig {
            n_patients: 10,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
        .tensorize(3)
        .unwrap();
        ckpt.shape.horizon += 1;
        let err = ckpt.check_compatible(&cohort).unwrap_err().to_string();
        assert!(err.contains("horizon T"), "{err}");
    }

    #[test]
    fn tampered_config_is_rejected() {
        let (_, ckpt) = small_run();
        let mut archive = ckpt.to_archive().unwrap();
        archive.meta = archive.meta.replacen("\"epochs\": 2", "\"epochs\": 3", 1);
        assert!(Checkpoint::from_archive(&archive).is_err());
    }
}
