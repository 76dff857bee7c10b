//! Model checkpoints on top of the tensor archive.
//!
//! Metadata holds `kind = "checkpoint"`, the model configuration, and (for
//! resumable checkpoints) the stage, step, best validation value and Adam step
//! counts. Model tensors keep their parameter names; Adam moments are stored as
//! `adam.m.<param>` and `adam.v.<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::train::{Adam, AdamConfig, Stage, TrainState};

pub const CHECKPOINT_KIND: &str = "checkpoint";
const ADAM_PREFIX: &str = "adam.";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    stage: Stage,
    step: usize,
    best_validation: Option<f64>,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    adam_counts: Vec<(String, u64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    kind: String,
    model: ModelConfig,
    train_state: Option<StateMeta>,
    manifest_checksum: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub state: Option<TrainState>,
    /// Checksum of the manifest the model was trained on.
    pub manifest_checksum: Option<String>,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let state = self.state.as_ref().map(|s| {
            let (tensors, counts) = s.adam.export(&self.model.store);
            (
                StateMeta {
                    stage: s.stage,
                    step: s.step,
                    best_validation: s.best_validation,
                    adam_beta1: s.adam.config.beta1,
                    adam_beta2: s.adam.config.beta2,
                    adam_eps: s.adam.config.eps,
                    adam_counts: counts,
                },
                tensors,
            )
        });
        let (state_meta, adam_tensors) = match state {
            Some((m, t)) => (Some(m), t),
            None => (None, Vec::new()),
        };
        let meta = Meta {
            kind: CHECKPOINT_KIND.into(),
            model: self.model.config.clone(),
            train_state: state_meta,
            manifest_checksum: self.manifest_checksum.clone(),
        };
        let mut a = TensorArchive::new(serde_json::to_value(meta)?);
        for (_, p) in self.model.store.iter() {
            a.push(p.name.clone(), (*p.value).clone());
        }
        for (name, t) in adam_tensors {
            a.push(format!("{ADAM_PREFIX}{name}"), t);
        }
        Ok(a)
    }

    pub fn from_archive(a: TensorArchive) -> Result<Self> {
        let meta: Meta = serde_json::from_value(a.meta)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint metadata: {e}")))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a checkpoint, found {:?}", meta.kind)));
        }
        let (adam, params): (Vec<_>, Vec<_>) = a.tensors.into_iter().partition(|(n, _)| n.starts_with(ADAM_PREFIX));
        let model = Model::from_tensors(meta.model, &params)?;
        let state = match meta.train_state {
            Some(s) => {
                let tensors: Vec<_> = adam
                    .into_iter()
                    .map(|(n, t)| (n[ADAM_PREFIX.len()..].to_string(), t))
                    .collect();
                let cfg = AdamConfig {
                    beta1: s.adam_beta1,
                    beta2: s.adam_beta2,
                    eps: s.adam_eps,
                };
                Some(TrainState {
                    stage: s.stage,
                    step: s.step,
                    adam: Adam::import(cfg, &model.store, &tensors, &s.adam_counts)?,
                    best_validation: s.best_validation,
                })
            }
            None if !adam.is_empty() => return Err(Error::Checkpoint("optimizer tensors without a training state".into())),
            None => None,
        };
        Ok(Self {
            model,
            state,
            manifest_checksum: meta.manifest_checksum,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(TensorArchive::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TrainConfig;

    #[test]
    fn round_trip_with_optimizer_state() {
        let model = Model::new(ModelConfig::new(6, 2).desk(), 3).unwrap();
        let cfg = TrainConfig::default();
        let mut state = TrainState::new(Stage::Joint, &model, &cfg);
        let mut m2 = model.clone();
        let grads: Vec<_> = m2.store.iter().take(5).map(|(id, p)| (id, p.value.map(|v| v + 0.5))).collect();
        state.adam.step(&mut m2.store, &grads, 1e-3);
        state.step = 7;
        state.best_validation = Some(0.25);
        let ck = Checkpoint {
            model: m2.clone(),
            state: Some(state.clone()),
            manifest_checksum: Some("abc".into()),
        };
        let back = Checkpoint::from_archive(TensorArchive::from_bytes(&ck.to_archive().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.model.store.hash_prefix(""), m2.store.hash_prefix(""));
        assert_eq!(back.model.config, m2.config);
        assert_eq!(back.state.unwrap(), state);
        assert_eq!(back.manifest_checksum.as_deref(), Some("abc"));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let a = TensorArchive::new(serde_json::json!({"kind": "features"}));
        assert!(matches!(Checkpoint::from_archive(a), Err(Error::Checkpoint(_))));
    }
}
