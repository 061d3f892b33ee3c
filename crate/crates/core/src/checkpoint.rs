//! JSON checkpoint: model configuration, vocabulary, label space and every
//! named parameter tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabelSpace, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Darer, ModelConfig};
use crate::tensor::Tensor;

pub const FORMAT: &str = "darer-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub labels: LabelSpace,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Darer, vocab: &Vocabulary, labels: &LabelSpace) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config.clone(),
            vocab: vocab.clone(),
            labels: labels.clone(),
            params: model
                .store
                .iter()
                .map(|(_, name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn to_model(&self) -> Result<Darer> {
        let emb = Tensor::zeros(&[self.vocab.len(), self.config.d_word]);
        let mut model = Darer::new(self.config.clone(), emb, 0)?;
        if self.params.len() != model.store.len() {
            return Err(Error::CheckpointMismatch {
                key: "params".into(),
                checkpoint: format!("{} tensors", self.params.len()),
                config: format!("{} tensors", model.store.len()),
            });
        }
        for p in &self.params {
            if model.store.id(&p.name).is_none() {
                return Err(Error::CheckpointMismatch {
                    key: p.name.clone(),
                    checkpoint: "present".into(),
                    config: "absent".into(),
                });
            }
            model.store.load(&p.name, Tensor::new(p.shape.clone(), p.values.clone())?)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::CheckpointMismatch {
                key: "format".into(),
                checkpoint: format!("{} v{}", ck.format, ck.version),
                config: format!("{FORMAT} v{VERSION}"),
            });
        }
        Ok(ck)
    }

    /// Fails on the first model-config key whose value differs from `other`.
    pub fn check_config(&self, other: &ModelConfig) -> Result<()> {
        let a = serde_json::to_value(&self.config)?;
        let b = serde_json::to_value(other)?;
        let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
            unreachable!("config serializes to an object");
        };
        for (key, va) in a {
            let vb = &b[key];
            if va != vb {
                return Err(Error::CheckpointMismatch {
                    key: key.clone(),
                    checkpoint: va.to_string(),
                    config: vb.to_string(),
                });
            }
        }
        Ok(())
    }
}
