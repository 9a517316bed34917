//! From-scratch differentiable models in `f64`: the image-to-term model and
//! the term-to-story model, their training loop and gradient checking.

pub mod encoding;
pub mod gradcheck;
pub mod layers;
pub mod matrix;
pub mod params;
pub mod story_model;
pub mod tape;
pub mod term_model;
pub mod train;
pub mod vocab;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use params::ParamStore;

pub use encoding::ldpe;
pub use gradcheck::{grad_check, GradCheckReport, LinearSoftmax};
pub use matrix::Matrix;
pub use story_model::{StoryExample, StoryModel};
pub use term_model::{TermExample, TermModel};
pub use train::{fit, mean_loss, TrainConfig, Trainable};
pub use vocab::Vocab;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Width of the object feature vectors.
    pub d_in: usize,
    /// Objects kept per image, by confidence.
    pub top_k: usize,
    pub ff_dim: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 2,
            layers: 4,
            d_in: 32,
            top_k: 8,
            ff_dim: 128,
            learning_rate: 1e-3,
            warmup_steps: 100,
            seed: 7,
            max_len: 128,
        }
    }
}

impl ModelConfig {
    /// Sizes used for the full-scale models: hidden 512, 2 heads, 4 layers,
    /// 2048-wide detector features, 25 objects per image.
    pub fn full_scale() -> Self {
        ModelConfig {
            d_model: 512,
            heads: 2,
            layers: 4,
            d_in: 2048,
            top_k: 25,
            ff_dim: 2048,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("d_in", self.d_in),
            ("top_k", self.top_k),
            ("ff_dim", self.ff_dim),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model.d_model ({}) must be divisible by model.heads ({})",
                self.d_model, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::config("model.d_model must be even for sinusoidal encodings"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("model.learning_rate must be positive"));
        }
        Ok(())
    }
}

/// One detected object: its feature vector, detector confidence and the
/// 1-based order of the image it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectFeature {
    pub vector: Vec<f64>,
    pub confidence: f64,
    pub order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub confidence: f64,
    pub feature: Vec<f64>,
}

/// One line of an object-feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub order: usize,
    pub objects: Vec<ObjectRecord>,
    /// Groups images into stories; optional in the file format.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub story_id: Option<String>,
}

impl ImageRecord {
    /// The `top_k` most confident objects, most confident first. Ties keep
    /// file order.
    pub fn top_objects(&self, top_k: usize) -> Result<Vec<ObjectFeature>> {
        if !(1..=5).contains(&self.order) {
            return Err(Error::data(format!(
                "image {:?} has order {} outside 1..=5",
                self.image_id, self.order
            )));
        }
        let mut objs: Vec<&ObjectRecord> = self.objects.iter().collect();
        if let Some(bad) = objs
            .iter()
            .find(|o| !o.confidence.is_finite() || !(0.0..=1.0).contains(&o.confidence))
        {
            return Err(Error::data(format!(
                "image {:?} has confidence {} outside [0, 1]",
                self.image_id, bad.confidence
            )));
        }
        objs.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        objs.truncate(top_k);
        Ok(objs
            .into_iter()
            .map(|o| ObjectFeature {
                vector: o.feature.clone(),
                confidence: o.confidence,
                order: self.order,
            })
            .collect())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint<M> {
    format_version: u32,
    kind: String,
    config: ModelConfig,
    meta: M,
    params: ParamStore,
}

fn save_checkpoint<M: Serialize>(
    path: &Path,
    kind: &str,
    config: &ModelConfig,
    meta: M,
    params: &ParamStore,
) -> Result<()> {
    let ckpt = Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: kind.to_string(),
        config: config.clone(),
        meta,
        params: params.clone(),
    };
    let bytes = serde_json::to_vec(&ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_checkpoint<M: DeserializeOwned>(
    path: &Path,
    kind: &str,
    expected: Option<&ModelConfig>,
) -> Result<(ModelConfig, M, ParamStore)> {
    let ckpt: Checkpoint<M> = crate::io::read_json(path)?;
    if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::data(format!(
            "{}: checkpoint format_version {} is not supported",
            path.display(),
            ckpt.format_version
        )));
    }
    if ckpt.kind != kind {
        return Err(Error::data(format!(
            "{}: expected a {kind} checkpoint, found {}",
            path.display(),
            ckpt.kind
        )));
    }
    if let Some(expected) = expected {
        if *expected != ckpt.config {
            return Err(Error::config(format!(
                "{}: checkpoint model config {:?} does not match configured {:?}",
                path.display(),
                ckpt.config,
                expected
            )));
        }
    }
    Ok((ckpt.config, ckpt.meta, ckpt.params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::full_scale().validate().unwrap();
        let bad = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let zero = ModelConfig {
            top_k: 0,
            ..ModelConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn top_objects_sorted_and_truncated() {
        let rec = ImageRecord {
            image_id: "i".into(),
            order: 2,
            objects: vec![
                ObjectRecord {
                    confidence: 0.2,
                    feature: vec![1.0],
                },
                ObjectRecord {
                    confidence: 0.9,
                    feature: vec![2.0],
                },
                ObjectRecord {
                    confidence: 0.5,
                    feature: vec![3.0],
                },
            ],
            story_id: None,
        };
        let top = rec.top_objects(2).unwrap();
        assert_eq!(top.iter().map(|o| o.vector[0]).collect::<Vec<_>>(), vec![2.0, 3.0]);
        assert!(top.iter().all(|o| o.order == 2));
        let bad = ImageRecord { order: 6, ..rec };
        assert!(bad.top_objects(2).is_err());
    }
}
