use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{ClassCatalog, CorpusConfig};
use crate::error::{Error, Result};
use crate::language_guidance::TextEmbeddingTable;
use crate::model::ModelConfig;

/// `lr(iter) = base · ratio^floor(iter / step)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub base: f64,
    pub step: usize,
    pub ratio: f64,
}

impl StepDecay {
    pub fn at(&self, iteration: usize) -> f64 {
        self.base * self.ratio.powi((iteration / self.step) as i32)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.base > 0.0) || self.step == 0 || !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "{what} schedule needs lr > 0, step > 0 and ratio in (0, 1), got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Where class-name embeddings come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TextSource {
    /// Embeddings correlated with the synthetic catalog's appearance attributes.
    Planted { seed: u64, strength: f64, noise: f64 },
    /// Hash-seeded random unit vectors, uncorrelated with appearance.
    Synthetic { seed: u64 },
    /// An embedding table file, optionally with a synthetic fallback.
    File { path: PathBuf, fallback_seed: Option<u64> },
}

impl Default for TextSource {
    fn default() -> Self {
        TextSource::Planted { seed: 7, strength: 1.0, noise: 0.3 }
    }
}

impl TextSource {
    pub fn table(&self, catalog: &ClassCatalog, dim: usize) -> Result<TextEmbeddingTable> {
        let table = match self {
            TextSource::Planted { seed, strength, noise } => {
                TextEmbeddingTable::planted(catalog, dim, *seed, *strength, *noise)
            }
            TextSource::Synthetic { seed } => TextEmbeddingTable::new(dim, Some(*seed)),
            TextSource::File { path, fallback_seed } => {
                let mut t = TextEmbeddingTable::load(path)?;
                t.set_fallback(*fallback_seed);
                t
            }
        };
        if table.dim() != dim {
            return Err(Error::InvalidArgument(format!(
                "text table has dimension {}, model expects {dim}",
                table.dim()
            )));
        }
        Ok(table)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub main_lr: StepDecay,
    pub backbone_lr: StepDecay,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled so their global L2 norm is at most this.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub n_way: usize,
    pub k_shot: usize,
    pub eval_episodes: usize,
    /// Seed of the synthetic corpus when none is supplied.
    pub data_seed: u64,
    /// Object classes in the synthetic catalog.
    pub object_classes: usize,
    pub corpus: CorpusConfig,
    pub text: TextSource,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            main_lr: StepDecay { base: 0.001, step: 5000, ratio: 0.5 },
            backbone_lr: StepDecay { base: 1e-4, step: 1000, ratio: 0.5 },
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: Some(1.0),
            seed: 0,
            n_way: 2,
            k_shot: 1,
            eval_episodes: 100,
            data_seed: 0,
            object_classes: 10,
            corpus: CorpusConfig::default(),
            text: TextSource::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-length schedule: 30,000 iterations on 2048-point blocks, with
    /// the backbone learning rate at 0.006.
    pub fn full_scale() -> Self {
        Self {
            iterations: 30_000,
            backbone_lr: StepDecay { base: 0.006, step: 1000, ratio: 0.5 },
            corpus: CorpusConfig { block_points: 2048, ..CorpusConfig::default() },
            ..Self::default()
        }
    }

    pub fn catalog(&self) -> Result<ClassCatalog> {
        ClassCatalog::synthetic_with(self.object_classes)
    }

    pub fn validate(&self) -> Result<()> {
        self.main_lr.validate("main")?;
        self.backbone_lr.validate("backbone")?;
        if self.n_way == 0 || self.k_shot == 0 {
            return Err(Error::InvalidArgument("n_way and k_shot must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("optimizer betas must lie in [0, 1) and eps > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight decay must be non-negative".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::InvalidArgument("gradient clip must be positive".into()));
        }
        Ok(())
    }
}
