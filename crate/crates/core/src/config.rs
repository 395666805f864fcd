//! Experiment configuration: one document drives every stage.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::addons::AddonConfig;
use crate::error::{bail, Result};
use crate::model::{ModelDims, ScheduleConfig, TrainConfig};
use crate::unlearning::{Strategy, UnlearnSettings};
use crate::world::{resolve_splits, ClassifierConfig, Domain, Splits, SplitSpec, WorldConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Layer widths; data and embedding sizes follow the world when absent.
    pub dims: Option<ModelDims>,
    pub schedule: ScheduleConfig,
    pub training: TrainConfig,
    pub classifier: ClassifierConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub seeds_per_cell: usize,
    pub eval_seed: u64,
    pub splits: SplitSpec,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            seeds_per_cell: 5,
            eval_seed: 31,
            splits: SplitSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub scales: Vec<f64>,
    pub trials: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-coordinate scale of the small perturbation checked against the
    /// Taylor bound.
    pub taylor_scale: f64,
    /// Concept unlearned by the similarity study; first of the sequence when
    /// absent.
    pub study_target: Option<usize>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            scales: vec![0.01, 0.04, 0.8],
            trials: 8,
            batch_size: 256,
            seed: 37,
            taylor_scale: 1e-4,
            study_target: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub unlearn: UnlearnSettings,
    #[serde(default)]
    pub addons: AddonConfig,
    #[serde(default)]
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

fn default_output_dir() -> String {
    "out".into()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            model: ModelSection::default(),
            unlearn: UnlearnSettings::default(),
            addons: AddonConfig::default(),
            protocol: ProtocolSection::default(),
            analysis: AnalysisSection::default(),
            output_dir: default_output_dir(),
        }
    }
}

impl ExperimentConfig {
    /// Paper-sized split: 24 styles, 12 unlearned and 12 held out.
    pub fn paper_shape() -> Self {
        let mut c = Self::default();
        c.world.styles = 24;
        c.protocol.splits.unlearn_count = 12;
        c
    }

    pub fn dims(&self) -> ModelDims {
        let mut d = self.model.dims.unwrap_or_default();
        if self.model.dims.is_none() {
            d.data_dim = self.world.data_dim;
            d.embed_dim = self.world.embed_dim;
        }
        d
    }

    /// Resolved splits (generated defaults filled in).
    pub fn splits(&self) -> Result<Splits> {
        resolve_splits(&self.world, &self.protocol.splits)
    }

    /// Check every cross-section invariant without building anything.
    pub fn validate(&self) -> Result<()> {
        let w = &self.world;
        if w.styles < 4 || w.objects < 2 || w.embed_dim < 4 || w.data_dim < w.embed_dim {
            bail!(Precondition, "world needs S >= 4, O >= 2, e >= 4 and D >= e");
        }
        if !(w.noise_sigma >= 0.0 && w.noise_sigma.is_finite()) {
            bail!(Config, "noise_sigma must be finite and >= 0");
        }
        let splits = self.splits()?;
        let d = self.dims();
        if d.data_dim != w.data_dim || d.embed_dim != w.embed_dim {
            bail!(Config, "model dims {:?} do not match the world (D={}, e={})", d, w.data_dim, w.embed_dim);
        }
        if [d.time_dim, d.hidden, d.key_dim, d.value_dim, d.mlp_hidden].contains(&0) {
            bail!(Config, "model widths must be positive");
        }
        self.model.schedule.build()?;
        let t = &self.model.training;
        if !(t.lr > 0.0 && t.lr.is_finite()) || t.batch_size == 0 || t.gate_samples_per_pair == 0 {
            bail!(Config, "training needs lr > 0, batch_size >= 1 and gate samples >= 1");
        }
        if self.model.classifier.n_per_pair < 10 {
            bail!(Config, "classifier n_per_pair must be at least 10");
        }
        if self.protocol.seeds_per_cell == 0 {
            bail!(Config, "seeds_per_cell must be at least 1");
        }
        let u = &self.unlearn;
        if !(u.lr > 0.0 && u.lr.is_finite()) || u.batch_size == 0 {
            bail!(Config, "unlearning needs lr > 0 and batch_size >= 1");
        }
        if u.trainable.is_empty() {
            bail!(Config, "unlearn.trainable must name at least one block");
        }
        if let Some(anchors) = &u.anchors {
            if anchors.len() != splits.unlearn_sequence.len() {
                bail!(Config, "{} anchors for {} requests", anchors.len(), splits.unlearn_sequence.len());
            }
            for (a, t) in anchors.iter().zip(&splits.unlearn_sequence) {
                let same_domain = match splits.unlearn_domain {
                    Domain::Style => *a < w.styles,
                    Domain::Object => *a >= w.styles && *a < w.styles + w.objects,
                };
                if !same_domain || a == t || splits.unlearn_sequence.contains(a) {
                    bail!(Config, "anchor {a} for target {t} must be a held-in concept of the same domain");
                }
            }
        }
        self.addons.validate(u.strategy)?;
        let domain_size = match splits.unlearn_domain {
            Domain::Style => w.styles,
            Domain::Object => w.objects,
        };
        self.addons.validate_pool(domain_size, splits.unlearn_sequence.len())?;
        let a = &self.analysis;
        if a.trials < 2 || a.batch_size == 0 {
            bail!(Config, "analysis needs trials >= 2 and batch_size >= 1");
        }
        if a.scales.is_empty() || a.scales.iter().any(|&s| !(s > 0.0)) || a.scales.windows(2).any(|p| p[1] <= p[0]) {
            bail!(Config, "analysis scales must be positive and strictly increasing");
        }
        if let Some(t) = a.study_target {
            if !splits.unlearn_sequence.contains(&t) {
                bail!(Config, "study_target {t} is not in the unlearn sequence");
            }
        }
        Ok(())
    }

    pub fn with_strategy(mut self, s: Strategy) -> Self {
        self.unlearn.strategy = s;
        self
    }
}
