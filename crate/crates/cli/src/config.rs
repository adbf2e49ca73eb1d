//! Run configuration file (TOML). Every key is optional; omitted keys take
//! the profile defaults, and command-line flags override both.

use std::path::Path;

use cellcount_core::imaging::{gaussian_kernel, GaussianKernel};
use cellcount_core::metrics::DensityBounds;
use cellcount_core::model::ModelConfig;
use cellcount_core::synthgen::{BinQuotas, CountDistribution, SceneSpec, DAPI_LOG_MU, DAPI_LOG_SIGMA};
use cellcount_core::training::{Objective, TrainConfig};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small encoder sized for CPU training.
    #[default]
    Desk,
    /// ViT-B sized encoder with the full 256→128→64→1 head.
    Full,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKindName {
    #[default]
    Density,
    Regression,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub profile: Profile,
    pub model: ModelSection,
    pub train: TrainSection,
    pub split: SplitSection,
    pub synth: SynthSection,
    pub density: DensitySection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKindName,
    pub input_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub embed_dim: Option<usize>,
    pub depth: Option<usize>,
    pub num_heads: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub feature_dim: Option<usize>,
    pub head_channels: Option<Vec<usize>>,
    pub layer_norm_eps: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub patience: Option<usize>,
    pub objective: Option<String>,
    pub encoder_trainable: Option<bool>,
    /// `[[batch_size, learning_rate], ...]` candidates for `train --grid`.
    pub grid: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub ratio: f64,
    pub k_bins: usize,
    /// Share of each training stratum kept for training; the rest validates.
    pub validation_ratio: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            k_bins: 5,
            validation_ratio: 0.875,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuotaSection {
    pub low: usize,
    pub medium: usize,
    pub high: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_images: usize,
    pub width: usize,
    pub height: usize,
    /// Fixed count per scene; overrides the log-normal keys when set.
    pub count_fixed: Option<usize>,
    pub count_mu: f64,
    pub count_sigma: f64,
    /// Multiplies every log-normal count.
    pub count_scale: f64,
    pub count_min: usize,
    pub count_max: usize,
    pub radius: (f64, f64),
    pub intensity: (f64, f64),
    pub background: f64,
    pub allow_overlap: bool,
    pub noise_sigma: f64,
    pub p_40x: f64,
    pub quotas: Option<QuotaSection>,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            n_images: 200,
            width: s.width,
            height: s.height,
            count_fixed: None,
            count_mu: DAPI_LOG_MU,
            count_sigma: DAPI_LOG_SIGMA,
            count_scale: 0.1,
            count_min: 0,
            count_max: 120,
            radius: s.radius,
            intensity: s.intensity,
            background: s.background,
            allow_overlap: s.allow_overlap,
            noise_sigma: s.noise_sigma,
            p_40x: s.p_40x,
            quotas: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensitySection {
    /// Odd kernel side in output-grid cells.
    pub kernel_size: usize,
    pub sigma: f64,
}

impl Default for DensitySection {
    fn default() -> Self {
        Self {
            kernel_size: 5,
            sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub low_max: f64,
    pub medium_max: f64,
    /// Number of side-by-side heatmaps written per evaluation.
    pub heatmaps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let b = DensityBounds::default();
        Self {
            low_max: b.low_max,
            medium_max: b.medium_max,
            heatmaps: 4,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub encoder: Vec<bool>,
    /// Head hidden widths per grid column; defaults to halving from D.
    pub heads: Option<Vec<Vec<usize>>>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            encoder: vec![false, true],
            heads: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let m = &self.model;
        let base = match self.profile {
            Profile::Desk => ModelConfig::desk(),
            Profile::Full => ModelConfig::default(),
        };
        let cfg = ModelConfig {
            input_size: m.input_size.unwrap_or(base.input_size),
            patch_size: m.patch_size.unwrap_or(base.patch_size),
            embed_dim: m.embed_dim.unwrap_or(base.embed_dim),
            depth: m.depth.unwrap_or(base.depth),
            num_heads: m.num_heads.unwrap_or(base.num_heads),
            mlp_ratio: m.mlp_ratio.unwrap_or(base.mlp_ratio),
            feature_dim: m.feature_dim.unwrap_or(base.feature_dim),
            head_channels: m.head_channels.clone().unwrap_or(base.head_channels),
            layer_norm_eps: m.layer_norm_eps.unwrap_or(base.layer_norm_eps),
            encoder_trainable: self.train.encoder_trainable.unwrap_or(true),
            seed: self.seed(),
            ..base
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let base = match self.profile {
            Profile::Desk => TrainConfig::desk(),
            Profile::Full => TrainConfig::default(),
        };
        let objective = match (&t.objective, self.model.kind) {
            (Some(o), _) => o.parse::<Objective>().map_err(|e| CliError::Config(e.to_string()))?,
            (None, ModelKindName::Density) => Objective::DensityMse,
            (None, ModelKindName::Regression) => Objective::CountMse,
        };
        let cfg = TrainConfig {
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            learning_rate: t.learning_rate.unwrap_or(base.learning_rate),
            max_epochs: t.max_epochs.unwrap_or(base.max_epochs),
            max_steps: t.max_steps.or(base.max_steps),
            patience: t.patience.unwrap_or(base.patience),
            encoder_trainable: t.encoder_trainable.unwrap_or(true),
            seed: self.seed(),
            objective,
            ..base
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn scene_spec(&self) -> Result<SceneSpec, CliError> {
        let s = &self.synth;
        let count = match s.count_fixed {
            Some(n) => CountDistribution::Fixed(n),
            None => {
                if !(s.count_scale > 0.0) {
                    return Err(CliError::Config(format!(
                        "count_scale must be positive, got {}",
                        s.count_scale
                    )));
                }
                CountDistribution::LogNormal {
                    mu: s.count_mu + s.count_scale.ln(),
                    sigma: s.count_sigma,
                    min: s.count_min,
                    max: s.count_max,
                }
            }
        };
        let spec = SceneSpec {
            width: s.width,
            height: s.height,
            count,
            radius: s.radius,
            intensity: s.intensity,
            background: s.background,
            allow_overlap: s.allow_overlap,
            noise_sigma: s.noise_sigma,
            p_40x: s.p_40x,
            seed: self.seed(),
        };
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn quotas(&self) -> Result<Option<BinQuotas>, CliError> {
        let bounds = self.bounds()?;
        Ok(self.synth.quotas.map(|q| BinQuotas {
            low: q.low,
            medium: q.medium,
            high: q.high,
            bounds,
        }))
    }

    pub fn kernel(&self) -> Result<GaussianKernel, CliError> {
        gaussian_kernel(self.density.kernel_size, self.density.sigma).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn bounds(&self) -> Result<DensityBounds, CliError> {
        DensityBounds::new(self.eval.low_max, self.eval.medium_max).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Head grid for ablation: configured widths, or 1/2/3 layers halving from D.
    pub fn ablation_heads(&self, feature_dim: usize) -> Vec<Vec<usize>> {
        self.ablate
            .heads
            .clone()
            .unwrap_or_else(|| vec![vec![], vec![feature_dim / 2], vec![feature_dim / 2, feature_dim / 4]])
    }
}
