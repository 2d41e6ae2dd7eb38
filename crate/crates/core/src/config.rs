//! Run configuration: a sectioned `key = value` file (TOML). Every key has
//! a default; unknown keys are rejected. The merged, effective config can be
//! re-serialized so output directories carry exactly what ran.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foundation::FoundationConfig;
use crate::objective::LossWeights;
use crate::prompt::{placement_from_interval, PromptConfig, PromptMode};
use crate::synthdata::{AuxSignal, SceneSpec, TargetKind};
use crate::tuner::{TrainSchedule, TuneMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoundationSection {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub patch: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub ln_eps: f64,
}

impl Default for FoundationSection {
    fn default() -> Self {
        let toy = FoundationConfig::toy();
        FoundationSection {
            dim: toy.dim,
            layers: toy.layers,
            heads: toy.heads,
            ffn_dim: toy.ffn_dim,
            patch: toy.patch,
            template_size: toy.template_size,
            search_size: toy.search_size,
            ln_eps: toy.ln_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSection {
    /// `vipt`, `vpt_sum`, or `none` (RGB-only foundation).
    pub mode: String,
    /// Prompter block every k layers (vipt).
    pub interval: usize,
    pub latent_dim: usize,
    /// Per-layer token tables for the vpt_sum variant.
    pub vpt_deep: bool,
}

impl Default for PromptSection {
    fn default() -> Self {
        PromptSection {
            mode: "vipt".into(),
            interval: 1,
            latent_dim: 8,
            vpt_deep: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let toy = TrainSchedule::toy();
        ScheduleSection {
            epochs: toy.epochs,
            steps_per_epoch: toy.steps_per_epoch,
            base_lr: toy.base_lr,
            weight_decay: toy.weight_decay,
            decay_epoch: toy.decay_epoch,
            decay_factor: toy.decay_factor,
            batch_size: toy.batch_size,
            seed: toy.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            lambda_iou: 2.0,
            lambda_l1: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// `prompt_tune`, `full_tune`, or `foundation_only`.
    pub mode: String,
    /// Max |jitter| of the search-crop center when materializing pairs.
    pub jitter: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            mode: "prompt_tune".into(),
            jitter: 6.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: String,
    pub eval: String,
}

/// The full run configuration.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViptConfig {
    pub foundation: FoundationSection,
    pub prompt: PromptSection,
    pub schedule: ScheduleSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub data: DataSection,
}

impl ViptConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Effective config, serialized back in the file format.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn foundation_config(&self) -> FoundationConfig {
        FoundationConfig {
            dim: self.foundation.dim,
            layers: self.foundation.layers,
            heads: self.foundation.heads,
            ffn_dim: self.foundation.ffn_dim,
            patch: self.foundation.patch,
            template_size: self.foundation.template_size,
            search_size: self.foundation.search_size,
            ln_eps: self.foundation.ln_eps,
        }
    }

    pub fn prompt_config(&self) -> Result<Option<PromptConfig>> {
        match self.prompt.mode.as_str() {
            "none" => Ok(None),
            "vipt" => {
                if self.prompt.interval == 0 {
                    return Err(Error::Config("prompt interval must be >= 1".into()));
                }
                Ok(Some(PromptConfig {
                    mode: PromptMode::Vipt,
                    placement: placement_from_interval(self.prompt.interval, self.foundation.layers),
                    latent_dim: self.prompt.latent_dim,
                }))
            }
            "vpt_sum" => Ok(Some(PromptConfig::vpt_sum(self.prompt.vpt_deep))),
            other => Err(Error::Config(format!(
                "unknown prompt mode `{other}` (expected vipt | vpt_sum | none)"
            ))),
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs: self.schedule.epochs,
            steps_per_epoch: self.schedule.steps_per_epoch,
            base_lr: self.schedule.base_lr,
            weight_decay: self.schedule.weight_decay,
            decay_epoch: self.schedule.decay_epoch,
            decay_factor: self.schedule.decay_factor,
            batch_size: self.schedule.batch_size,
            seed: self.schedule.seed,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_iou: self.loss.lambda_iou,
            lambda_l1: self.loss.lambda_l1,
        }
    }

    pub fn tune_mode(&self) -> Result<TuneMode> {
        TuneMode::parse(&self.train.mode)
    }

    /// Reference-scale counterpart (used by the audit examples).
    pub fn reference() -> Self {
        let f = FoundationConfig::reference();
        ViptConfig {
            foundation: FoundationSection {
                dim: f.dim,
                layers: f.layers,
                heads: f.heads,
                ffn_dim: f.ffn_dim,
                patch: f.patch,
                template_size: f.template_size,
                search_size: f.search_size,
                ln_eps: f.ln_eps,
            },
            schedule: {
                let s = TrainSchedule::reference();
                ScheduleSection {
                    epochs: s.epochs,
                    steps_per_epoch: s.steps_per_epoch,
                    base_lr: s.base_lr,
                    weight_decay: s.weight_decay,
                    decay_epoch: s.decay_epoch,
                    decay_factor: s.decay_factor,
                    batch_size: s.batch_size,
                    seed: s.seed,
                }
            },
            ..ViptConfig::default()
        }
    }
}

/// Scene-generation spec file: `[dataset]` section.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub dataset: DatasetSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub seed: u64,
    pub sequences: usize,
    pub frames: usize,
    /// (height, width).
    pub canvas: [usize; 2],
    /// `disc` or `square`.
    pub target: String,
    pub size_min: f64,
    pub size_max: f64,
    pub corruption_rate: f64,
    /// σ of additive auxiliary noise; 0 = clean.
    pub aux_noise: f64,
    pub distractors: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            seed: 0,
            sequences: 8,
            frames: 40,
            canvas: [96, 96],
            target: "disc".into(),
            size_min: 6.0,
            size_max: 11.0,
            corruption_rate: 0.5,
            aux_noise: 0.0,
            distractors: 2,
        }
    }
}

impl GenSpec {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes")
    }

    /// Per-sequence scene specs with derived sub-seeds.
    pub fn scene_specs(&self) -> Result<Vec<SceneSpec>> {
        let d = &self.dataset;
        let target = match d.target.as_str() {
            "disc" => TargetKind::Disc,
            "square" => TargetKind::Square,
            other => {
                return Err(Error::Config(format!(
                    "unknown target kind `{other}` (expected disc | square)"
                )))
            }
        };
        let aux = if d.aux_noise > 0.0 {
            AuxSignal::Noisy(d.aux_noise)
        } else {
            AuxSignal::Clean
        };
        Ok((0..d.sequences)
            .map(|i| SceneSpec {
                seed: d.seed.wrapping_add(1_000_003 * i as u64),
                num_frames: d.frames,
                canvas: (d.canvas[0], d.canvas[1]),
                target,
                size_range: (d.size_min, d.size_max),
                rgb_corruption_rate: d.corruption_rate,
                aux_signal: aux,
                distractors: d.distractors,
            })
            .collect())
    }
}
