//! Run configuration: one TOML file fully determines a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, Method};
use crate::diffusion::{DatasetSpec, NoiseSchedule, ScheduleSpec};
use crate::distill::{DistillConfig, Scenario};
use crate::error::{Error, Result};
use crate::host::{attach_adapters, ModelSpec, ToyDenoiser};
use crate::persist::{config_hash, ConfigHash};
use crate::train::TrainSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Finetune,
    Fewshot,
    Distill,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Finetune => "finetune",
            Mode::Fewshot => "fewshot",
            Mode::Distill => "distill",
        })
    }
}

/// Trunk pretraining of the base model on broad data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSpec {
    pub data: DatasetSpec,
    pub train: TrainSpec,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        PretrainSpec {
            data: DatasetSpec {
                spread: 0.6,
                ..DatasetSpec::default()
            },
            train: TrainSpec {
                steps: 1500,
                grad_accum: 1,
                checkpoint_interval: 1500,
                ..TrainSpec::default()
            },
        }
    }
}

/// Adapter fine-tuning on the style data (also the teacher's data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSpec {
    pub data: DatasetSpec,
    pub train: TrainSpec,
    /// Samples kept per condition in `fewshot` mode.
    pub shots_per_class: usize,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        FinetuneSpec {
            data: DatasetSpec {
                spread: 0.25,
                aspect: 0.3,
                tilt: 0.6,
                shift: 0.8,
                seed: 99,
                ..DatasetSpec::default()
            },
            train: TrainSpec::default(),
            shots_per_class: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSpec {
    /// Load the teacher from here instead of training one.
    pub checkpoint: Option<PathBuf>,
    /// Full trunk fine-tuning of the base on the style data.
    pub train: TrainSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSpec {
    /// Generic data the student is distilled on.
    pub data: DatasetSpec,
    pub loss: DistillConfig,
    /// Condition-table seed of the student base in the unshared scenario.
    pub student_embedder_seed: u64,
    /// Seed of the teacher-to-student vocabulary bijection (unshared only).
    pub translator_seed: u64,
}

impl Default for DistillSpec {
    fn default() -> Self {
        DistillSpec {
            data: DatasetSpec {
                spread: 0.8,
                seed: 77,
                ..DatasetSpec::default()
            },
            loss: DistillConfig {
                checkpoint_interval: 100,
                ..DistillConfig::default()
            },
            student_embedder_seed: 1234,
            translator_seed: 5,
        }
    }
}

fn toy_adapter() -> AdapterConfig {
    AdapterConfig::styleinject(4, 4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default = "toy_adapter")]
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub pretrain: PretrainSpec,
    #[serde(default)]
    pub finetune: FinetuneSpec,
    #[serde(default)]
    pub teacher: TeacherSpec,
    #[serde(default)]
    pub distill: DistillSpec,
}

impl RunConfig {
    pub fn new(mode: Mode) -> Self {
        RunConfig {
            mode,
            seed: 0,
            out_dir: None,
            model: ModelSpec::default(),
            schedule: ScheduleSpec::default(),
            adapter: toy_adapter(),
            pretrain: PretrainSpec::default(),
            finetune: FinetuneSpec::default(),
            teacher: TeacherSpec::default(),
            distill: DistillSpec::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(p) = cfg.out_dir.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.teacher.checkpoint.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    /// Full text, defaults filled in.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize run config: {e}")))
    }

    /// Text with the output directory dropped. This is what gets hashed,
    /// copied next to the outputs and embedded in checkpoints, so the same
    /// run written to two places produces identical bytes.
    pub fn canonical_toml(&self) -> Result<String> {
        RunConfig {
            out_dir: None,
            ..self.clone()
        }
        .to_toml()
    }

    pub fn hash(&self) -> Result<ConfigHash> {
        Ok(config_hash(&self.canonical_toml()?))
    }

    fn check_data(&self, what: &str, d: &DatasetSpec) -> Result<()> {
        d.validate()?;
        if d.data_dim != self.model.data_dim {
            return Err(Error::Config(format!(
                "{what} data_dim {} differs from model data_dim {}",
                d.data_dim, self.model.data_dim
            )));
        }
        if d.classes > self.model.cond_vocab {
            return Err(Error::Config(format!(
                "{what} uses {} classes but the model vocabulary has {}",
                d.classes, self.model.cond_vocab
            )));
        }
        Ok(())
    }

    /// Every check that can fail, run before any training starts.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        NoiseSchedule::from_spec(&self.schedule)?;
        self.adapter.validate()?;
        // Building and attaching is cheap and catches rank and target errors.
        attach_adapters(ToyDenoiser::build(&self.model)?, &self.adapter, 0)?;
        self.check_data("pretrain", &self.pretrain.data)?;
        self.pretrain.train.validate()?;
        self.check_data("finetune", &self.finetune.data)?;
        self.finetune.train.validate()?;
        if self.mode == Mode::Fewshot && self.finetune.shots_per_class == 0 {
            return Err(Error::Config("fewshot mode needs shots_per_class >= 1".into()));
        }
        if self.mode == Mode::Distill {
            self.teacher.train.validate()?;
            self.check_data("distill", &self.distill.data)?;
            self.distill.loss.validate()?;
            if self.distill.loss.scenario == Scenario::Shared && self.distill.loss.lambda_featkd > 0.0 {
                let blocks: Vec<String> = (0..self.model.blocks).map(|i| format!("blocks.{i}")).collect();
                let manifest = self.model.manifest();
                for l in &self.distill.loss.feature_layers {
                    if !blocks.contains(l) && manifest.get(l).is_none() {
                        return Err(Error::Config(format!("feature layer `{l}` does not exist in the model")));
                    }
                }
            }
            if self.adapter.method == Method::Lora {
                log::info!("distilling into plain LoRA adapters");
            }
        }
        Ok(())
    }
}
