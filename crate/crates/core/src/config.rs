//! Run configuration: a schema-versioned TOML document covering model
//! geometry, data generation, training schedules, arm selection, seeds, and
//! output locations. Unknown keys are rejected; resolved configs (defaults
//! applied) are written next to outputs.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{DataParams, TaskShape, NUM_SPECIAL};
use crate::distill::{FreezePolicy, MappingStrategy};
use crate::error::{Error, Result};
use crate::model::{AttnSource, ModelConfig};
use crate::train::{FinetuneJob, JobKind, Schedule, TrainJob};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Where the student's initial weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    #[default]
    Teacher,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub teacher_layers: usize,
    pub student_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub attn_source: AttnSource,
    pub num_classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            teacher_layers: 4,
            student_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ffn_size: 128,
            vocab_size: 256,
            max_seq_len: 16,
            dropout_rate: 0.1,
            attn_source: AttnSource::Scores,
            num_classes: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_languages: usize,
    pub num_concepts: usize,
    pub anchor_fraction: f64,
    pub corpus_sentences_per_language: usize,
    pub task_train: usize,
    pub task_dev: usize,
    pub task_test: usize,
    pub sentence_len: [usize; 2],
    pub premise_len: [usize; 2],
    pub hypothesis_len: [usize; 2],
    pub neutral_max_overlap: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            num_languages: 6,
            num_concepts: 32,
            anchor_fraction: 0.3,
            corpus_sentences_per_language: 3000,
            task_train: 2304,
            task_dev: 300,
            task_test: 600,
            sentence_len: [4, 12],
            premise_len: [4, 6],
            hypothesis_len: [2, 4],
            neutral_max_overlap: 0.3,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlmSection {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub mask_rate: f64,
    pub pair_fraction: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub log_every: u64,
    pub checkpoint_every: Option<u64>,
    pub seed: u64,
}

impl Default for MlmSection {
    fn default() -> Self {
        MlmSection {
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_steps: 300,
            total_steps: 3000,
            mask_rate: 0.15,
            pair_fraction: 0.5,
            weight_decay: 0.01,
            clip_norm: 1.0,
            log_every: 25,
            checkpoint_every: Some(1000),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub pair_fraction: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub log_every: u64,
    pub checkpoint_every: Option<u64>,
    pub seed: u64,
    pub init: StudentInit,
    pub mapping: MappingStrategy,
    pub freeze: FreezePolicy,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            batch_size: 8,
            peak_lr: 3e-4,
            warmup_steps: 60,
            total_steps: 600,
            pair_fraction: 0.5,
            weight_decay: 0.01,
            clip_norm: 1.0,
            log_every: 25,
            checkpoint_every: Some(200),
            seed: 2,
            init: StudentInit::Teacher,
            mapping: MappingStrategy::Top,
            freeze: FreezePolicy::Embeddings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub epochs: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub freeze: FreezePolicy,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            epochs: 8,
            lr: 1e-3,
            batch_size: 32,
            weight_decay: 0.01,
            clip_norm: 1.0,
            freeze: FreezePolicy::Embeddings,
            log_every: 10,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { batch_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
    /// Distillation steps between accuracy curve points.
    pub eval_every: u64,
    pub arms: Vec<String>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            seeds: vec![1, 2, 3],
            eval_every: 300,
            arms: vec![
                "teacher".to_string(),
                "light".to_string(),
                "drop".to_string(),
                "uniform".to_string(),
                "random_init".to_string(),
                "no_freeze".to_string(),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    pub mlm: MlmSection,
    pub distill: DistillSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            out_dir: PathBuf::from("runs"),
            model: ModelSection::default(),
            data: DataSection::default(),
            mlm: MlmSection::default(),
            distill: DistillSection::default(),
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("config serialization failed: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema version {}, expected {CONFIG_SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        self.teacher_model_config().validate()?;
        self.student_model_config().validate()?;
        if self.model.student_layers > self.model.teacher_layers {
            return Err(Error::Config(format!(
                "student_layers {} exceeds teacher_layers {}",
                self.model.student_layers, self.model.teacher_layers
            )));
        }
        self.mlm_job().validate()?;
        self.distill_job().validate()?;
        self.finetune_job(self.finetune.freeze).validate()?;
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval batch_size must be positive".to_string()));
        }
        if self.ablate.seeds.is_empty() {
            return Err(Error::Config("ablate.seeds cannot be empty".to_string()));
        }
        if self.ablate.eval_every == 0 {
            return Err(Error::Config("ablate.eval_every must be positive".to_string()));
        }
        let d = &self.data;
        if d.num_languages == 0 {
            return Err(Error::Config("num_languages must be positive".to_string()));
        }
        // Vocabulary layout: specials, anchors, per-language private ranges.
        let anchors = (d.anchor_fraction * d.num_concepts as f64).round() as usize;
        let private = d.num_concepts - anchors.min(d.num_concepts);
        let needed = NUM_SPECIAL + anchors + d.num_languages * private;
        if needed > self.model.vocab_size {
            return Err(Error::Config(format!(
                "vocab_size {} too small: {} languages x {} private concepts + {} anchors + {} specials needs {}",
                self.model.vocab_size, d.num_languages, private, anchors, NUM_SPECIAL, needed
            )));
        }
        Ok(())
    }

    fn model_config(&self, num_layers: usize) -> ModelConfig {
        ModelConfig {
            num_layers,
            hidden_size: self.model.hidden_size,
            num_heads: self.model.num_heads,
            ffn_size: self.model.ffn_size,
            vocab_size: self.model.vocab_size,
            max_seq_len: self.model.max_seq_len,
            type_vocab: 2,
            dropout_rate: self.model.dropout_rate,
            attn_source: self.model.attn_source,
            num_classes: self.model.num_classes,
        }
    }

    pub fn teacher_model_config(&self) -> ModelConfig {
        self.model_config(self.model.teacher_layers)
    }

    pub fn student_model_config(&self) -> ModelConfig {
        self.model_config(self.model.student_layers)
    }

    pub fn data_params(&self) -> DataParams {
        DataParams {
            num_languages: self.data.num_languages,
            num_concepts: self.data.num_concepts,
            anchor_fraction: self.data.anchor_fraction,
            corpus_sentences_per_language: self.data.corpus_sentences_per_language,
            task_train: self.data.task_train,
            task_dev: self.data.task_dev,
            task_test: self.data.task_test,
            sentence_len: (self.data.sentence_len[0], self.data.sentence_len[1]),
            task_shape: TaskShape {
                premise_len: (self.data.premise_len[0], self.data.premise_len[1]),
                hypothesis_len: (self.data.hypothesis_len[0], self.data.hypothesis_len[1]),
                neutral_max_overlap: self.data.neutral_max_overlap,
            },
            seed: self.data.seed,
            seq_len: self.model.max_seq_len,
            vocab_size: self.model.vocab_size,
        }
    }

    pub fn mlm_job(&self) -> TrainJob {
        TrainJob {
            kind: JobKind::Mlm,
            batch_size: self.mlm.batch_size,
            schedule: Schedule {
                peak_lr: self.mlm.peak_lr,
                warmup_steps: self.mlm.warmup_steps,
                total_steps: self.mlm.total_steps,
            },
            seed: self.mlm.seed,
            mask_rate: self.mlm.mask_rate,
            weight_decay: self.mlm.weight_decay,
            clip_norm: self.mlm.clip_norm,
            log_every: self.mlm.log_every,
            checkpoint_every: self.mlm.checkpoint_every,
            pair_fraction: self.mlm.pair_fraction,
            stop_after: None,
        }
    }

    pub fn distill_job(&self) -> TrainJob {
        TrainJob {
            kind: JobKind::Distill,
            batch_size: self.distill.batch_size,
            schedule: Schedule {
                peak_lr: self.distill.peak_lr,
                warmup_steps: self.distill.warmup_steps,
                total_steps: self.distill.total_steps,
            },
            seed: self.distill.seed,
            mask_rate: 0.0,
            weight_decay: self.distill.weight_decay,
            clip_norm: self.distill.clip_norm,
            log_every: self.distill.log_every,
            checkpoint_every: self.distill.checkpoint_every,
            pair_fraction: self.distill.pair_fraction,
            stop_after: None,
        }
    }

    pub fn finetune_job(&self, freeze: FreezePolicy) -> FinetuneJob {
        FinetuneJob {
            epochs: self.finetune.epochs,
            lr: self.finetune.lr,
            batch_size: self.finetune.batch_size,
            seq_len: self.model.max_seq_len,
            seed: self.finetune.seed,
            freeze,
            weight_decay: self.finetune.weight_decay,
            clip_norm: self.finetune.clip_norm,
            log_every: self.finetune.log_every,
        }
    }
}

#[cfg(test)]
#[path = "config_tests.rs"]
mod tests;
