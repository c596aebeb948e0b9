//! Optimization machinery: decoupled-weight-decay Adam honoring frozen
//! parameter sets, the linear warmup/decay schedule, and the three training
//! loops (teacher MLM pretraining, distillation, fine-tuning).
//!
//! Loops are deterministic functions of (configs, seeds, corpus). When
//! checkpointing is enabled, live state is rounded through f32 at every
//! checkpoint boundary so that an interrupted-and-resumed run reproduces
//! the uninterrupted run bit for bit.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{Graph, IGNORE_LABEL};
use crate::data::{derive_seed, sentences_to_batch, MASK_ID, NUM_SPECIAL};
use crate::distill::{DistillPlan, FreezePolicy};
use crate::error::{Error, Result};
use crate::model::{
    bind, classify, forward, mlm_logits, EncoderModel, ModelConfig, SequenceBatch,
};

const LOOP_SALT: u64 = 0x4c4f_4f50;
const INIT_SALT: u64 = 0x494e_4954;
const CLASSIFIER_SALT: u64 = 0x434c_5346;

/// Seed of the rng a step-based loop runs on, derived from the job seed.
/// Exposed so resume code can verify checkpoint/seed consistency.
pub fn loop_rng_seed(job_seed: u64) -> u64 {
    derive_seed(job_seed, LOOP_SALT)
}

// ── schedule ───────────────────────────────────────────────────────────

/// Linear warmup to `peak_lr` over `warmup_steps`, then linear decay to 0
/// at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.peak_lr <= 0.0 {
            return Err(Error::Config(format!(
                "peak_lr must be positive, got {}",
                self.peak_lr
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Learning rate at a step in [0, total_steps].
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Config(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        if step == self.total_steps {
            return Ok(0.0);
        }
        if step < self.warmup_steps {
            Ok(self.peak_lr * step as f64 / self.warmup_steps as f64)
        } else {
            Ok(self.peak_lr * (self.total_steps - step) as f64
                / (self.total_steps - self.warmup_steps) as f64)
        }
    }
}

// ── optimizer ──────────────────────────────────────────────────────────

/// Bias-corrected Adam with decoupled weight decay. Weight decay is skipped
/// for biases and layer-norm parameters; frozen parameters are untouched
/// and own no moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step_count: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gain"))
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> &IndexMap<String, (Vec<f64>, Vec<f64>)> {
        &self.moments
    }

    /// Restore optimizer state from a checkpointed snapshot.
    pub fn from_parts(
        weight_decay: f64,
        step_count: u64,
        moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
    ) -> Self {
        AdamW {
            step_count,
            moments,
            ..AdamW::new(weight_decay)
        }
    }

    /// Round all moment buffers through f32 (checkpoint precision).
    pub fn round_to_f32(&mut self) {
        for (m, v) in self.moments.values_mut() {
            for x in m.iter_mut().chain(v.iter_mut()) {
                *x = *x as f32 as f64;
            }
        }
    }

    /// One update over all non-frozen parameters. Every non-frozen
    /// parameter must have a gradient.
    pub fn step(
        &mut self,
        model: &mut EncoderModel,
        grads: &IndexMap<String, Vec<f64>>,
        lr: f64,
        frozen: &BTreeSet<String>,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);

        let names: Vec<String> = model.params().keys().cloned().collect();
        for name in names {
            if frozen.contains(&name) {
                continue;
            }
            let grad = grads.get(&name).ok_or_else(|| {
                Error::State(format!("missing gradient for non-frozen parameter {name}"))
            })?;
            let param = model.param_mut(&name).expect("name from model");
            let numel = param.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; numel], vec![0.0; numel]));
            let wd = if decays(&name) { self.weight_decay } else { 0.0 };
            for ((theta, &g), (m_i, v_i)) in param
                .values_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m_i = self.beta1 * *m_i + (1.0 - self.beta1) * g;
                *v_i = self.beta2 * *v_i + (1.0 - self.beta2) * g * g;
                let m_hat = *m_i / bc1;
                let v_hat = *v_i / bc2;
                let update = m_hat / (v_hat.sqrt() + self.eps) + wd * *theta;
                *theta -= lr * update;
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut IndexMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let sq_sum: f64 = grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq_sum.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Round every model parameter through f32, matching on-disk precision.
pub fn round_model_to_f32(model: &mut EncoderModel) {
    let names: Vec<String> = model.params().keys().cloned().collect();
    for name in names {
        let t = model.param_mut(&name).expect("name from model");
        for v in t.values_mut() {
            *v = *v as f32 as f64;
        }
    }
}

// ── MLM masking ────────────────────────────────────────────────────────

/// BERT 80/10/10 masking. Labels carry the original id at selected
/// positions and the ignore sentinel elsewhere. Special tokens and padded
/// positions are never selected; random replacements draw from the
/// non-special vocabulary.
pub fn mlm_mask(
    batch: &SequenceBatch,
    rng: &mut ChaCha8Rng,
    mask_rate: f64,
    vocab_size: usize,
) -> Result<(SequenceBatch, Vec<i64>)> {
    if !(0.0..=1.0).contains(&mask_rate) {
        return Err(Error::Config(format!(
            "mask_rate must be in [0, 1], got {mask_rate}"
        )));
    }
    if vocab_size <= NUM_SPECIAL {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} has no maskable tokens"
        )));
    }
    let mut tokens = batch.token_ids().to_vec();
    let mut labels = vec![IGNORE_LABEL; tokens.len()];
    for (pos, token) in tokens.iter_mut().enumerate() {
        if batch.mask()[pos] == 0 || *token < NUM_SPECIAL {
            continue;
        }
        if rng.gen::<f64>() >= mask_rate {
            continue;
        }
        labels[pos] = *token as i64;
        let roll: f64 = rng.gen();
        if roll < 0.8 {
            *token = MASK_ID;
        } else if roll < 0.9 {
            *token = rng.gen_range(NUM_SPECIAL..vocab_size);
        }
        // else: keep the original token
    }
    Ok((batch.replace_tokens(tokens)?, labels))
}

// ── jobs and loop plumbing ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Mlm,
    Distill,
    Finetune,
}

/// Step-based training job description shared by the MLM and distillation
/// loops; fine-tuning is epoch-based and carries its own fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub kind: JobKind,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub seed: u64,
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    /// Fraction of batches built as two-segment pairs (CLS a SEP b SEP)
    /// instead of single sentences.
    #[serde(default = "default_pair_fraction")]
    pub pair_fraction: f64,
    /// Halt after this step (still inside the schedule); used to simulate
    /// interruption for resume testing and for time-capped runs.
    #[serde(skip)]
    pub stop_after: Option<u64>,
}

fn default_pair_fraction() -> f64 {
    0.5
}

fn default_mask_rate() -> f64 {
    0.15
}

fn default_weight_decay() -> f64 {
    0.01
}

fn default_clip_norm() -> f64 {
    1.0
}

fn default_log_every() -> u64 {
    25
}

impl TrainJob {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".to_string()));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!(
                "mask_rate must be in [0, 1], got {}",
                self.mask_rate
            )));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".to_string()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config(
                "checkpoint_every must be positive when set".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.pair_fraction) {
            return Err(Error::Config(format!(
                "pair_fraction must be in [0, 1], got {}",
                self.pair_fraction
            )));
        }
        Ok(())
    }
}

/// Epoch-based fine-tuning job (constant learning rate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneJob {
    pub epochs: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub freeze: FreezePolicy,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
}

impl FinetuneJob {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.seq_len < 5 {
            return Err(Error::Config(format!(
                "invalid finetune job: epochs {}, batch_size {}, seq_len {}",
                self.epochs, self.batch_size, self.seq_len
            )));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One append-only log row: step, lr, loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Live training state offered to the persistence layer at checkpoint
/// boundaries (after the f32 round-through).
pub struct TrainSnapshot<'a> {
    pub step: u64,
    pub model: &'a EncoderModel,
    pub optimizer: &'a AdamW,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

/// Callbacks out of the training loops.
pub trait TrainObserver {
    fn on_log(&mut self, _log: &StepLog) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _snapshot: &TrainSnapshot) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct NullObserver;

impl TrainObserver for NullObserver {}

/// State needed to continue a step-based loop from a checkpoint.
pub struct ResumeState {
    pub model: EncoderModel,
    pub optimizer: AdamW,
    pub rng_word_pos: u128,
    pub step: u64,
}

/// Output of a training loop: final model, step logs, and periodic model
/// snapshots when requested.
pub struct LoopOutput {
    pub model: EncoderModel,
    pub logs: Vec<StepLog>,
    pub snapshots: Vec<(u64, EncoderModel)>,
}

/// Multilingual sentence corpus: per-language padded sentences.
pub struct MultilingualCorpus {
    per_language: Vec<Vec<Vec<usize>>>,
    seq_len: usize,
}

impl MultilingualCorpus {
    pub fn new(per_language: Vec<Vec<Vec<usize>>>, seq_len: usize) -> Result<Self> {
        if per_language.is_empty() || per_language.iter().any(|l| l.is_empty()) {
            return Err(Error::Data(
                "corpus must cover every configured language with at least one sentence"
                    .to_string(),
            ));
        }
        Ok(MultilingualCorpus {
            per_language,
            seq_len,
        })
    }

    pub fn num_languages(&self) -> usize {
        self.per_language.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn language(&self, i: usize) -> &[Vec<usize>] {
        &self.per_language[i]
    }

    /// Uniform language choice, then `batch_size` sequences with
    /// replacement from that language: either single sentences or, with
    /// probability `pair_fraction`, two-segment pairs.
    fn sample_batch(
        &self,
        batch_size: usize,
        pair_fraction: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<SequenceBatch> {
        let lang = rng.gen_range(0..self.per_language.len());
        let sentences = &self.per_language[lang];
        let pairs = pair_fraction > 0.0 && rng.gen::<f64>() < pair_fraction;
        if !pairs {
            let rows: Vec<&[usize]> = (0..batch_size)
                .map(|_| sentences[rng.gen_range(0..sentences.len())].as_slice())
                .collect();
            return sentences_to_batch(&rows, self.seq_len);
        }
        let mut tokens = Vec::with_capacity(batch_size * self.seq_len);
        let mut types = Vec::with_capacity(batch_size * self.seq_len);
        let mut mask = Vec::with_capacity(batch_size * self.seq_len);
        for _ in 0..batch_size {
            let a = &sentences[rng.gen_range(0..sentences.len())];
            let b = &sentences[rng.gen_range(0..sentences.len())];
            let (t, ty, m) = crate::data::join_segments(
                crate::data::sentence_body(a),
                crate::data::sentence_body(b),
                self.seq_len,
            )?;
            tokens.extend(t);
            types.extend(ty);
            mask.extend(m);
        }
        SequenceBatch::new(batch_size, self.seq_len, tokens, types, mask)
    }
}

struct StepLoop<'a> {
    job: &'a TrainJob,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    rng_seed: u64,
    logs: Vec<StepLog>,
    snapshots: Vec<(u64, EncoderModel)>,
    snapshot_every: Option<u64>,
}

impl<'a> StepLoop<'a> {
    fn new(job: &'a TrainJob, resume: &Option<ResumeState>, snapshot_every: Option<u64>) -> Self {
        let rng_seed = loop_rng_seed(job.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let optimizer = match resume {
            Some(r) => r.optimizer.clone(),
            None => AdamW::new(job.weight_decay),
        };
        if let Some(r) = resume {
            rng.set_word_pos(r.rng_word_pos);
        }
        StepLoop {
            job,
            optimizer,
            rng,
            rng_seed,
            logs: Vec::new(),
            snapshots: Vec::new(),
            snapshot_every,
        }
    }

    fn start_step(resume: &Option<ResumeState>) -> u64 {
        resume.as_ref().map_or(0, |r| r.step)
    }

    fn maybe_snapshot(&mut self, step: u64, model: &EncoderModel) {
        if let Some(every) = self.snapshot_every {
            if step % every == 0 || step == self.job.schedule.total_steps {
                self.snapshots.push((step, model.clone()));
            }
        }
    }

    /// Post-step bookkeeping: logging, checkpoint rounding, callbacks.
    fn after_step(
        &mut self,
        step_done: u64,
        loss: f64,
        lr: f64,
        model: &mut EncoderModel,
        observer: &mut dyn TrainObserver,
    ) -> Result<()> {
        let total = self.job.schedule.total_steps;
        if step_done % self.job.log_every == 0 || step_done == total {
            let log = StepLog {
                step: step_done,
                lr,
                loss,
            };
            self.logs.push(log);
            observer.on_log(&log)?;
        }
        let boundary = match self.job.checkpoint_every {
            Some(every) => step_done % every == 0 || step_done == total,
            None => step_done == total,
        };
        if boundary {
            round_model_to_f32(model);
            self.optimizer.round_to_f32();
            observer.on_checkpoint(&TrainSnapshot {
                step: step_done,
                model,
                optimizer: &self.optimizer,
                rng_seed: self.rng_seed,
                rng_word_pos: self.rng.get_word_pos(),
            })?;
        }
        self.maybe_snapshot(step_done, model);
        Ok(())
    }
}

// ── the three loops ────────────────────────────────────────────────────

/// Pretrain a fresh encoder by masked-token cross-entropy on the
/// multilingual corpus. Returns the trained teacher.
pub fn run_mlm(
    config: &ModelConfig,
    corpus: &MultilingualCorpus,
    job: &TrainJob,
    resume: Option<ResumeState>,
    observer: &mut dyn TrainObserver,
) -> Result<LoopOutput> {
    job.validate()?;
    config.validate()?;
    let mut model = match &resume {
        Some(r) => r.model.clone(),
        None => EncoderModel::init_random(config, derive_seed(job.seed, INIT_SALT))?,
    };
    let start = StepLoop::start_step(&resume);
    let mut lp = StepLoop::new(job, &resume, None);
    let frozen = BTreeSet::new();
    lp.maybe_snapshot(start, &model);

    let end = job.schedule.total_steps.min(job.stop_after.unwrap_or(u64::MAX));
    for step in start..end {
        let lr = job.schedule.lr_at((step + 1).min(job.schedule.total_steps))?;
        // deterministic resample until at least one position is selected
        let (masked, labels) = loop {
            let batch = corpus.sample_batch(job.batch_size, job.pair_fraction, &mut lp.rng)?;
            let (masked, labels) = mlm_mask(&batch, &mut lp.rng, job.mask_rate, config.vocab_size)?;
            if labels.iter().any(|&l| l != IGNORE_LABEL) {
                break (masked, labels);
            }
        };
        let mut g = Graph::new();
        let bound = bind(&mut g, &model, true, &frozen);
        let trace = forward(&mut g, &bound, &masked, true, &mut lp.rng)?;
        let logits = mlm_logits(&mut g, &bound, &trace)?;
        let loss_id = g.cross_entropy(logits, &labels)?;
        let loss = g.item(loss_id)?;
        g.backward(loss_id)?;
        let mut grads = bound.collect_grads(&g);
        clip_global_norm(&mut grads, job.clip_norm);
        lp.optimizer.step(&mut model, &grads, lr, &frozen)?;
        lp.after_step(step + 1, loss, lr, &mut model, observer)?;
    }
    Ok(LoopOutput {
        model,
        logs: lp.logs,
        snapshots: lp.snapshots,
    })
}

fn check_distill_compat(teacher: &EncoderModel, student: &EncoderModel) -> Result<()> {
    let t = teacher.config();
    let s = student.config();
    if t.hidden_size != s.hidden_size
        || t.num_heads != s.num_heads
        || t.vocab_size != s.vocab_size
        || t.max_seq_len != s.max_seq_len
    {
        return Err(Error::Config(format!(
            "teacher/student geometry incompatible: hidden {}/{}, heads {}/{}, vocab {}/{}, seq {}/{}",
            t.hidden_size,
            s.hidden_size,
            t.num_heads,
            s.num_heads,
            t.vocab_size,
            s.vocab_size,
            t.max_seq_len,
            s.max_seq_len
        )));
    }
    Ok(())
}

/// Evaluate the total distillation loss of a (teacher, student) pair on one
/// batch, no dropout, no gradients kept.
pub fn distill_loss_on_batch(
    teacher: &EncoderModel,
    student: &EncoderModel,
    plan: &DistillPlan,
    batch: &SequenceBatch,
) -> Result<f64> {
    check_distill_compat(teacher, student)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let none = BTreeSet::new();
    let bound_t = bind(&mut g, teacher, false, &none);
    let bound_s = bind(&mut g, student, false, &none);
    let trace_t = forward(&mut g, &bound_t, batch, false, &mut rng)?;
    let trace_s = forward(&mut g, &bound_s, batch, false, &mut rng)?;
    let loss = crate::distill::total_distill_loss(&mut g, &trace_s, &trace_t, plan)?;
    g.item(loss)
}

/// Transformer-layer distillation. The teacher runs gradient-disabled and
/// without dropout; the student trains under the plan's frozen set.
pub fn run_distill(
    teacher: &EncoderModel,
    student_init: &EncoderModel,
    plan: &DistillPlan,
    corpus: &MultilingualCorpus,
    job: &TrainJob,
    resume: Option<ResumeState>,
    snapshot_every: Option<u64>,
    observer: &mut dyn TrainObserver,
) -> Result<LoopOutput> {
    job.validate()?;
    check_distill_compat(teacher, student_init)?;
    plan.validate(student_init, teacher)?;

    let mut student = match &resume {
        Some(r) => r.model.clone(),
        None => student_init.clone(),
    };
    let start = StepLoop::start_step(&resume);
    let mut lp = StepLoop::new(job, &resume, snapshot_every);
    lp.maybe_snapshot(start, &student);

    let end = job.schedule.total_steps.min(job.stop_after.unwrap_or(u64::MAX));
    for step in start..end {
        let lr = job.schedule.lr_at((step + 1).min(job.schedule.total_steps))?;
        let batch = corpus.sample_batch(job.batch_size, job.pair_fraction, &mut lp.rng)?;
        let mut g = Graph::new();
        let none = BTreeSet::new();
        let bound_t = bind(&mut g, teacher, false, &none);
        let bound_s = bind(&mut g, &student, true, &plan.frozen);
        let trace_t = forward(&mut g, &bound_t, &batch, false, &mut lp.rng)?;
        let trace_s = forward(&mut g, &bound_s, &batch, true, &mut lp.rng)?;
        let loss_id = crate::distill::total_distill_loss(&mut g, &trace_s, &trace_t, plan)?;
        let loss = g.item(loss_id)?;
        g.backward(loss_id)?;
        let mut grads = bound_s.collect_grads(&g);
        clip_global_norm(&mut grads, job.clip_norm);
        lp.optimizer.step(&mut student, &grads, lr, &plan.frozen)?;
        lp.after_step(step + 1, loss, lr, &mut student, observer)?;
    }
    Ok(LoopOutput {
        model: student,
        logs: lp.logs,
        snapshots: lp.snapshots,
    })
}

/// Attach a classifier head and train cross-entropy for the configured
/// epochs at a constant learning rate. The job's freeze policy decides
/// whether embeddings stay frozen.
pub fn run_finetune(
    model: &EncoderModel,
    train_set: &[crate::data::TaskExample],
    job: &FinetuneJob,
) -> Result<LoopOutput> {
    job.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("fine-tuning set is empty".to_string()));
    }
    let num_classes = model.config().num_classes;
    for (i, ex) in train_set.iter().enumerate() {
        if ex.label.index() >= num_classes {
            return Err(Error::Data(format!(
                "example {i} has label {} outside {num_classes} classes",
                ex.label.index()
            )));
        }
    }

    let mut model = model.clone();
    model.attach_classifier(derive_seed(job.seed, CLASSIFIER_SALT));
    let frozen = crate::distill::frozen_parameter_set(&model, job.freeze);
    let mut optimizer = AdamW::new(job.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(job.seed, LOOP_SALT));
    let mut logs = Vec::new();
    let mut step = 0u64;

    for epoch in 0..job.epochs {
        let batches = crate::data::batch_examples(
            train_set,
            job.batch_size,
            job.seq_len,
            job.seed,
            epoch,
            true,
        )?;
        for (batch, labels) in &batches {
            let mut g = Graph::new();
            let bound = bind(&mut g, &model, true, &frozen);
            let trace = forward(&mut g, &bound, batch, true, &mut rng)?;
            let logits = classify(&mut g, &bound, &trace)?;
            let loss_id = g.cross_entropy(logits, labels)?;
            let loss = g.item(loss_id)?;
            g.backward(loss_id)?;
            let mut grads = bound.collect_grads(&g);
            clip_global_norm(&mut grads, job.clip_norm);
            optimizer.step(&mut model, &grads, job.lr, &frozen)?;
            step += 1;
            if step % job.log_every == 0 {
                logs.push(StepLog {
                    step,
                    lr: job.lr,
                    loss,
                });
            }
        }
    }
    round_model_to_f32(&mut model);
    Ok(LoopOutput {
        model,
        logs,
        snapshots: Vec::new(),
    })
}

#[cfg(test)]
#[path = "train_tests.rs"]
mod tests;
