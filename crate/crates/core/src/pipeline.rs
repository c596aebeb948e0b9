//! Command entry points behind the CLI: data generation, teacher
//! pretraining, distillation, fine-tuning, evaluation, and the full
//! ablation grid. Every artifact directory receives the resolved config
//! and a code-version stamp; all randomness derives from config seeds.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{
    latest_stem, load_checkpoint, load_train_state, resolve_checkpoint_path, save_checkpoint,
    save_train_state, step_stem, RngState,
};
use crate::config::{RunConfig, StudentInit};
use crate::data::{self, derive_seed, generate_bundle, DataBundle};
use crate::distill::{build_mapping, frozen_parameter_set, init_student_from_teacher, DistillPlan};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_tables, curves_to_csv, logs_to_csv, reports_to_csv, run_grid, zero_shot_report,
    EvalReport, ExperimentArm, ExperimentContext,
};
use crate::model::EncoderModel;
use crate::train::{
    run_distill, run_finetune, run_mlm, MultilingualCorpus, ResumeState, StepLog, TrainJob,
    TrainObserver, TrainSnapshot,
};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Resolved config plus code-version stamp, written into every artifact
/// directory so a run can be reproduced from its outputs alone.
pub fn write_run_stamp(cfg: &RunConfig, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write_text(&dir.join("resolved_config.toml"), &cfg.to_toml()?)?;
    let stamp = serde_json::json!({
        "code_version": CODE_VERSION,
        "config_schema_version": cfg.schema_version,
    });
    write_text(
        &dir.join("stamp.json"),
        &format!("{}\n", serde_json::to_string_pretty(&stamp).expect("stamp serializes")),
    )
}

fn bundle_and_corpus(cfg: &RunConfig) -> Result<(DataBundle, MultilingualCorpus)> {
    let bundle = generate_bundle(&cfg.data_params())?;
    let corpus = MultilingualCorpus::new(bundle.corpora.clone(), bundle.seq_len)?;
    Ok((bundle, corpus))
}

// ── gen-data ───────────────────────────────────────────────────────────

/// Emit per-language corpus and train/dev/test task files plus a generation
/// manifest. Byte-identical across runs with the same config.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let bundle = generate_bundle(&cfg.data_params())?;
    let dir = out.join("data");
    ensure_dir(&dir)?;
    let mut files = Vec::new();
    for (i, lang) in bundle.languages.iter().enumerate() {
        let id = lang.lang_id();
        let corpus_name = format!("corpus_{id}.tsv");
        write_text(
            &dir.join(&corpus_name),
            &data::corpus_to_string(id, &bundle.corpora[i]),
        )?;
        files.push(corpus_name);
        for (split, examples) in [
            ("train", &bundle.train[i]),
            ("dev", &bundle.dev[i]),
            ("test", &bundle.test[i]),
        ] {
            let name = format!("task_{split}_{id}.tsv");
            write_text(&dir.join(&name), &data::task_to_string(id, split, examples))?;
            files.push(name);
        }
    }
    let manifest = serde_json::json!({
        "schema_version": data::DATA_SCHEMA_VERSION,
        "code_version": CODE_VERSION,
        "num_languages": bundle.languages.len(),
        "corpus_sentences_per_language": cfg.data.corpus_sentences_per_language,
        "task_sizes": {"train": cfg.data.task_train, "dev": cfg.data.task_dev, "test": cfg.data.task_test},
        "files": files,
    });
    write_text(
        &dir.join("gen_manifest.json"),
        &format!("{}\n", serde_json::to_string_pretty(&manifest).expect("manifest serializes")),
    )?;
    write_run_stamp(cfg, &dir)
}

// ── training persistence ───────────────────────────────────────────────

/// Observer that appends step logs to a CSV and writes checkpoints plus
/// optimizer sidecars at checkpoint boundaries.
struct PersistObserver {
    dir: PathBuf,
    log: File,
    weight_decay: f64,
}

impl PersistObserver {
    fn new(dir: &Path, resume: bool, weight_decay: f64) -> Result<Self> {
        ensure_dir(dir)?;
        let log_path = dir.join("steps.csv");
        let fresh = !resume || !log_path.exists();
        let mut opts = OpenOptions::new();
        if fresh {
            opts.write(true).create(true).truncate(true);
        } else {
            opts.append(true).create(true);
        }
        let mut log = opts
            .open(&log_path)
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;
        if fresh {
            log.write_all(b"step,lr,loss\n")
                .map_err(|e| Error::io(log_path.display().to_string(), e))?;
        }
        Ok(PersistObserver {
            dir: dir.to_path_buf(),
            log,
            weight_decay,
        })
    }
}

impl TrainObserver for PersistObserver {
    fn on_log(&mut self, log: &StepLog) -> Result<()> {
        self.log
            .write_all(format!("{},{},{}\n", log.step, log.lr, log.loss).as_bytes())
            .map_err(|e| Error::io(self.dir.display().to_string(), e))
    }

    fn on_checkpoint(&mut self, snap: &TrainSnapshot) -> Result<()> {
        let stem = step_stem(snap.step);
        let rng = RngState {
            seed: snap.rng_seed,
            word_pos: snap.rng_word_pos.to_string(),
        };
        save_checkpoint(&self.dir, &stem, snap.model, snap.step, Some(rng.clone()))?;
        save_train_state(
            &self.dir,
            &stem,
            snap.step,
            self.weight_decay,
            snap.optimizer,
            rng,
        )
    }
}

/// Load the latest checkpoint + train state of a directory for resumption.
fn load_resume(dir: &Path, job: &TrainJob) -> Result<Option<ResumeState>> {
    let stem = match latest_stem(dir)? {
        Some(s) => s,
        None => return Ok(None),
    };
    let ckpt = load_checkpoint(dir, &stem)?;
    let (optimizer, rng, state_step) = load_train_state(dir, &stem)?;
    if state_step != ckpt.step {
        return Err(Error::Checkpoint(format!(
            "checkpoint step {} disagrees with train state step {state_step}",
            ckpt.step
        )));
    }
    let expected_seed = crate::train::loop_rng_seed(job.seed);
    if rng.seed != expected_seed {
        return Err(Error::Checkpoint(
            "checkpoint was produced under a different seed; refusing to resume".to_string(),
        ));
    }
    let word_pos: u128 = rng
        .word_pos
        .parse()
        .map_err(|_| Error::Checkpoint("malformed rng word position".to_string()))?;
    Ok(Some(ResumeState {
        model: ckpt.model,
        optimizer,
        rng_word_pos: word_pos,
        step: ckpt.step,
    }))
}

// ── pretrain-teacher ───────────────────────────────────────────────────

/// Train (or resume) the desk-scale teacher by MLM. Returns the directory
/// holding the final checkpoint.
pub fn cmd_pretrain_teacher(cfg: &RunConfig, out: &Path, resume: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = out.join("teacher");
    let job = cfg.mlm_job();
    let resume_state = if resume { load_resume(&dir, &job)? } else { None };
    if let Some(state) = &resume_state {
        if state.step >= job.schedule.total_steps {
            return Ok(dir);
        }
    }
    let (_bundle, corpus) = bundle_and_corpus(cfg)?;
    let mut observer = PersistObserver::new(&dir, resume_state.is_some(), job.weight_decay)?;
    run_mlm(
        &cfg.teacher_model_config(),
        &corpus,
        &job,
        resume_state,
        &mut observer,
    )?;
    write_run_stamp(cfg, &dir)?;
    Ok(dir)
}

// ── distill ────────────────────────────────────────────────────────────

fn load_model(path: &Path) -> Result<(EncoderModel, u64)> {
    let (dir, stem) = resolve_checkpoint_path(path)?;
    let ckpt = load_checkpoint(&dir, &stem)?;
    Ok((ckpt.model, ckpt.step))
}

/// Distill a student from a teacher checkpoint per the config's distill
/// section. Returns the directory holding the student checkpoints.
pub fn cmd_distill(cfg: &RunConfig, teacher_path: &Path, out: &Path, resume: bool) -> Result<PathBuf> {
    distill_with_options(cfg, teacher_path, out, resume, None)
}

/// `cmd_distill` with an optional early stop, used to exercise
/// interruption-and-resume.
fn distill_with_options(
    cfg: &RunConfig,
    teacher_path: &Path,
    out: &Path,
    resume: bool,
    stop_after: Option<u64>,
) -> Result<PathBuf> {
    cfg.validate()?;
    let (teacher, _) = load_model(teacher_path)?;
    let dir = out.join("distill");
    let mut job = cfg.distill_job();
    job.stop_after = stop_after;
    let resume_state = if resume { load_resume(&dir, &job)? } else { None };
    if let Some(state) = &resume_state {
        if state.step >= job.schedule.total_steps {
            return Ok(dir);
        }
    }

    let student_cfg = cfg.student_model_config();
    let student = match cfg.distill.init {
        StudentInit::Teacher => init_student_from_teacher(&teacher, student_cfg.num_layers)?,
        StudentInit::Random => {
            EncoderModel::init_random(&student_cfg, derive_seed(cfg.distill.seed, 0x5249_4e49))?
        }
    };
    let plan = DistillPlan::new(
        build_mapping(
            cfg.distill.mapping,
            student_cfg.num_layers,
            teacher.config().num_layers,
        )?,
        cfg.model.attn_source,
        frozen_parameter_set(&student, cfg.distill.freeze),
    );
    let (_bundle, corpus) = bundle_and_corpus(cfg)?;
    let mut observer = PersistObserver::new(&dir, resume_state.is_some(), job.weight_decay)?;
    run_distill(
        &teacher,
        &student,
        &plan,
        &corpus,
        &job,
        resume_state,
        None,
        &mut observer,
    )?;
    write_run_stamp(cfg, &dir)?;
    Ok(dir)
}

// ── finetune ───────────────────────────────────────────────────────────

/// Fine-tune a checkpointed model on the language-0 training set and save
/// the result. Returns the directory holding the fine-tuned checkpoint.
pub fn cmd_finetune(cfg: &RunConfig, model_path: &Path, out: &Path, resume: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = out.join("finetune");
    let job = cfg.finetune_job(cfg.finetune.freeze);
    if resume {
        if let Some(stem) = latest_stem(&dir)? {
            let existing = load_checkpoint(&dir, &stem)?;
            let _ = existing;
            return Ok(dir);
        }
    }
    let (model, _) = load_model(model_path)?;
    let bundle = generate_bundle(&cfg.data_params())?;
    let output = run_finetune(&model, &bundle.train[0], &job)?;
    ensure_dir(&dir)?;
    let steps_taken = output.logs.last().map_or(0, |l| l.step);
    save_checkpoint(&dir, &step_stem(steps_taken), &output.model, steps_taken, None)?;
    write_text(&dir.join("steps.csv"), &logs_to_csv(&output.logs))?;
    write_run_stamp(cfg, &dir)?;
    Ok(dir)
}

// ── eval ───────────────────────────────────────────────────────────────

/// Zero-shot evaluation of a fine-tuned checkpoint over every language's
/// test set. Writes report.csv and report.txt; returns the report.
pub fn cmd_eval(cfg: &RunConfig, model_path: &Path, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let (model, step) = load_model(model_path)?;
    let bundle = generate_bundle(&cfg.data_params())?;
    let report = zero_shot_report(&model, &bundle, cfg.eval.batch_size, "eval", 0, step)?;
    let dir = out.join("eval");
    ensure_dir(&dir)?;
    write_text(&dir.join("report.csv"), &reports_to_csv(std::slice::from_ref(&report)))?;
    let mut txt = String::new();
    txt.push_str(&format!(
        "zero-shot accuracy of {} at step {}\n",
        model_path.display(),
        step
    ));
    for (lang, acc) in &report.per_language {
        txt.push_str(&format!("{lang:<8}{acc:>8.3}\n"));
    }
    txt.push_str(&format!(
        "{:<8}{:>8.3}\n{:<8}{:>8.3}\n",
        "AVG", report.avg, "XL-AVG", report.cross_lingual_avg
    ));
    txt.push_str(&format!("note: {}\n", crate::eval::REPORT_FOOTER));
    write_text(&dir.join("report.txt"), &txt)?;
    write_run_stamp(cfg, &dir)?;
    Ok(report)
}

// ── ablate ─────────────────────────────────────────────────────────────

/// Ensure a fully trained teacher exists under `out/teacher` (training or
/// resuming as needed) and return it.
pub fn ensure_teacher(cfg: &RunConfig, out: &Path) -> Result<EncoderModel> {
    let dir = cmd_pretrain_teacher(cfg, out, true)?;
    let stem = latest_stem(&dir)?
        .ok_or_else(|| Error::State("teacher training left no checkpoint".to_string()))?;
    let ckpt = load_checkpoint(&dir, &stem)?;
    if ckpt.step != cfg.mlm.total_steps {
        return Err(Error::State(format!(
            "teacher checkpoint is at step {} of {}",
            ckpt.step, cfg.mlm.total_steps
        )));
    }
    Ok(ckpt.model)
}

/// Run every configured arm across all configured seeds, with accuracy
/// curves for the initialization ablation (light and random_init arms).
/// Emits per-(arm, seed) directories plus grid-level summary, curves, and
/// ablation tables.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let teacher = ensure_teacher(cfg, out)?;
    let (bundle, corpus) = bundle_and_corpus(cfg)?;
    let ctx = ExperimentContext {
        cfg,
        teacher: &teacher,
        corpus: &corpus,
        bundle: &bundle,
    };
    let arms: Vec<ExperimentArm> = cfg
        .ablate
        .arms
        .iter()
        .map(|name| ExperimentArm::parse(name))
        .collect::<Result<_>>()?;
    let curve_arms: Vec<ExperimentArm> = [ExperimentArm::Light, ExperimentArm::RandomInit]
        .into_iter()
        .filter(|a| arms.contains(a))
        .collect();
    let outcomes = run_grid(&ctx, &arms, &cfg.ablate.seeds, &curve_arms, cfg.ablate.eval_every)?;

    let grid_dir = out.join("ablate");
    ensure_dir(&grid_dir)?;
    let mut reports = Vec::new();
    let mut curves = Vec::new();
    for outcome in &outcomes {
        let arm_dir = grid_dir
            .join(&outcome.resolved.arm)
            .join(format!("seed_{}", outcome.resolved.seed));
        ensure_dir(&arm_dir)?;
        write_text(
            &arm_dir.join("report.csv"),
            &reports_to_csv(std::slice::from_ref(&outcome.report)),
        )?;
        write_text(
            &arm_dir.join("resolved_config.json"),
            &format!(
                "{}\n",
                serde_json::to_string_pretty(&outcome.resolved).expect("arm config serializes")
            ),
        )?;
        if !outcome.distill_logs.is_empty() {
            write_text(&arm_dir.join("distill_log.csv"), &logs_to_csv(&outcome.distill_logs))?;
        }
        if !outcome.curve.is_empty() {
            write_text(&arm_dir.join("curve.csv"), &curves_to_csv(&outcome.curve))?;
        }
        reports.push(outcome.report.clone());
        curves.extend(outcome.curve.iter().cloned());
    }
    write_text(&grid_dir.join("summary.csv"), &reports_to_csv(&reports))?;
    write_text(&grid_dir.join("curves.csv"), &curves_to_csv(&curves))?;
    if ["teacher", "light", "no_freeze", "uniform"]
        .iter()
        .all(|a| reports.iter().any(|r| &r.arm == a))
    {
        write_text(&grid_dir.join("tables.txt"), &ablation_tables(&reports)?)?;
    }
    write_run_stamp(cfg, &grid_dir)?;
    Ok(reports)
}

/// Read a config file, or the default desk-scale config when no path is
/// given.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_toml(&read_text(p)?),
        None => {
            let cfg = RunConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

#[cfg(test)]
#[path = "pipeline_tests.rs"]
mod tests;
