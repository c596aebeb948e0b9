//! Zero-shot cross-lingual evaluation, baseline arms, and ablations.
//!
//! Every arm shares the teacher, the task data, and the per-run seeds, so
//! cross-arm comparisons are paired. Reported claims at desk scale are
//! ordinal (arm orderings and delta signs), never the absolute percentages
//! of a full-scale system; report footers restate this.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compute::Graph;
use crate::config::{RunConfig, StudentInit};
use crate::data::{derive_seed, DataBundle, TaskExample};
use crate::distill::{
    build_mapping, frozen_parameter_set, DistillPlan, FreezePolicy, MappingStrategy,
};
use crate::error::{Error, Result};
use crate::model::{bind, classify, forward, AttnSource, EncoderModel};
use crate::train::{
    run_distill, run_finetune, FinetuneJob, MultilingualCorpus, NullObserver, StepLog, TrainJob,
};

const RANDOM_INIT_SALT: u64 = 0x5249_4e49;

// ── accuracy and reports ───────────────────────────────────────────────

/// Argmax-match fraction on a labeled set, dropout off, deterministic.
pub fn accuracy(
    model: &EncoderModel,
    examples: &[TaskExample],
    batch_size: usize,
    seq_len: usize,
) -> Result<f64> {
    if !model.has_classifier() {
        return Err(Error::Config(
            "accuracy requires a model with a classifier head".to_string(),
        ));
    }
    if examples.is_empty() {
        return Err(Error::Data("empty evaluation set".to_string()));
    }
    let batches = crate::data::batch_examples(examples, batch_size, seq_len, 0, 0, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut correct = 0usize;
    let frozen = std::collections::BTreeSet::new();
    for (batch, labels) in &batches {
        let mut g = Graph::new();
        let bound = bind(&mut g, model, false, &frozen);
        let trace = forward(&mut g, &bound, batch, false, &mut rng)?;
        let logits = classify(&mut g, &bound, &trace)?;
        let values = g.values(logits);
        let classes = model.config().num_classes;
        for (row, &label) in labels.iter().enumerate() {
            let slice = &values[row * classes..(row + 1) * classes];
            let mut best = 0usize;
            for c in 1..classes {
                if slice[c] > slice[best] {
                    best = c;
                }
            }
            if best as i64 == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Per-language accuracies plus the two averages: AVG over all languages,
/// cross-lingual AVG excluding the fine-tuning language (index 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arm: String,
    pub seed: u64,
    pub step: u64,
    pub per_language: Vec<(String, f64)>,
    pub avg: f64,
    pub cross_lingual_avg: f64,
}

impl EvalReport {
    pub fn from_accuracies(
        arm: &str,
        seed: u64,
        step: u64,
        per_language: Vec<(String, f64)>,
    ) -> Result<Self> {
        if per_language.is_empty() {
            return Err(Error::Data("report needs at least one language".to_string()));
        }
        let avg = per_language.iter().map(|(_, a)| a).sum::<f64>() / per_language.len() as f64;
        let cross: Vec<f64> = per_language.iter().skip(1).map(|&(_, a)| a).collect();
        let cross_lingual_avg = if cross.is_empty() {
            avg
        } else {
            cross.iter().sum::<f64>() / cross.len() as f64
        };
        Ok(EvalReport {
            arm: arm.to_string(),
            seed,
            step,
            per_language,
            avg,
            cross_lingual_avg,
        })
    }
}

/// Evaluate a fine-tuned model on every language's test set.
pub fn zero_shot_report(
    model: &EncoderModel,
    bundle: &DataBundle,
    batch_size: usize,
    arm: &str,
    seed: u64,
    step: u64,
) -> Result<EvalReport> {
    if bundle.test.len() != bundle.languages.len() || bundle.test.iter().any(Vec::is_empty) {
        return Err(Error::Data(
            "every language needs a non-empty test set".to_string(),
        ));
    }
    let mut per_language = Vec::with_capacity(bundle.languages.len());
    for (lang, test) in bundle.languages.iter().zip(&bundle.test) {
        let acc = accuracy(model, test, batch_size, bundle.seq_len)?;
        per_language.push((lang.lang_id().to_string(), acc));
    }
    EvalReport::from_accuracies(arm, seed, step, per_language)
}

// ── arms ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentArm {
    Teacher,
    Light,
    Drop,
    Uniform,
    RandomInit,
    NoFreeze,
}

impl ExperimentArm {
    pub const ALL: [ExperimentArm; 6] = [
        ExperimentArm::Teacher,
        ExperimentArm::Light,
        ExperimentArm::Drop,
        ExperimentArm::Uniform,
        ExperimentArm::RandomInit,
        ExperimentArm::NoFreeze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentArm::Teacher => "teacher",
            ExperimentArm::Light => "light",
            ExperimentArm::Drop => "drop",
            ExperimentArm::Uniform => "uniform",
            ExperimentArm::RandomInit => "random_init",
            ExperimentArm::NoFreeze => "no_freeze",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown experiment arm {name:?}")))
    }
}

/// Fully resolved per-arm pipeline settings. Arms are declared ablations of
/// `light`; the controlled-comparison property diffs these structs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmPipelineConfig {
    pub arm: String,
    pub seed: u64,
    pub uses_full_teacher: bool,
    pub init: StudentInit,
    pub distill: Option<ArmDistillConfig>,
    pub finetune: FinetuneJob,
    pub eval_batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmDistillConfig {
    pub mapping: MappingStrategy,
    pub attn_source: AttnSource,
    pub freeze: FreezePolicy,
    pub job: TrainJob,
}

/// Resolve what an arm does from the shared run configuration.
pub fn resolve_arm(arm: ExperimentArm, run_seed: u64, cfg: &RunConfig) -> ArmPipelineConfig {
    let mut distill_job = cfg.distill_job();
    distill_job.seed = derive_seed(distill_job.seed, run_seed);
    distill_job.checkpoint_every = None;

    let distill_with = |freeze: FreezePolicy, mapping: MappingStrategy| ArmDistillConfig {
        mapping,
        attn_source: cfg.model.attn_source,
        freeze,
        job: distill_job.clone(),
    };
    let (uses_full_teacher, init, distill, ft_freeze) = match arm {
        ExperimentArm::Teacher => (true, StudentInit::Teacher, None, FreezePolicy::None),
        ExperimentArm::Light => (
            false,
            StudentInit::Teacher,
            Some(distill_with(FreezePolicy::Embeddings, MappingStrategy::Top)),
            FreezePolicy::Embeddings,
        ),
        ExperimentArm::Drop => (
            false,
            StudentInit::Teacher,
            None,
            FreezePolicy::Embeddings,
        ),
        ExperimentArm::Uniform => (
            false,
            StudentInit::Teacher,
            Some(distill_with(
                FreezePolicy::Embeddings,
                MappingStrategy::Uniform,
            )),
            FreezePolicy::Embeddings,
        ),
        ExperimentArm::RandomInit => (
            false,
            StudentInit::Random,
            Some(distill_with(FreezePolicy::None, MappingStrategy::Top)),
            FreezePolicy::None,
        ),
        ExperimentArm::NoFreeze => (
            false,
            StudentInit::Teacher,
            Some(distill_with(FreezePolicy::None, MappingStrategy::Top)),
            FreezePolicy::None,
        ),
    };
    let mut finetune = cfg.finetune_job(ft_freeze);
    finetune.seed = derive_seed(finetune.seed, run_seed);
    ArmPipelineConfig {
        arm: arm.name().to_string(),
        seed: run_seed,
        uses_full_teacher,
        init,
        distill,
        finetune,
        eval_batch_size: cfg.eval.batch_size,
    }
}

/// JSON paths at which two resolved arm configs differ (seed excluded);
/// used to verify the controlled-comparison property.
pub fn config_diff(a: &ArmPipelineConfig, b: &ArmPipelineConfig) -> Vec<String> {
    let va = serde_json::to_value(a).expect("arm config serializes");
    let vb = serde_json::to_value(b).expect("arm config serializes");
    let mut diffs = Vec::new();
    diff_values("", &va, &vb, &mut diffs);
    diffs
        .into_iter()
        .filter(|p| p != "/arm" && p != "/seed")
        .collect()
}

fn diff_values(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            let keys: std::collections::BTreeSet<&String> = ma.keys().chain(mb.keys()).collect();
            for k in keys {
                let sub = format!("{path}/{k}");
                match (ma.get(k), mb.get(k)) {
                    (Some(x), Some(y)) => diff_values(&sub, x, y, out),
                    _ => out.push(sub),
                }
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}

/// One step-indexed accuracy measurement of an arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub arm: String,
    pub seed: u64,
    pub step: u64,
    pub english: f64,
    pub cross_lingual_avg: f64,
}

/// Everything shared by the arms of one experiment grid.
pub struct ExperimentContext<'a> {
    pub cfg: &'a RunConfig,
    pub teacher: &'a EncoderModel,
    pub corpus: &'a MultilingualCorpus,
    pub bundle: &'a DataBundle,
}

pub struct ArmOutcome {
    pub resolved: ArmPipelineConfig,
    pub report: EvalReport,
    pub distill_logs: Vec<StepLog>,
    pub curve: Vec<CurvePoint>,
}

fn finetune_and_report(
    model: &EncoderModel,
    ctx: &ExperimentContext,
    ft: &FinetuneJob,
    arm: &str,
    seed: u64,
    step: u64,
) -> Result<EvalReport> {
    let tuned = run_finetune(model, &ctx.bundle.train[0], ft)?;
    zero_shot_report(
        &tuned.model,
        ctx.bundle,
        ctx.cfg.eval.batch_size,
        arm,
        seed,
        step,
    )
}

/// Execute one arm's pipeline: optional student initialization, optional
/// distillation, fine-tuning on language 0, zero-shot evaluation. With
/// `curve_every`, distillation snapshots are each fine-tuned and evaluated
/// to produce a step-indexed accuracy series (step 0 included).
pub fn run_arm(
    arm: ExperimentArm,
    run_seed: u64,
    ctx: &ExperimentContext,
    curve_every: Option<u64>,
) -> Result<ArmOutcome> {
    let resolved = resolve_arm(arm, run_seed, ctx.cfg);
    let student_cfg = ctx.cfg.student_model_config();

    let base = if resolved.uses_full_teacher {
        ctx.teacher.clone()
    } else {
        match resolved.init {
            StudentInit::Teacher => crate::distill::init_student_from_teacher(
                ctx.teacher,
                student_cfg.num_layers,
            )?,
            StudentInit::Random => EncoderModel::init_random(
                &student_cfg,
                derive_seed(run_seed, RANDOM_INIT_SALT),
            )?,
        }
    };

    let mut distill_logs = Vec::new();
    let mut curve = Vec::new();
    let (final_model, final_step) = match &resolved.distill {
        Some(dc) => {
            let plan = DistillPlan::new(
                build_mapping(
                    dc.mapping,
                    student_cfg.num_layers,
                    ctx.teacher.config().num_layers,
                )?,
                dc.attn_source,
                frozen_parameter_set(&base, dc.freeze),
            );
            let out = run_distill(
                ctx.teacher,
                &base,
                &plan,
                ctx.corpus,
                &dc.job,
                None,
                curve_every,
                &mut NullObserver,
            )?;
            distill_logs = out.logs;
            for (step, snapshot) in &out.snapshots {
                let report = finetune_and_report(
                    snapshot,
                    ctx,
                    &resolved.finetune,
                    resolved.arm.as_str(),
                    run_seed,
                    *step,
                )?;
                curve.push(CurvePoint {
                    arm: resolved.arm.clone(),
                    seed: run_seed,
                    step: *step,
                    english: report.per_language[0].1,
                    cross_lingual_avg: report.cross_lingual_avg,
                });
            }
            (out.model, dc.job.schedule.total_steps)
        }
        None => (base, 0),
    };

    let report = finetune_and_report(
        &final_model,
        ctx,
        &resolved.finetune,
        resolved.arm.as_str(),
        run_seed,
        final_step,
    )?;
    Ok(ArmOutcome {
        resolved,
        report,
        distill_logs,
        curve,
    })
}

/// Run the full (arm x seed) grid, curves enabled for the named arms. Arms
/// run in parallel; outputs are ordered (arm, seed) regardless of timing.
pub fn run_grid(
    ctx: &ExperimentContext,
    arms: &[ExperimentArm],
    seeds: &[u64],
    curve_arms: &[ExperimentArm],
    curve_every: u64,
) -> Result<Vec<ArmOutcome>> {
    let mut jobs = Vec::new();
    for &arm in arms {
        for &seed in seeds {
            let curves = curve_arms.contains(&arm);
            jobs.push((arm, seed, curves));
        }
    }
    jobs.par_iter()
        .map(|&(arm, seed, curves)| {
            run_arm(arm, seed, ctx, if curves { Some(curve_every) } else { None })
        })
        .collect()
}

// ── aggregation and tables ─────────────────────────────────────────────

pub fn median(values: &mut Vec<f64>) -> f64 {
    assert!(!values.is_empty(), "median of empty set");
    values.sort_by(|a, b| a.partial_cmp(b).expect("no NaN accuracies"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median of per-seed paired differences of cross-lingual AVG between two
/// arms (a - b), pairing reports by seed.
pub fn median_paired_delta(reports: &[EvalReport], arm_a: &str, arm_b: &str) -> Result<f64> {
    let mut deltas = Vec::new();
    for ra in reports.iter().filter(|r| r.arm == arm_a) {
        let rb = reports
            .iter()
            .find(|r| r.arm == arm_b && r.seed == ra.seed)
            .ok_or_else(|| {
                Error::State(format!("no {arm_b} report for seed {} to pair with", ra.seed))
            })?;
        deltas.push(ra.cross_lingual_avg - rb.cross_lingual_avg);
    }
    if deltas.is_empty() {
        return Err(Error::State(format!("no reports for arm {arm_a}")));
    }
    Ok(median(&mut deltas))
}

/// Cell-wise median report of one arm across seeds.
pub fn median_report(reports: &[EvalReport], arm: &str) -> Result<EvalReport> {
    let of_arm: Vec<&EvalReport> = reports.iter().filter(|r| r.arm == arm).collect();
    if of_arm.is_empty() {
        return Err(Error::State(format!("no reports for arm {arm}")));
    }
    let langs = of_arm[0].per_language.len();
    let mut per_language = Vec::with_capacity(langs);
    for i in 0..langs {
        let name = of_arm[0].per_language[i].0.clone();
        let mut cells: Vec<f64> = of_arm.iter().map(|r| r.per_language[i].1).collect();
        per_language.push((name, median(&mut cells)));
    }
    EvalReport::from_accuracies(arm, 0, 0, per_language)
}

pub const REPORT_FOOTER: &str = "desk-scale ordinal analogs: arm orderings and delta signs are \
the claims; absolute values are not comparable to full-scale results";

fn format_table(title: &str, rows: &[&EvalReport]) -> String {
    let mut out = String::new();
    out.push_str(title);
    out.push('\n');
    let langs: Vec<&str> = rows[0]
        .per_language
        .iter()
        .map(|(n, _)| n.as_str())
        .collect();
    out.push_str(&format!("{:<12}", "model"));
    for l in &langs {
        out.push_str(&format!("{l:>8}"));
    }
    out.push_str(&format!("{:>8}{:>8}\n", "AVG", "XL-AVG"));
    for r in rows {
        out.push_str(&format!("{:<12}", r.arm));
        for (_, a) in &r.per_language {
            out.push_str(&format!("{:>8.3}", a));
        }
        out.push_str(&format!("{:>8.3}{:>8.3}\n", r.avg, r.cross_lingual_avg));
    }
    out
}

/// The two ablation tables (freezing; top vs uniform mapping) with
/// per-language and average accuracies, cell-wise medians over seeds.
pub fn ablation_tables(reports: &[EvalReport]) -> Result<String> {
    for required in ["teacher", "light", "no_freeze", "uniform"] {
        if !reports.iter().any(|r| r.arm == required) {
            return Err(Error::State(format!(
                "ablation tables need completed {required} reports"
            )));
        }
    }
    let teacher = median_report(reports, "teacher")?;
    let light = median_report(reports, "light")?;
    let no_freeze = median_report(reports, "no_freeze")?;
    let uniform = median_report(reports, "uniform")?;

    let mut out = String::new();
    out.push_str(&format_table(
        "Freezing ablation (zero-shot accuracy, per-seed median)",
        &[&teacher, &light, &no_freeze],
    ));
    out.push('\n');
    out.push_str(&format_table(
        "Layer-mapping ablation (zero-shot accuracy, per-seed median)",
        &[&teacher, &light, &uniform],
    ));
    out.push('\n');
    out.push_str(&format!("note: {REPORT_FOOTER}\n"));
    Ok(out)
}

// ── CSV emission ───────────────────────────────────────────────────────

/// Reports as CSV: header, one row per (arm, seed), footer comment.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    if let Some(first) = reports.first() {
        out.push_str("arm,seed,step");
        for (lang, _) in &first.per_language {
            out.push_str(&format!(",{lang}"));
        }
        out.push_str(",avg,xl_avg\n");
    }
    for r in reports {
        out.push_str(&format!("{},{},{}", r.arm, r.seed, r.step));
        for (_, a) in &r.per_language {
            out.push_str(&format!(",{a:.6}"));
        }
        out.push_str(&format!(",{:.6},{:.6}\n", r.avg, r.cross_lingual_avg));
    }
    out.push_str(&format!("# {REPORT_FOOTER}\n"));
    out
}

/// Accuracy-vs-step series as CSV for external plotting.
pub fn curves_to_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("arm,seed,step,english,xl_avg\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            p.arm, p.seed, p.step, p.english, p.cross_lingual_avg
        ));
    }
    out
}

/// Step logs as CSV (step, lr, loss).
pub fn logs_to_csv(logs: &[StepLog]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for l in logs {
        out.push_str(&format!("{},{},{}\n", l.step, l.lr, l.loss));
    }
    out
}

#[cfg(test)]
#[path = "eval_tests.rs"]
mod tests;
