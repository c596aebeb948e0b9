//! Command-line surface of the distillation laboratory.
//!
//! Subcommands mirror the pipeline stages: gen-data, pretrain-teacher,
//! distill, finetune, eval, ablate. Log verbosity comes from the XLKD_LOG
//! environment variable (error/warn/info/debug/trace).
//!
//! Exit codes: 0 success, 2 config error, 3 artifact error, 4 internal
//! invariant violation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xlkd::config::RunConfig;
use xlkd::pipeline;

#[derive(Parser)]
#[command(name = "xlkd", version, about = "desk-scale cross-lingual distillation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; the built-in desk-scale defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory root (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the stage seed of the invoked command.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Emit per-language corpus and task files plus a generation manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the desk-scale multilingual teacher by masked-token prediction.
    PretrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Distill a student from a teacher checkpoint.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint (directory or manifest path).
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Fine-tune a checkpointed model on the language-0 training set.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint to fine-tune.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Zero-shot evaluation of a fine-tuned checkpoint on all languages.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Fine-tuned model checkpoint.
        #[arg(long)]
        model: PathBuf,
    },
    /// Run every configured experiment arm across all seeds, with
    /// accuracy-vs-step curves for the initialization ablation.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common, seed_target: fn(&mut RunConfig, u64)) -> xlkd::Result<(RunConfig, PathBuf)> {
    let mut cfg = pipeline::load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        seed_target(&mut cfg, seed);
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok((cfg, out))
}

fn run() -> xlkd::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData { common } => {
            let (cfg, out) = load(common, |c, s| c.data.seed = s)?;
            pipeline::cmd_gen_data(&cfg, &out)?;
            println!("data written to {}", out.join("data").display());
        }
        Command::PretrainTeacher { common, resume } => {
            let (cfg, out) = load(common, |c, s| c.mlm.seed = s)?;
            let dir = pipeline::cmd_pretrain_teacher(&cfg, &out, *resume)?;
            println!("teacher checkpoints in {}", dir.display());
        }
        Command::Distill {
            common,
            teacher,
            resume,
        } => {
            let (cfg, out) = load(common, |c, s| c.distill.seed = s)?;
            let dir = pipeline::cmd_distill(&cfg, teacher, &out, *resume)?;
            println!("student checkpoints in {}", dir.display());
        }
        Command::Finetune {
            common,
            model,
            resume,
        } => {
            let (cfg, out) = load(common, |c, s| c.finetune.seed = s)?;
            let dir = pipeline::cmd_finetune(&cfg, model, &out, *resume)?;
            println!("fine-tuned checkpoint in {}", dir.display());
        }
        Command::Eval { common, model } => {
            let (cfg, out) = load(common, |c, s| c.data.seed = s)?;
            let report = pipeline::cmd_eval(&cfg, model, &out)?;
            for (lang, acc) in &report.per_language {
                println!("{lang}\t{acc:.4}");
            }
            println!("AVG\t{:.4}", report.avg);
            println!("XL-AVG\t{:.4}", report.cross_lingual_avg);
        }
        Command::Ablate { common } => {
            let (mut cfg, out) = load(common, |_, _| {})?;
            if let Some(seed) = common.seed {
                cfg.ablate.seeds = vec![seed];
            }
            let reports = pipeline::cmd_ablate(&cfg, &out)?;
            println!(
                "{} reports written under {}",
                reports.len(),
                out.join("ablate").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("XLKD_LOG", "warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
