use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use motadual::experiment::{
    run_eval, run_export_features, run_finetune, run_gen_data, run_gen_triplets, run_grad_check,
    run_pretrain_inversion, run_retrieve, run_train_encoders, BackendKind, ExperimentConfig, Overrides, Profile,
    RunRecord, System,
};
use motadual::prompt_tuning::PromptMode;
use motadual::retrieval_eval::render_table;
use motadual::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_DEPENDENCY: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// MoTaDual desk-scale composed image retrieval experiments.
#[derive(Debug, Parser)]
#[command(name = "motadual", version)]
struct Cli {
    /// JSON config overlaid on the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// fashioniq-like, cirr-like, circo-like, genecis-like or desk-default.
    #[arg(long, global = true)]
    profile: Option<Profile>,
    /// LLM backend for gen-triplets.
    #[arg(long, global = true, default_value = "mock")]
    backend: BackendKind,
    /// Root directory for every artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic benchmark.
    GenData,
    /// Generate (reference, modification, target) triplets from the corpus.
    GenTriplets,
    /// Stage 0: contrastive pretraining of the toy dual encoder.
    TrainEncoders,
    /// Stage 1: text-only pretraining of the inversion network.
    PretrainInversion,
    /// Stage 2: prompt tuning, one state per mode.
    Finetune {
        /// Modes to train; defaults to those of the systems in eval.systems.
        #[arg(long = "mode")]
        modes: Vec<PromptMode>,
    },
    /// Metrics for every system in eval.systems.
    Eval,
    /// Top-K gallery ids for one reference image and modification.
    Retrieve {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        modification: String,
        #[arg(long, default_value = "dual")]
        system: System,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Double-precision end-to-end gradient audit.
    GradCheck,
    /// Composed query and gallery features as CSV.
    ExportFeatures,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Dependency(_) => EXIT_DEPENDENCY,
        Error::Numerics(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn print_record(record: &RunRecord) {
    println!(
        "{} finished; config {}; {} artifact(s)",
        record.command,
        &record.config_fingerprint[..12],
        record.artifacts.len()
    );
    for a in &record.artifacts {
        println!("  {}", a.display());
    }
}

fn loss(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn run(cli: Cli) -> Result<u8, Error> {
    let overrides = Overrides {
        profile: cli.profile,
        seed: cli.seed,
        root: cli.out.clone(),
    };
    let config = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    println!("{}", config.profile.batch_scaling());
    let record = match cli.command {
        Command::GenData => {
            let (s, record) = run_gen_data(&config)?;
            println!(
                "corpus {}  train {}  queries {}  gallery {}  targets {}",
                s.corpus, s.train, s.queries, s.gallery, s.target_groups
            );
            record
        }
        Command::GenTriplets => {
            let (s, record) = run_gen_triplets(&config, cli.backend)?;
            println!(
                "attempted {}  succeeded {}  skipped {}  retries {}",
                s.attempted, s.succeeded, s.skipped, s.retries
            );
            record
        }
        Command::TrainEncoders => {
            let (r, record) = run_train_encoders(&config)?;
            println!("loss {} -> {}", loss(r.first_loss), loss(r.last_loss));
            println!(
                "held-out caption->image recall@5: untrained {:.3}  trained {:.3}  ({} pairs)",
                r.recall_at_5_untrained, r.recall_at_5_trained, r.held_out_pairs
            );
            record
        }
        Command::PretrainInversion => {
            let (r, record) = run_pretrain_inversion(&config)?;
            println!("{} steps {}: loss {} -> {}", r.stage, r.steps, loss(r.first_loss), loss(r.last_loss));
            record
        }
        Command::Finetune { modes } => {
            let modes = if modes.is_empty() { config.eval.modes() } else { modes };
            let (reports, record) = run_finetune(&config, &modes)?;
            for r in reports {
                println!("{} steps {}: loss {} -> {}", r.stage, r.steps, loss(r.first_loss), loss(r.last_loss));
            }
            record
        }
        Command::Eval => {
            let (reports, record) = run_eval(&config)?;
            print!("{}", render_table(&reports));
            record
        }
        Command::Retrieve {
            image,
            modification,
            system,
            k,
        } => {
            let (out, record) = run_retrieve(&config, system, &image, &modification, k)?;
            if out.k < out.requested_k {
                println!("warning: k {} clamped to {}", out.requested_k, out.k);
            }
            println!("{:>4}  {:<10}  score", "rank", "id");
            for (i, e) in out.results.entries.iter().enumerate() {
                println!("{:>4}  {:<10}  {:.6}", i + 1, e.id, e.score);
            }
            record
        }
        Command::GradCheck => {
            let (report, record) = run_grad_check(&config)?;
            for m in &report.modes {
                println!(
                    "{:<13} max rel err {:.3e}  entries {}  frozen grad max {:.1e}  {}",
                    m.mode.as_str(),
                    m.max_relative_error,
                    m.entries_checked,
                    m.frozen_grad_max,
                    if m.passed { "ok" } else { "FAILED" }
                );
            }
            print_record(&record);
            return Ok(if report.passed { 0 } else { EXIT_NUMERIC });
        }
        Command::ExportFeatures => run_export_features(&config)?.1,
    };
    print_record(&record);
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
