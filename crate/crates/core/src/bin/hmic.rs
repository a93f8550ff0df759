use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hmic::config::{Overrides, RunConfig, ScoringMode};
use hmic::datagen::SynthSpec;
use hmic::evaluation::EvalReport;
use hmic::model::{Ablation, EpochLog};
use hmic::pipeline::{cmd_eval, cmd_generate, cmd_pipeline, cmd_score, cmd_train, ScoreOutcome};

#[derive(Parser)]
#[command(name = "hmic", version, about = "Hierarchical metadata constrained anomalous sound detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for training and the default corpus.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-clip stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, value_parser = ["agc", "dc"])]
    scoring: Option<String>,
    #[arg(long, global = true, value_parser = ["hmic", "domain_only", "attribute_only"])]
    ablation: Option<String>,
    /// False-positive-rate range of the partial AUC.
    #[arg(long = "pauc-p", global = true)]
    pauc_p: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus and its manifest.
    Generate {
        /// Synthetic corpus spec (TOML); overrides the config's spec path.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train per machine type and fit centres; writes the checkpoint.
    Train,
    /// Score the manifest's test clips.
    Score,
    /// Evaluate a scores file against the manifest.
    Eval,
    /// Run generate, train, score and eval in order.
    Pipeline {
        /// Synthetic corpus spec (TOML); overrides the config's spec path.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

fn load(global: &Global) -> hmic::Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        seed: global.seed,
        jobs: global.jobs,
        scoring: global.scoring.as_deref().map(str::parse::<ScoringMode>).transpose()?,
        ablation: global.ablation.as_deref().map(str::parse::<Ablation>).transpose()?,
        pauc_p: global.pauc_p,
    };
    cfg.apply(&overrides)?;
    Ok(cfg)
}

fn load_spec(cfg: &RunConfig, flag: Option<PathBuf>, seed: Option<u64>) -> hmic::Result<Option<SynthSpec>> {
    let Some(path) = flag.or_else(|| cfg.paths.synth_spec.clone()) else { return Ok(None) };
    let mut spec = SynthSpec::from_toml_str(&std::fs::read_to_string(&path)?)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(Some(spec))
}

fn print_epoch(machine: &str, ep: &EpochLog) {
    eprintln!(
        "{machine} epoch {:>3}  loss_id {:.4}  loss_ag {:.4}  loss_total {:.4}  lr {:.2e}",
        ep.epoch, ep.loss_id, ep.loss_ag, ep.loss_total, ep.lr
    );
}

fn print_report(report: &EvalReport) {
    let fmt = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{:.2}", 100.0 * v));
    for m in &report.machines {
        println!("{:<16} AUC {:>9}  pAUC {:>9}", m.machine_type, fmt(m.harmonic.auc), fmt(m.harmonic.pauc));
    }
    println!("{:<16} AUC {:>9}  pAUC {:>9}", "Total", fmt(report.total.auc), fmt(report.total.pauc));
}

fn report_failures(outcome: &ScoreOutcome) -> bool {
    for (clip, msg) in &outcome.meta.errors {
        eprintln!("error: {clip}: {msg}");
    }
    outcome.n_failed() == 0
}

fn run(cli: Cli) -> hmic::Result<bool> {
    let cfg = load(&cli.global)?;
    match cli.command {
        Command::Generate { spec } => {
            let entries = cmd_generate(&cfg, load_spec(&cfg, spec, cli.global.seed)?)?;
            println!("wrote {} clips to {}", entries.len(), cfg.paths.corpus.display());
            Ok(true)
        }
        Command::Train => {
            let out = cmd_train(&cfg, print_epoch)?;
            println!("checkpoint {} (config {})", cfg.paths.checkpoint.display(), out.checkpoint.digest_hex());
            Ok(true)
        }
        Command::Score => {
            let out = cmd_score(&cfg)?;
            println!("scored {} clips into {}", out.rows.len() - out.n_failed(), cfg.paths.scores.display());
            Ok(report_failures(&out))
        }
        Command::Eval => {
            print_report(&cmd_eval(&cfg)?);
            Ok(true)
        }
        Command::Pipeline { spec } => {
            let out = cmd_pipeline(&cfg, load_spec(&cfg, spec, cli.global.seed)?, print_epoch)?;
            print_report(&out.report);
            Ok(report_failures(&out.score))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
