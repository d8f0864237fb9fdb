use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use purify_cli::pipeline::{read_history, Tag};
use purify_cli::{sweep, Axis, ExperimentConfig, Pipeline, RunStatus, Stage, StageError};
use purify_core::Classifier;
use serde_json::json;

#[derive(Parser)]
#[command(name = "purify", version, about = "Backdoor injection, trigger recovery and unlearning experiments")]
struct Cli {
    /// TOML experiment configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed for every stage (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted-path override such as `unlearn.beta=10`; repeatable, applied in order.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the never-poisoned twin.
    TrainVictim,
    /// Poison the training subset and train the backdoored victim.
    Poison,
    /// Recover candidate triggers from the victim and export them as PGM images.
    Recover,
    /// Unlearn the recovered triggers and run the fine-tuning baseline.
    Unlearn,
    /// Evaluate a checkpoint on the evaluation split, or build the full report when no model is given.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run every stage and emit the report, tables, traces and trigger images.
    Run,
    /// Run the pipeline once per grid point of an axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Print the resolved configuration.
    Config,
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("JSON values always serialize"));
}

fn execute(cli: &Cli) -> Result<(), StageError> {
    let cfg = load_config(cli).stage(Stage::Config)?;
    let p = Pipeline::new(cfg.clone());
    match &cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml().stage(Stage::Config)?);
        }
        Command::TrainVictim => {
            let twin = p.clean_twin()?;
            let m = p.evaluate(&twin.model)?;
            let history = read_history(&twin.path).stage(Stage::TrainVictim)?;
            print(json!({"stage": "train-victim", "checkpoint": twin.path, "acc": m.acc, "asr": m.asr, "history": history}));
        }
        Command::Poison => {
            let victim = p.victim()?;
            let m = p.evaluate(&victim.model)?;
            let history = read_history(&victim.path).stage(Stage::Poison)?;
            print(json!({"stage": "poison", "checkpoint": victim.path, "acc": m.acc, "asr": m.asr, "history": history}));
        }
        Command::Recover => {
            let pool = p.pool()?;
            let dir = p.out_dir().join("triggers").join("recovered");
            let pgms = pool.write_pgms(&dir).stage(Stage::Emit)?;
            let entries: Vec<_> = pool
                .entries()
                .iter()
                .zip(&pgms)
                .map(|(e, f)| json!({"label": e.label, "threshold": e.threshold, "asr": e.asr, "pgm": f}))
                .collect();
            print(json!({"stage": "recover", "modal_label": pool.modal_label(), "entries": entries}));
        }
        Command::Unlearn => {
            let ft = p.finetuned()?;
            let ft_m = p.evaluate(&ft.model)?;
            let unlearned = match p.unlearned()? {
                None => json!(null),
                Some(u) => {
                    let m = p.evaluate(&u.purified.model)?;
                    json!({"checkpoint": u.purified.path, "acc": m.acc, "asr": m.asr,
                           "early_stopped": u.trace.early_stopped, "diverged": u.trace.diverged,
                           "records": u.trace.records.len()})
                }
            };
            print(json!({"stage": "unlearn", "unlearn": unlearned,
                         "fine_tune": {"checkpoint": ft.path, "acc": ft_m.acc, "asr": ft_m.asr}}));
        }
        Command::Eval { model: Some(path) } => {
            let model = Classifier::load(path).stage(Stage::Eval)?;
            let m = p.evaluate(&model)?;
            print(json!({"stage": "eval", "checkpoint": path, "acc": m.acc, "asr": m.asr}));
        }
        Command::Eval { model: None } | Command::Run => {
            let report = p.run()?;
            print(json!({"status": report.status, "rows": report.rows, "clean_twin": report.clean_twin,
                         "report": p.out_dir().join("report.json")}));
            if let Some(e) = report.error {
                return Err(StageError {
                    stage: e.stage,
                    error: anyhow::anyhow!(e.message),
                });
            }
            if report.status == RunStatus::NoTriggerRecovered {
                log::warn!("no trigger recovered; the model was reported as-is");
            }
        }
        Command::Sweep { axis } => {
            let rows = sweep::sweep(&cfg, *axis, p.out_dir()).stage(Stage::Emit)?;
            print(json!({"axis": axis.to_string(), "rows": rows,
                         "table": p.out_dir().join("tables").join(format!("sweep_{axis}.csv"))}));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {:#}", e.stage, e.error);
            ExitCode::FAILURE
        }
    }
}
