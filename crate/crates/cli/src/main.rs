//! `histgen`: synthesis, training, generation, evaluation, ablation and
//! fine-tuning from one config file.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use histgen::config::RunConfig;
use histgen::data::Split;
use histgen::experiment::{self, TaskType};
use histgen::model::Arm;
use histgen::HistGenError;

#[derive(Parser)]
#[command(name = "histgen", version, about = "WSI report generation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted synthetic corpus (report pairs plus task corpora)
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of WSI-report pairs
        #[arg(long)]
        num_wsis: Option<usize>,
        /// Feature dimension of the generated bags
        #[arg(long)]
        d_in: Option<usize>,
    },
    /// Train a report-generation model
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate reports for a split with a trained checkpoint
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Score a generations file with BLEU-1..4, METEOR and ROUGE-L
    EvalNlg {
        /// Generations JSON; defaults to <run_dir>/generations.json
        #[arg(long)]
        generations: Option<PathBuf>,
        /// Output CSV; defaults to nlg_metrics.csv next to the generations
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train Base, +CMC and +CMC+LGH and write the comparison table
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        /// Sweep the region size over 64, 96, 128, 256, 384 and 512 instead
        #[arg(long)]
        region_sweep: bool,
    },
    /// Fine-tune a slide classifier with Monte Carlo cross-validation
    FinetuneCls {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task: TaskArgs,
    },
    /// Fine-tune a discrete-time survival head with Monte Carlo cross-validation
    FinetuneSurv {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task: TaskArgs,
    },
    /// Print the resolved configuration as TOML
    Config {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// TOML (or .json) run configuration; built-in defaults when omitted
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Model arm: base, +cmc or +cmc+lgh
    #[arg(long)]
    arm: Option<Arm>,
}

#[derive(Args)]
struct TaskArgs {
    /// Labelled task manifest; defaults to <data_dir>/tasks/<task>/manifest.json
    #[arg(long)]
    task_manifest: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    freeze_encoder: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(d) = &self.data_dir {
            cfg.paths.data_dir = d.clone();
        }
        if let Some(d) = &self.run_dir {
            cfg.paths.run_dir = d.clone();
        }
        if let Some(c) = &self.checkpoint {
            cfg.paths.checkpoint = Some(c.clone());
        }
        if let Some(arm) = self.arm {
            cfg.model.arm = arm;
        }
        Ok(cfg.resolved()?)
    }
}

fn apply_task(cfg: &mut RunConfig, task: &TaskArgs) -> Result<()> {
    if let Some(p) = &task.task_manifest {
        cfg.paths.task_manifest = Some(p.clone());
    }
    if let Some(f) = task.folds {
        cfg.finetune.monte_carlo_folds = f;
    }
    cfg.finetune.freeze_encoder |= task.freeze_encoder;
    cfg.finetune.validate()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, num_wsis, d_in } => {
            let mut cfg = common.resolve()?;
            if let Some(n) = num_wsis {
                cfg.synth.num_wsis = n;
            }
            if let Some(d) = d_in {
                cfg.synth.d_in = d;
            }
            let s = experiment::synth(&cfg)?;
            println!("wrote {} pairs to {}", s.report_pairs, cfg.paths.data_dir.display());
        }
        Command::Train { common, epochs } => {
            let mut cfg = common.resolve()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let t = experiment::train_run(&cfg)?;
            let last = t.outcome.log.last().map_or(f64::NAN, |e| e.loss);
            println!(
                "trained {} epochs (final loss {last:.4}); kept epoch {}; checkpoint {}",
                t.outcome.log.len(),
                t.outcome.best_epoch,
                cfg.checkpoint_path().display()
            );
        }
        Command::Generate { common, split } => {
            let cfg = common.resolve()?;
            let g = experiment::generate_run(&cfg, split.into())?;
            println!("wrote {} generations to {}", g.len(), cfg.paths.run_dir.join("generations.json").display());
        }
        Command::EvalNlg { generations, out, common } => {
            let cfg = common.resolve()?;
            let gens = generations.unwrap_or_else(|| cfg.paths.run_dir.join("generations.json"));
            let out = out.unwrap_or_else(|| gens.with_file_name("nlg_metrics.csv"));
            let s = experiment::eval_nlg(&gens, &out)?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::Ablate { common, epochs, region_sweep } => {
            let mut cfg = common.resolve()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if region_sweep {
                experiment::region_sweep_run(&cfg)?;
                println!("wrote {}", cfg.paths.run_dir.join("region_sweep.csv").display());
            } else {
                experiment::ablate_run(&cfg)?;
                println!("wrote {}", cfg.paths.run_dir.join("ablation.csv").display());
            }
        }
        Command::FinetuneCls { common, task } => finetune(common, task, TaskType::Classification)?,
        Command::FinetuneSurv { common, task } => finetune(common, task, TaskType::Survival)?,
        Command::Config { common } => {
            let cfg = common.resolve()?;
            print!("{}", cfg.to_toml()?);
        }
    }
    Ok(())
}

fn finetune(common: Common, task: TaskArgs, kind: TaskType) -> Result<()> {
    let mut cfg = common.resolve()?;
    apply_task(&mut cfg, &task)?;
    let reports = experiment::finetune_run(&cfg, kind).context("fine-tuning failed")?;
    for r in &reports {
        let summary: Vec<String> = r
            .summary()
            .iter()
            .map(|(k, (m, s))| format!("{k} {m:.4} ± {s:.4}"))
            .collect();
        println!("{}: {}", r.method, summary.join(", "));
    }
    Ok(())
}

/// Exit status per failure class.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<HistGenError>()) {
        Some(HistGenError::Config(_)) => 2,
        Some(HistGenError::Io { .. }) => 3,
        Some(HistGenError::Divergence { .. }) => 4,
        Some(HistGenError::FeatureFile { .. } | HistGenError::Checkpoint { .. } | HistGenError::Json(_)) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Some errors already print their cause; show each text once.
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
