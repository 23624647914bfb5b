use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hicomex::commands::{cmd_eval, cmd_gradcheck, cmd_synth_gen, cmd_train, StageSel};
use hicomex::config::RunConfig;
use hicomex::model::Ablation;
use hicomex::{Error, Result};

#[derive(Parser)]
#[command(name = "hicomex", version, about = "Facial action unit detection with AU relation learning")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, env = "HICOMEX_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset and its manifest.
    SynthGen,
    /// Train stage 1, stage 2 or both.
    Train {
        #[arg(long, default_value = "both")]
        stage: StageSel,
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Manifest path, overriding `dataset` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print per-AU F1 and the macro average.
    Eval {
        /// Directory holding a stage checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train and test per subject-exclusive fold instead.
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and module.
    Gradcheck {
        /// Perturb the sigmoid backward rule, to confirm the check catches it.
        #[arg(long, hide = true)]
        corrupt_sigmoid: bool,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    if let Some(t) = cli.threads {
        cfg.optim.threads = t;
    }
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::SynthGen => {
            cfg.synthetic.resolve()?;
            let dir = cfg.out_dir.clone();
            cmd_synth_gen(&cfg, &dir, &mut stdout)?;
        }
        Command::Train { stage, ablation, data } => {
            if let Some(a) = ablation {
                cfg.model = cfg.model.with_ablation(a);
            }
            if data.is_some() {
                cfg.dataset = data;
            }
            cfg.validate()?;
            cmd_train(&cfg, stage, &mut stdout)?;
        }
        Command::Eval {
            checkpoint,
            folds,
            ablation,
            data,
        } => {
            if let Some(a) = ablation {
                cfg.model = cfg.model.with_ablation(a);
            }
            if data.is_some() {
                cfg.dataset = data;
            }
            cfg.validate()?;
            cmd_eval(&cfg, checkpoint.as_deref(), folds, &mut stdout)?;
        }
        Command::Gradcheck { corrupt_sigmoid } => {
            hicomex::tape::set_sigmoid_fault(corrupt_sigmoid);
            return Ok(cmd_gradcheck(&cfg, &mut stdout)?.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
