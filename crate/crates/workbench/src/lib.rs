//! The `axvec` command line.

pub mod config;
pub mod det;
pub mod pipeline;

use std::path::PathBuf;

use axvec_core::model::{ArchConfig, Variant};
use axvec_core::{Error, Result};
use clap::{Parser, Subcommand};

use config::RunConfig;
use pipeline::{Layout, System};

#[derive(Debug, Parser)]
#[command(name = "axvec", version, about = "Adaptive x-vector speaker verification experiments")]
pub struct Cli {
    /// TOML experiment configuration; built-in defaults otherwise.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root directory.
    #[arg(long, global = true, env = "AXVEC_OUT")]
    pub out: Option<PathBuf>,
    /// Overrides the training and initialization seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the network variant.
    #[arg(long, global = true)]
    pub arch: Option<Variant>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training and evaluation corpora and the trial list.
    GenData,
    /// Train one network.
    Train {
        /// System directory name; defaults to the variant name.
        #[arg(long)]
        system: Option<String>,
    },
    /// Extract embeddings for both corpora with a trained network.
    Extract {
        #[arg(long)]
        system: String,
    },
    /// Fit the LDA and PLDA backend on training embeddings.
    BackendFit {
        #[arg(long)]
        system: String,
    },
    /// Score the evaluation trials.
    Score {
        #[arg(long)]
        system: String,
    },
    /// Average several score files trial by trial.
    Fuse {
        /// Score files to fuse; defaults to the configured fusion systems.
        #[arg(long, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compute EER, minDCF and actDCF tables.
    Evaluate {
        /// `name=path` score files; defaults to every system of the run.
        #[arg(long = "scores", num_args = 1..)]
        scores: Vec<String>,
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long)]
        utt2cond: Option<PathBuf>,
        /// Write `<prefix>.txt` and `<prefix>.kv` here instead of the output root.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write DET operating points and a DET plot.
    DetExport {
        #[arg(long = "scores", num_args = 1..)]
        scores: Vec<String>,
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Run the whole experiment end to end.
    Run,
    /// Train the filter-pool variant at several pool sizes.
    SweepPool {
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
}

impl Cli {
    /// Loads the configuration and applies command-line overrides.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(v) = self.arch {
            cfg.arch.variant = v;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        cfg.resolve()
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    let cfg = cli.resolve_config()?;
    let layout = Layout::new(cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("axvec-out")));
    let systems = |args: &[String]| -> Vec<System> {
        if args.is_empty() {
            pipeline::default_systems(&layout, &cfg)
        } else {
            args.iter().map(|a| System::parse(a)).collect()
        }
    };
    match &cli.command {
        Command::GenData => {
            pipeline::write_resolved_config(&layout, &cfg)?;
            pipeline::gen_data(&layout, &cfg)?;
        }
        Command::Train { system } => {
            let arch: &ArchConfig = &cfg.arch;
            let name = system.clone().unwrap_or_else(|| arch.variant.name().to_string());
            let s = pipeline::train_system(&layout, &name, arch, &cfg.train)?;
            print!("{}", s.to_kv());
        }
        Command::Extract { system } => pipeline::extract(&layout, system)?,
        Command::BackendFit { system } => pipeline::backend_fit(&layout, system, &cfg)?,
        Command::Score { system } => {
            pipeline::score(&layout, system)?;
        }
        Command::Fuse { inputs, output } => {
            let inputs = if inputs.is_empty() {
                cfg.run.fusion.iter().map(|v| layout.scores(v.name())).collect()
            } else {
                inputs.clone()
            };
            let output = output.clone().unwrap_or_else(|| layout.scores(pipeline::FUSION));
            pipeline::fuse(&inputs, &output)?;
        }
        Command::Evaluate {
            scores,
            trials,
            utt2cond,
            report,
        } => {
            let trials = trials.clone().unwrap_or_else(|| layout.trials());
            let utt2cond = utt2cond.clone().unwrap_or_else(|| layout.eval_data().join("utt2cond"));
            let prefix = report.clone().unwrap_or_else(|| layout.root.join("report"));
            let r = pipeline::evaluate(&systems(scores), &trials, &utt2cond, &cfg, Some(&prefix))?;
            print!("{}", r.to_text());
        }
        Command::DetExport { scores, trials, dir } => {
            let trials = trials.clone().unwrap_or_else(|| layout.trials());
            let dir = dir.clone().unwrap_or_else(|| layout.det_dir());
            pipeline::det_export(&systems(scores), &trials, &dir)?;
        }
        Command::Run => {
            let r = pipeline::run_all(&layout, &cfg)?;
            print!("{}", r.to_text());
        }
        Command::SweepPool { sizes } => {
            let sizes = if sizes.is_empty() {
                cfg.run.sweep_pool_sizes.clone()
            } else {
                sizes.clone()
            };
            print!("{}", pipeline::sweep_pool(&layout, &cfg, &sizes)?);
        }
    }
    Ok(())
}
