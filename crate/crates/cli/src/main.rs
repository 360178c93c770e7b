//! `stfuse`: simulate data, fit both model stages, or run a scenario study.

mod commands;
mod error;
mod manifest;
mod tables;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stfuse::blockagg::AggregationMethod;
use stfuse::simstudy::{Scale, ScenarioConfig};

use crate::commands::{read_blocks, read_bytes, Setup};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "stfuse", version, about = "Two-stage spatio-temporal exposure fusion and health modelling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one replicate's observations, counts and truths.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
    },
    /// Fit stage 1, and stage 2 when counts are present, to simulated files.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Directory holding monitors.csv, proxy.csv, covariate.csv and health.csv.
        #[arg(long)]
        data_dir: PathBuf,
        /// Replicate index keying the posterior draws.
        #[arg(long, default_value_t = 0)]
        replicate: usize,
        /// Skip stage 2; health.csv is then not read.
        #[arg(long)]
        stage1_only: bool,
    },
    /// Run every replicate of a scenario and write the metrics tables.
    Study {
        #[command(flatten)]
        common: Common,
        /// Suppress per-replicate progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Print a preset scenario configuration as TOML.
    Preset {
        label: String,
        #[arg(long)]
        desk_scale: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

impl MethodArg {
    fn methods(self) -> Vec<AggregationMethod> {
        match self {
            MethodArg::One => vec![AggregationMethod::AreaWeighted],
            MethodArg::Two => vec![AggregationMethod::CentroidMean],
            MethodArg::Both => AggregationMethod::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario configuration file (TOML).
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    config: Option<PathBuf>,
    /// Preset scenario label, A to L.
    #[arg(long)]
    scenario: Option<String>,
    /// Use the reduced desk-scale preset instead of the full design.
    #[arg(long, requires = "scenario")]
    desk_scale: bool,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Block aggregation method(s).
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Block polygons (GeoJSON, domain coordinates); defaults to the bundled layout.
    #[arg(long)]
    blocks: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

impl Common {
    fn setup(&self) -> CliResult<Setup> {
        let mut inputs = Vec::new();
        let mut config = match (&self.config, &self.scenario) {
            (Some(path), _) => {
                let bytes = read_bytes(path)?;
                let text = String::from_utf8(bytes.clone()).map_err(|_| CliError::data(path, "not UTF-8"))?;
                inputs.push(("config_file".to_string(), bytes));
                ScenarioConfig::from_toml(&text).map_err(|e| CliError::data(path, e))?
            }
            (None, Some(label)) => {
                let scale = if self.desk_scale { Scale::Desk } else { Scale::Full };
                ScenarioConfig::preset(label, scale)?
            }
            (None, None) => unreachable!("clap requires a configuration source"),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(method) = self.method {
            config.methods = method.methods();
        }
        config.validate()?;
        let blocks = match &self.blocks {
            Some(path) => {
                inputs.push(("blocks_file".to_string(), read_bytes(path)?));
                Some(read_blocks(path)?)
            }
            None => None,
        };
        Ok(Setup {
            config,
            config_path: self.config.clone(),
            blocks,
            inputs,
        })
    }

    fn init_threads(&self) -> CliResult<()> {
        if let Some(n) = self.threads {
            if n == 0 {
                return Err(CliError::Config("--threads must be at least 1".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Config(format!("cannot start {n} worker threads: {e}")))?;
        }
        Ok(())
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate { common, replicate } => {
            common.init_threads()?;
            commands::simulate(&common.setup()?, replicate, &common.out_dir)
        }
        Command::Fit {
            common,
            data_dir,
            replicate,
            stage1_only,
        } => {
            common.init_threads()?;
            commands::fit(&common.setup()?, &data_dir, replicate, stage1_only, &common.out_dir)
        }
        Command::Study { common, quiet } => {
            common.init_threads()?;
            commands::study(&common.setup()?, &common.out_dir, quiet)
        }
        Command::Preset { label, desk_scale } => {
            let scale = if desk_scale { Scale::Desk } else { Scale::Full };
            print!("{}", ScenarioConfig::preset(&label, scale)?.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
