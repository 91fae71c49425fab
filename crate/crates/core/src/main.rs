use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use glidesim::config::{self, ConfigError, ScenarioConfig};
use glidesim::output::{emit_summary, emit_timeseries, write_summary};
use glidesim::scenario::{compare, run_scenario, sweep, ScenarioError};
use glidesim::workload::CAMPAIGN_PRESETS;

#[derive(Parser)]
#[command(name = "glidesim", version, about = "Pilot overlay on spot cloud regions, simulated")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write timeseries.csv and summary.txt.
    Run {
        /// Config file, or the name of a built-in preset.
        #[arg(long)]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also run this scenario and report the speedup of --campaign against it.
        #[arg(long, requires = "campaign")]
        baseline: Option<String>,
        #[arg(long)]
        campaign: Option<String>,
    },
    /// Load and check a config without running it.
    Validate {
        #[arg(long)]
        config: String,
    },
    /// Run once per value of a scalar config parameter.
    Sweep {
        #[arg(long)]
        config: String,
        /// Dotted path, e.g. `regions.*.hazard_base`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List built-in scenario and campaign presets.
    Presets,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load_tree(spec: &str) -> Result<toml::Table, ConfigError> {
    let path = Path::new(spec);
    if !path.exists() && config::preset_names().any(|n| n == spec) {
        return config::expand_presets(config::parse_tree(&format!("preset = \"{spec}\""))?);
    }
    config::load_tree(path)
}

fn load(spec: &str) -> Result<ScenarioConfig, ConfigError> {
    config::from_tree(load_tree(spec)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Presets => {
            for name in config::preset_names() {
                println!("scenario {name}");
            }
            for name in CAMPAIGN_PRESETS {
                println!("campaign {name}");
            }
        }
        Command::Validate { config } => {
            let cfg = load(&config)?;
            println!(
                "ok: {} regions, {} VOs, {} campaigns, {} CEs, horizon {} s",
                cfg.regions.len(),
                cfg.vos.len(),
                cfg.campaigns.len(),
                cfg.ces.len(),
                cfg.horizon_seconds
            );
        }
        Command::Run {
            config,
            seed,
            out,
            baseline,
            campaign,
        } => {
            let cfg = load(&config)?;
            let mut result = run_scenario(&cfg, seed)?;
            if let (Some(b), Some(c)) = (baseline, campaign) {
                let base_cfg = load(&b)?;
                let base = run_scenario(&base_cfg, seed)?;
                let cmp = compare(&result.summary, &base.summary, &c).map_err(|e| Failure::Runtime(e.to_string()))?;
                result.summary.speedup = Some((b, cmp));
            }
            fs::create_dir_all(&out)?;
            emit_timeseries(&result.layout, &result.series, &out.join("timeseries.csv"))?;
            emit_summary(&result.summary, &out.join("summary.txt"))?;
            if cfg.output.decision_trace {
                result
                    .trace
                    .write_csv(std::io::BufWriter::new(fs::File::create(out.join("decisions.csv"))?))?;
            }
            write_summary(&result.summary, std::io::stdout().lock())?;
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => {
            let tree = load_tree(&config)?;
            let values = values
                .iter()
                .map(|v| config::parse_scalar(v.trim()))
                .collect::<Result<Vec<_>, _>>()?;
            let rows = sweep(&tree, &param, &values)?;
            let mut table = String::from("value,seed,core_hours,total_cost,preemptions,efficiency_mean\n");
            for (v, s) in &rows {
                table.push_str(&format!(
                    "{},{},{:.3},{},{},{}\n",
                    v,
                    s.master_seed,
                    s.delivered_core_hours(),
                    s.total_cost,
                    s.preemptions,
                    s.efficiency_mean.map(|e| format!("{e:.6}")).unwrap_or_default()
                ));
            }
            print!("{table}");
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("sweep.csv"), table)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
