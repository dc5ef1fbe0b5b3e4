//! `smartfl run | sweep | check`.
//!
//! Exit codes: 0 on success, 1 for usage, configuration and I/O errors or
//! failed checks, 2 when training diverges.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::{parse_override, ExperimentConfig};
use super::metrics::write_metrics;
use super::run::run;
use crate::checks;
use crate::error::Result;

#[derive(Parser, Debug)]
#[command(name = "smartfl", version, about = "Federated-learning simulator with subspace aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment and write its metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics file; wins over the config file and SMARTFL_OUT_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `dotted.key=value` override; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run the configuration once per value of one parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted key, e.g. `aggregation.strategy` or `proxy.size`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        values: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the built-in invariant and property suite.
    Check,
}

/// Parses `args` (program name first) and executes; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Run { config, seed, out, set } => run_one(&config, seed, out.as_deref(), &set),
        Command::Sweep {
            config,
            param,
            values,
            seed,
        } => sweep(&config, &param, &values, seed),
        Command::Check => return check(),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load(path: &Path, seed: Option<u64>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load_with_overrides(path, overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let result = run(cfg)?;
    write_metrics(&result.records, out, cfg.format)?;
    println!(
        "{}: final accuracy {:.4}, best {:.4}, {} rounds",
        out.display(),
        result.final_accuracy(),
        result.best_accuracy(),
        cfg.rounds
    );
    Ok(())
}

fn run_one(path: &Path, seed: Option<u64>, out: Option<&Path>, set: &[String]) -> Result<()> {
    let overrides = set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    let cfg = load(path, seed, &overrides)?;
    execute(&cfg, &cfg.resolve_output(out))
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' }).collect()
}

/// `<stem>-<param>=<value>.<ext>` next to the base output.
fn sweep_path(base: &Path, param: &str, value: &str) -> PathBuf {
    let stem = base.file_stem().map_or("smartfl_metrics".into(), |s| s.to_string_lossy().into_owned());
    let ext = base.extension().map_or("csv".into(), |s| s.to_string_lossy().into_owned());
    base.with_file_name(format!("{stem}-{}={}.{ext}", sanitize(param), sanitize(value)))
}

fn sweep(path: &Path, param: &str, values: &[String], seed: Option<u64>) -> Result<()> {
    // Validate every grid point before spending time on any of them.
    let configs = values
        .iter()
        .map(|v| load(path, seed, &[(param.to_string(), v.clone())]).map(|c| (v, c)))
        .collect::<Result<Vec<_>>>()?;
    for (value, cfg) in configs {
        let out = sweep_path(&cfg.resolve_output(None), param, value);
        execute(&cfg, &out)?;
    }
    Ok(())
}

fn check() -> i32 {
    let outcomes = checks::run_all();
    let mut failed = 0;
    for o in &outcomes {
        println!("{} {:<28} {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
    i32::from(failed > 0)
}
