//! `mvcage`: simulate, fit, build eigensystems, score partitions and
//! regionalize from one JSON configuration.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use config::{merge, preset, unwrap_manifest, ExperimentConfig, Route, SourceSpec};
use pipeline::Run;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Usage(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical error: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl From<mvcage::Error> for CliError {
    fn from(e: mvcage::Error) -> Self {
        match &e {
            mvcage::Error::Io(_) | mvcage::Error::Parse(_) => CliError::Io(e.to_string()),
            e if e.is_numeric() => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "mvcage", version, about = "Aggregation error and regionalization for multivariate spatial data")]
struct Cli {
    /// JSON configuration (or a manifest from an earlier run).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in experiment: sim-matern-1d, county-style, argmin-bounded.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Simulate replications from the parametric source.
    Simulate,
    /// Run the Gibbs sampler and summarize the draws.
    Fit,
    /// Build the multivariate eigensystem for the configured route.
    Eigensystem,
    /// DMVCAGE of the configured partition.
    Cage,
    /// Ward candidates plus the stopping rule (or bounded argmin).
    Regionalize,
    /// Every stage, with a Markdown summary.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Eigensystem => "eigensystem",
            Command::Cage => "cage",
            Command::Regionalize => "regionalize",
            Command::Report => "report",
        }
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let file: Option<Value> = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            let v: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            Some(unwrap_manifest(v))
        }
        None => None,
    };
    let preset_name = cli
        .preset
        .clone()
        .or_else(|| file.as_ref().and_then(|v| v.get("preset")).and_then(Value::as_str).map(String::from));
    let mut doc = match &preset_name {
        Some(name) => preset(name)?,
        None => Value::Object(Default::default()),
    };
    if let Some(v) = file {
        merge(&mut doc, v);
    }
    if doc.as_object().is_some_and(|m| m.is_empty()) {
        return Err(CliError::Usage("give --config and/or --preset".into()));
    }
    if let Some(seed) = cli.seed {
        merge(&mut doc, serde_json::json!({ "seed": seed }));
    }
    if let Some(out) = &cli.out {
        merge(&mut doc, serde_json::json!({ "out": out }));
    }
    ExperimentConfig::from_value(doc)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let cfg = resolve(cli)?;
    let out = pipeline::default_out(&cfg, cli.command.name());
    let mut run = Run::new(cfg, out)?;
    match cli.command {
        Command::Simulate => {
            let data = run.cmd_simulate()?;
            println!(
                "simulated {} replications of {} processes on {} cells",
                data.replications(),
                data.n_proc(),
                data.n()
            );
        }
        Command::Fit => {
            let data = run.data()?;
            let draws = run.cmd_fit(&data)?;
            println!("retained {} draws", draws.draw_count());
        }
        Command::Eigensystem => {
            let data = run.data()?;
            let e = run.cmd_eigensystem(&data)?;
            println!("{} eigenpairs, leading eigenvalue {:.6}", e.sys.len(), e.sys.eigenvalues()[0]);
        }
        Command::Cage => {
            let data = run.data()?;
            let e = run.eigen(&data)?;
            let report = run.cmd_cage(&e)?;
            println!("{} units, total DMVCAGE {}", report.unit_count(), report.total);
        }
        Command::Regionalize => {
            let data = run.data()?;
            let e = run.eigen(&data)?;
            let r = run.cmd_regionalize(&data, &e)?;
            println!("selected j = {} ({} units), stop: {:?}", r.selected_j, r.partition.unit_count(), r.stop);
        }
        Command::Report => report(&mut run)?,
    }
    run.finish(cli.command.name())?;
    println!("outputs in {}", run.out.display());
    Ok(())
}

fn report(run: &mut Run) -> Result<(), CliError> {
    let data = if matches!(run.cfg.source, SourceSpec::Parametric { .. }) { run.cmd_simulate()? } else { run.data()? };
    let mut lines = vec![
        "# mvcage report".to_string(),
        String::new(),
        format!("- preset: {}", run.cfg.preset.as_deref().unwrap_or("none")),
        format!("- seed: {}", run.cfg.seed),
        format!("- cells: {}, processes: {}, replications: {}", data.n(), data.n_proc(), data.replications()),
    ];
    if run.cfg.route == Route::PosteriorEof {
        let draws = run.cmd_fit(&data)?;
        let s = draws.summary();
        lines.push(format!("- retained draws: {}; posterior mean σ²: {:?}", s.draws, s.sigma2_mean));
    }
    let e = run.cmd_eigensystem(&data)?;
    lines.push(format!(
        "- eigenpairs: {}; leading eigenvalues: {:?}",
        e.sys.len(),
        &e.sys.eigenvalues()[..e.sys.len().min(5)]
    ));
    let cage = run.cmd_cage(&e)?;
    lines.push(format!("- configured partition: {} units, total DMVCAGE {:.6}", cage.unit_count(), cage.total));
    let r = run.cmd_regionalize(&data, &e)?;
    let sel = r.trace.iter().find(|t| t.j == r.selected_j).map(|t| t.total).unwrap_or(f64::NAN);
    lines.push(format!(
        "- regionalization: j = {}, {} units, stop {:?}, total DMVCAGE {:.6}",
        r.selected_j,
        r.partition.unit_count(),
        r.stop,
        sel
    ));
    run.write_report(&lines)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mvcage: {e}");
            ExitCode::from(e.code())
        }
    }
}
