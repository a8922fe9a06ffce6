//! `dilu`: profile functions, run simulations, sweep parameters and compare runs.

mod report;
mod sweep;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dilu_core::domain::FunctionSpec;
use dilu_core::perfmodel::ModelLibrary;
use dilu_core::profiler::{ProfileReport, Profiler};
use dilu_core::sim::{run, run_large_scale, BaselineMode, FleetSpec, Scenario, WorkloadPattern};

pub const PROFILE_FILE: &str = "profile.json";
pub const FLEET_FILE: &str = "fleet.json";

#[derive(Debug, Parser)]
#[command(name = "dilu", version, about = "Serverless GPU sharing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Search request/limit quotas and print trial counts.
    Profile {
        /// Model library JSON; defaults to the built-in profiles.
        #[arg(long)]
        models: Option<PathBuf>,
        /// JSON object mapping model name to SLO in ms.
        #[arg(long)]
        slo: Option<PathBuf>,
        /// Profile the functions of this scenario instead of one per model.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one scenario and write metrics and traces.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<String>,
        /// Treat the scenario file as a large-scale fleet specification.
        #[arg(long)]
        fleet: bool,
    },
    /// Run a scenario once per grid point along one axis.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        points: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated baseline modes; defaults to the scenario's mode.
        #[arg(long, value_delimiter = ',')]
        mode: Vec<String>,
        #[arg(long)]
        fleet: bool,
    },
    /// Compare finished run directories side by side.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Invariant(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Invariant(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Invariant(m) => write!(f, "invariant abort: {m}"),
            CliError::Io(m) => write!(f, "i/o: {m}"),
        }
    }
}

impl From<dilu_core::Error> for CliError {
    fn from(e: dilu_core::Error) -> Self {
        use dilu_core::Error;
        match e {
            Error::Invariant { .. } => CliError::Invariant(e.to_string()),
            Error::Io(_) | Error::Csv(_) => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> CliResult<T> {
    serde_json::from_str(text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn parse_mode(s: &str) -> CliResult<BaselineMode> {
    BaselineMode::parse(s).ok_or_else(|| {
        let known: Vec<&str> = BaselineMode::ALL.iter().map(|m| m.label()).collect();
        CliError::Usage(format!("unknown mode {s:?}; expected one of {}", known.join(", ")))
    })
}

/// Loads a scenario, resolving trace files relative to the scenario file.
pub fn load_scenario(path: &Path) -> CliResult<Scenario> {
    let text = read_text(path)?;
    let mut s: Scenario = parse_json(path, &text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for f in &mut s.functions {
        if let Some(WorkloadPattern::TraceFile { path: p }) = &mut f.workload {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    s.validate()?;
    Ok(s)
}

pub fn load_fleet(path: &Path) -> CliResult<FleetSpec> {
    let text = read_text(path)?;
    let spec: FleetSpec = parse_json(path, &text)?;
    spec.validate()?;
    Ok(spec)
}

fn cmd_profile(
    models: Option<&Path>,
    slo: Option<&Path>,
    scenario: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<()> {
    let (lib, specs) = match scenario {
        Some(p) => {
            let s = load_scenario(p)?;
            let specs = s.functions.iter().map(|f| f.spec.clone()).collect();
            (s.library()?, specs)
        }
        None => {
            let lib = match models {
                Some(p) => ModelLibrary::from_json(&read_text(p)?)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
                None => ModelLibrary::builtin(),
            };
            let slos: BTreeMap<String, f64> = match slo {
                Some(p) => parse_json(p, &read_text(p)?)?,
                None => BTreeMap::new(),
            };
            let specs = lib
                .iter()
                .map(|m| {
                    let slo_ms = slos.get(&m.name).copied().or(m.default_slo_ms).unwrap_or(f64::NAN);
                    FunctionSpec::inference(&m.name, &m.name, slo_ms, m.is_llm)
                })
                .collect::<Vec<_>>();
            (lib, specs)
        }
    };
    let report = Profiler::default().profile_all(&specs, &lib);
    print_profile(&report);
    if let Some(dir) = out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
        write_text(&dir.join(PROFILE_FILE), &(json + "\n"))?;
    }
    Ok(())
}

fn print_profile(report: &ProfileReport) {
    println!("{:<24} {:<22} {:<10} {:>6} {:>8} {:>8} {:>4}", "function", "model", "kind", "trials", "request", "limit", "ibs");
    for r in &report.functions {
        match (&r.quota, &r.error) {
            (Some(q), _) => println!(
                "{:<24} {:<22} {:<10} {:>6} {:>8.2} {:>8.2} {:>4}",
                r.function,
                r.model,
                r.kind,
                r.trial_count,
                q.request_smr.0,
                q.limit_smr.0,
                q.ibs.map_or("-".to_string(), |b| b.to_string())
            ),
            (None, err) => println!(
                "{:<24} {:<22} {:<10} error: {}",
                r.function,
                r.model,
                r.kind,
                err.as_deref().unwrap_or("unknown")
            ),
        }
    }
}

fn cmd_simulate(scenario: &Path, out: &Path, seed: Option<u64>, mode: Option<&str>, fleet: bool) -> CliResult<()> {
    let mode = mode.map(parse_mode).transpose()?;
    if fleet {
        let mut spec = load_fleet(scenario)?;
        if let Some(s) = seed {
            spec.seed = s;
        }
        if let Some(m) = mode {
            spec.mode = m;
        }
        let r = run_large_scale(&spec)?;
        let json = serde_json::to_string_pretty(&r).map_err(|e| CliError::Io(e.to_string()))?;
        write_text(&out.join(FLEET_FILE), &(json + "\n"))?;
        println!(
            "{}: {} placements, {} failed, mean GPUs {:.1}, peak {}, decisions {:.2?}",
            r.mode, r.placements, r.failed, r.mean_gpus, r.peak_gpus, r.decision_time
        );
        return Ok(());
    }
    let mut s = load_scenario(scenario)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    if let Some(m) = mode {
        s.mode = m;
    }
    let output = run(&s)?;
    output.write(out)?;
    let m = &output.metrics;
    println!(
        "{} [{}]: {} requests, svr {:.4}, cold starts {}, mean GPUs {:.2}, training {:.1} samples/s",
        m.scenario, m.mode, m.requests, m.svr, m.cold_starts, m.mean_gpus, m.training_samples_per_s
    );
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Profile {
            models,
            slo,
            scenario,
            out,
        } => cmd_profile(models.as_deref(), slo.as_deref(), scenario.as_deref(), out.as_deref()),
        Command::Simulate {
            scenario,
            out,
            seed,
            mode,
            fleet,
        } => cmd_simulate(&scenario, &out, seed, mode.as_deref(), fleet),
        Command::Sweep {
            scenario,
            out,
            axis,
            points,
            seed,
            mode,
            fleet,
        } => {
            let axis = sweep::Axis::parse(&axis)?;
            let modes = mode.iter().map(|m| parse_mode(m)).collect::<CliResult<Vec<_>>>()?;
            sweep::cmd_sweep(&sweep::SweepArgs {
                scenario,
                out,
                axis,
                points,
                seed,
                modes,
                fleet,
            })
        }
        Command::Report { runs, out } => report::cmd_report(&runs, out.as_deref()),
    }
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
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dilu: {e}");
            ExitCode::from(e.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_exit_codes() {
        let inv = dilu_core::Error::Invariant {
            at_ms: 5,
            detail: "x".into(),
        };
        assert_eq!(CliError::from(inv).code(), 2);
        let io = dilu_core::Error::Io(std::io::Error::other("disk"));
        assert_eq!(CliError::from(io).code(), 3);
        assert_eq!(CliError::from(dilu_core::Error::Invalid("bad".into())).code(), 1);
    }

    #[test]
    fn relative_trace_paths_follow_the_scenario() {
        let dir = std::env::temp_dir().join(format!("dilu-cli-trace-{}", std::process::id()));
        std::fs::create_dir_all(dir.join("traces")).unwrap();
        std::fs::write(dir.join("traces/t.csv"), "second,count\n0,2\n").unwrap();
        let text = r#"{"name":"t","seed":1,"duration_s":2.0,"nodes":1,"gpus_per_node":1,"functions":[
            {"id":"f","kind":{"type":"inference","slo_ms":100.0,"is_llm":false},"model":"resnet152-like",
             "workload":{"type":"trace_file","path":"traces/t.csv"}}]}"#;
        std::fs::write(dir.join("s.json"), text).unwrap();
        let s = load_scenario(&dir.join("s.json")).unwrap();
        match &s.functions[0].workload {
            Some(WorkloadPattern::TraceFile { path }) => assert_eq!(path, &dir.join("traces/t.csv")),
            other => panic!("{other:?}"),
        }
        assert_eq!(run(&s).unwrap().metrics.requests, 2);
        std::fs::remove_dir_all(&dir).ok();
    }
}
