//! Side-by-side comparison of finished runs: one column per run.

use std::path::Path;

use dilu_core::sim::metrics::METRICS_FILE;
use dilu_core::sim::{FleetReport, MetricsReport};

use crate::{io_err, write_text, CliError, CliResult, FLEET_FILE};

pub const REPORT_FILE: &str = "report.csv";

const ROWS: [&str; 13] = [
    "scenario",
    "mode",
    "seed",
    "requests",
    "svr",
    "cold_starts",
    "saved_gpu_seconds",
    "gpu_seconds",
    "mean_gpus",
    "peak_gpus",
    "sm_fragmentation",
    "mem_fragmentation",
    "training_samples_per_s",
];

fn run_column(m: &MetricsReport) -> Vec<String> {
    vec![
        m.scenario.clone(),
        m.mode.label().to_string(),
        m.seed.to_string(),
        m.requests.to_string(),
        format!("{:.4}", m.svr),
        m.cold_starts.to_string(),
        format!("{:.1}", m.saved_gpu_seconds),
        format!("{:.1}", m.gpu_seconds),
        format!("{:.2}", m.mean_gpus),
        m.peak_gpus.to_string(),
        format!("{:.4}", m.sm_fragmentation),
        format!("{:.4}", m.mem_fragmentation),
        format!("{:.2}", m.training_samples_per_s),
    ]
}

fn fleet_column(r: &FleetReport) -> Vec<String> {
    let dash = || "-".to_string();
    vec![
        "fleet".to_string(),
        r.mode.label().to_string(),
        r.seed.to_string(),
        dash(),
        dash(),
        dash(),
        dash(),
        dash(),
        format!("{:.2}", r.mean_gpus),
        r.peak_gpus.to_string(),
        format!("{:.4}", r.sm_fragmentation),
        format!("{:.4}", r.mem_fragmentation),
        dash(),
    ]
}

fn load_column(dir: &Path) -> CliResult<Option<Vec<String>>> {
    let metrics = dir.join(METRICS_FILE);
    let fleet = dir.join(FLEET_FILE);
    if metrics.is_file() {
        let text = std::fs::read_to_string(&metrics).map_err(|e| io_err(&metrics, e))?;
        let m: MetricsReport =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", metrics.display())))?;
        Ok(Some(run_column(&m)))
    } else if fleet.is_file() {
        let text = std::fs::read_to_string(&fleet).map_err(|e| io_err(&fleet, e))?;
        let r: FleetReport =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", fleet.display())))?;
        Ok(Some(fleet_column(&r)))
    } else {
        Ok(None)
    }
}

pub fn cmd_report(runs: &[std::path::PathBuf], out: Option<&Path>) -> CliResult<()> {
    if runs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".into()));
    }
    let mut headers = Vec::new();
    let mut columns = Vec::new();
    for dir in runs {
        match load_column(dir)? {
            Some(c) => {
                headers.push(dir.display().to_string());
                columns.push(c);
            }
            None => eprintln!("warning: {} has no {METRICS_FILE} or {FLEET_FILE}; skipped", dir.display()),
        }
    }
    if columns.is_empty() {
        return Err(CliError::Usage("no readable runs".into()));
    }

    let label_w = ROWS.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = headers
        .iter()
        .zip(&columns)
        .map(|(h, c)| c.iter().map(String::len).chain([h.len()]).max().unwrap_or(0))
        .collect();
    let mut line = format!("{:<label_w$}", "metric");
    for (h, w) in headers.iter().zip(&widths) {
        line += &format!("  {h:>w$}");
    }
    println!("{line}");
    for (i, row) in ROWS.iter().enumerate() {
        let mut line = format!("{row:<label_w$}");
        for (c, w) in columns.iter().zip(&widths) {
            line += &format!("  {:>w$}", c[i]);
        }
        println!("{line}");
    }

    if let Some(path) = out {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["metric".to_string()];
        header.extend(headers.iter().cloned());
        w.write_record(&header).map_err(|e| io_err(path, e))?;
        for (i, row) in ROWS.iter().enumerate() {
            let mut rec = vec![row.to_string()];
            rec.extend(columns.iter().map(|c| c[i].clone()));
            w.write_record(&rec).map_err(|e| io_err(path, e))?;
        }
        let bytes = w.into_inner().map_err(|e| io_err(path, e))?;
        let target = if path.extension().is_some() { path.to_path_buf() } else { path.join(REPORT_FILE) };
        write_text(&target, &String::from_utf8_lossy(&bytes))?;
    }
    Ok(())
}
