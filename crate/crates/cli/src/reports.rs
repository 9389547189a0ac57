use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use kvsculpt_core::pipeline::HeadReport;
use kvsculpt_core::{AllocMode, BudgetPlan, EvalReport, Method, PilotReport};

#[derive(Debug, Serialize)]
pub struct CompressReport {
    pub method: Method,
    pub alloc: AllocMode,
    pub ratio: f64,
    /// `(mean k + m) / N` of the written cache.
    pub achieved_ratio: f64,
    pub retain: usize,
    pub context_len: usize,
    pub seed: u64,
    pub plan: BudgetPlan,
    pub pilots: Vec<PilotReport>,
    pub heads: Vec<HeadReport>,
    pub wall_ms: f64,
}

#[derive(Debug, Serialize)]
pub struct EvalRecord {
    /// Compression ratio of the evaluated cache.
    pub ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(flatten)]
    pub report: EvalReport,
}

pub fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => {
            std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))
        }
        None => {
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{text}").and_then(|()| out.flush()) {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                r => r.context("writing to stdout"),
            }
        }
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// `<prefix>.kl.csv` (token, kl) and `<prefix>.layers.csv` (layer, mse).
pub fn write_plot_data(prefix: &Path, report: &EvalReport) -> Result<(PathBuf, PathBuf)> {
    let with_suffix = |suffix: &str| {
        let mut name = prefix.as_os_str().to_owned();
        name.push(suffix);
        PathBuf::from(name)
    };
    let kl_path = with_suffix(".kl.csv");
    let mut w = csv::Writer::from_path(&kl_path)?;
    w.write_record(["token", "kl"])?;
    for (i, v) in report.kl_per_token.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    w.flush()?;
    let layer_path = with_suffix(".layers.csv");
    let mut w = csv::Writer::from_path(&layer_path)?;
    w.write_record(["layer", "hidden_mse"])?;
    for (i, v) in report.layer_mse_profile.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok((kl_path, layer_path))
}
