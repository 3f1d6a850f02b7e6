//! `report`: markdown summary of run and audit directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use fairgen_core::io::write_atomic;
use serde::Deserialize;

use crate::audit::{BiasTable, LocateFile, ProbeFile};
use crate::manifest::{parent_dir, Recorder};

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directories written by `train` or `audit`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Also write the summary to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    epoch: usize,
    stage: String,
    nll_train: f64,
    nll_heldout: Option<f64>,
    rd: Option<f64>,
    bpo_loss: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    Ok(Some(
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
    ))
}

fn summarize(dir: &Path, out: &mut String) -> Result<()> {
    writeln!(out, "## {}\n", dir.display())?;
    let mut found = false;
    let csv_path = dir.join("run-report.csv");
    if csv_path.exists() {
        found = true;
        let mut r = csv::Reader::from_path(&csv_path)
            .with_context(|| format!("opening {}", csv_path.display()))?;
        writeln!(
            out,
            "| epoch | stage | nll_train | nll_heldout | rd | bpo_loss |"
        )?;
        writeln!(out, "|---|---|---|---|---|---|")?;
        for row in r.deserialize() {
            let row: CsvRow = row.with_context(|| format!("reading {}", csv_path.display()))?;
            writeln!(
                out,
                "| {} | {} | {:.4} | {} | {} | {} |",
                row.epoch,
                row.stage,
                row.nll_train,
                opt(row.nll_heldout),
                opt(row.rd),
                opt(row.bpo_loss)
            )?;
        }
        writeln!(out)?;
    }
    if let Some(tables) = read_json::<Vec<BiasTable>>(&dir.join("bias.json"))? {
        found = true;
        for t in tables {
            let freqs: Vec<String> = t
                .report
                .pooled
                .freqs
                .iter()
                .map(|f| format!("{f:.3}"))
                .collect();
            writeln!(
                out,
                "- bias `{}`: macro RD {:.4}, pooled freqs ({})",
                t.set,
                t.report.macro_rd,
                freqs.join(", ")
            )?;
        }
    }
    if let Some(l) = read_json::<LocateFile>(&dir.join("locate.json"))? {
        found = true;
        writeln!(
            out,
            "- locate: argmin-JSD equals the majority group on {}/{} prompts (M = {})",
            l.flagged,
            l.reports.len(),
            l.samples
        )?;
    }
    if let Some(p) = read_json::<ProbeFile>(&dir.join("probe.json"))? {
        found = true;
        let r = p.report;
        writeln!(
            out,
            "- probe: accuracy {:.4}, precision {:.4}, recall {:.4}, F1 {:.4} ({} test samples)",
            r.accuracy, r.precision, r.recall, r.f1, r.test_size
        )?;
    }
    if !found {
        writeln!(out, "(no reports found)")?;
    }
    writeln!(out)?;
    Ok(())
}

pub fn run(args: ReportArgs) -> Result<()> {
    let mut text = String::from("# fairgen report\n\n");
    for dir in &args.runs {
        summarize(dir, &mut text)?;
    }
    print!("{text}");
    if let Some(path) = &args.out {
        let mut rec = Recorder::start("report", 0);
        args.runs.iter().for_each(|d| rec.input(d));
        write_atomic(path, text.as_bytes())?;
        rec.output(path);
        rec.finish(&parent_dir(path))?;
    }
    Ok(())
}
