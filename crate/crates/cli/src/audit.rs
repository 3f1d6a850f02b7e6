//! `audit`: bias localization, encoder probing and bias tables.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Subcommand, ValueEnum};
use fairgen_core::io::write_atomic;
use fairgen_core::metrics::{locate_lm_bias, LocateReport, Pooling};
use fairgen_core::probe::{train_probe, ProbeConfig, ProbeModel, ProbeReport};
use fairgen_core::seed::derive_seed;
use fairgen_core::trainer::{evaluate_bias, BiasReport};
use fairgen_core::world::Embedding;
use fairgen_core::{ARModel, WorldSpec};
use log::info;
use serde::{Deserialize, Serialize};

use crate::manifest::Recorder;
use crate::{load, Usage};

#[derive(Debug, Subcommand)]
pub enum AuditCmd {
    /// Compare neutral-prompt token distributions with each augmented prompt.
    Locate(LocateArgs),
    /// Fit a linear probe on encoder embeddings.
    Probe(ProbeArgs),
    /// Sample, label with the world oracle and tabulate RD.
    Bias(BiasArgs),
}

#[derive(Debug, Args)]
pub struct ModelInputs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "FAIRGEN_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PoolingArg {
    Unigram,
    PerPosition,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Unigram => Pooling::UnigramPooled,
            PoolingArg::PerPosition => Pooling::PerPosition,
        }
    }
}

#[derive(Debug, Args)]
pub struct LocateArgs {
    #[command(flatten)]
    pub io: ModelInputs,
    /// Base prompt ids to audit (default: all).
    #[arg(long, value_delimiter = ',')]
    pub prompts: Option<Vec<u32>>,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long, value_enum, default_value_t = PoolingArg::Unigram)]
    pub pooling: PoolingArg,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub split_ratio: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, env = "FAIRGEN_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    #[command(flatten)]
    pub io: ModelInputs,
    #[arg(long, default_value_t = 160)]
    pub samples: usize,
    /// Also tabulate every group's augmented prompts.
    #[arg(long)]
    pub augmented: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LocateFile {
    pub samples: usize,
    pub pooling: Pooling,
    pub flagged: usize,
    pub reports: Vec<LocateReport>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProbeFile {
    pub report: ProbeReport,
    pub probe: ProbeModel,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BiasTable {
    /// `neutral` or `aug:<label>`.
    pub set: String,
    pub report: BiasReport,
}

pub fn run(cmd: AuditCmd) -> Result<()> {
    match cmd {
        AuditCmd::Locate(a) => locate(a),
        AuditCmd::Probe(a) => probe(a),
        AuditCmd::Bias(a) => bias(a),
    }
}

fn open(io: &ModelInputs, rec: &mut Recorder) -> Result<(ARModel, WorldSpec)> {
    let world = load::world(&io.world)?;
    let (model, _) = load::checkpoint(&io.model)?;
    world
        .check_model(&model)
        .with_context(|| format!("{} vs {}", io.model.display(), io.world.display()))?;
    rec.config(&io.world);
    rec.input(&io.model);
    fs::create_dir_all(&io.out).with_context(|| format!("creating {}", io.out.display()))?;
    Ok((model, world))
}

fn write_json<T: Serialize>(path: &Path, value: &T, rec: &mut Recorder) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    rec.output(path);
    Ok(())
}

fn locate(a: LocateArgs) -> Result<()> {
    let mut rec = Recorder::start("audit locate", a.io.seed);
    let (model, world) = open(&a.io, &mut rec)?;
    let bases = a
        .prompts
        .clone()
        .unwrap_or_else(|| (0..world.base_prompts).collect());
    if let Some(b) = bases.iter().find(|&&b| b >= world.base_prompts) {
        return Err(Usage(format!("base prompt {b} out of range")).into());
    }
    let k = world.group_count();
    let pooling = Pooling::from(a.pooling);
    let reports = bases
        .iter()
        .map(|&b| {
            let aug: Vec<u32> = (0..k).map(|g| world.augmented_prompt(b, g)).collect();
            let seed = derive_seed(a.io.seed, &[b as u64]);
            locate_lm_bias(
                &model,
                &world,
                world.neutral_prompt(b),
                &aug,
                a.samples,
                pooling,
                seed,
            )
        })
        .collect::<fairgen_core::Result<Vec<_>>>()?;
    let flagged = reports.iter().filter(|r| r.flag).count();
    info!(
        "argmin-JSD matched the majority group on {flagged}/{} prompts",
        reports.len()
    );
    let file = LocateFile {
        samples: a.samples,
        pooling,
        flagged,
        reports,
    };
    write_json(&a.io.out.join("locate.json"), &file, &mut rec)?;
    rec.finish(&a.io.out)
}

fn probe(a: ProbeArgs) -> Result<()> {
    let mut rec = Recorder::start("audit probe", a.seed);
    let data: Vec<Embedding> = load::jsonl(&a.embeddings)?;
    rec.input(&a.embeddings);
    let cfg = ProbeConfig {
        split_ratio: a.split_ratio,
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
    };
    let (probe, report) = train_probe(&data, &cfg)?;
    info!(
        "probe accuracy {:.4}, macro F1 {:.4}",
        report.accuracy, report.f1
    );
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(
        &a.out.join("probe.json"),
        &ProbeFile { report, probe },
        &mut rec,
    )?;
    rec.finish(&a.out)
}

fn bias(a: BiasArgs) -> Result<()> {
    let mut rec = Recorder::start("audit bias", a.io.seed);
    let (model, world) = open(&a.io, &mut rec)?;
    let mut sets = vec![("neutral".to_string(), world.neutral_prompts())];
    if a.augmented {
        for (g, label) in world.vocab.demographic_labels.iter().enumerate() {
            let prompts = (0..world.base_prompts)
                .map(|b| world.augmented_prompt(b, g))
                .collect();
            sets.push((format!("aug:{label}"), prompts));
        }
    }
    let tables = sets
        .into_iter()
        .map(|(set, prompts)| {
            let report = evaluate_bias(&model, &world, &prompts, a.samples, a.io.seed)?;
            info!("{set}: macro RD {:.4}", report.macro_rd);
            Ok(BiasTable { set, report })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["set".to_string(), "prompt".to_string()];
    header.extend(
        world
            .vocab
            .demographic_labels
            .iter()
            .map(|l| format!("freq_{l}")),
    );
    header.push("rd".into());
    w.write_record(&header)?;
    for t in &tables {
        for p in &t.report.per_prompt {
            let mut row = vec![t.set.clone(), p.prompt.to_string()];
            row.extend(p.freqs.freqs.iter().map(f64::to_string));
            row.push(p.rd.to_string());
            w.write_record(&row)?;
        }
    }
    let csv_path = a.io.out.join("bias.csv");
    write_atomic(&csv_path, &w.into_inner().context("flushing bias table")?)?;
    rec.output(&csv_path);
    write_json(&a.io.out.join("bias.json"), &tables, &mut rec)?;
    rec.finish(&a.io.out)
}
