//! `train`: one optimization stage on a JSONL dataset.

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use fairgen_core::io::Checkpoint;
use fairgen_core::trainer::{bpo_stage, sft_stage, EvalSet, RunReport};
use fairgen_core::world::GenRecord;
use fairgen_core::{BalancedRecord, TokenSequence};
use log::info;

use crate::manifest::Recorder;
use crate::{load, Usage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Sft,
    Bpo,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub stage: StageArg,
    /// Training config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// JSONL dataset: generated records for sft, balanced records for bpo.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to start from; required for bpo. Epoch counters carry over.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// World spec; enables held-out NLL and RD columns in the report and is
    /// needed to create a fresh model.
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, env = "FAIRGEN_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Overrides the epoch count of the selected stage.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Held-out records per group and prompt for evaluation.
    #[arg(long, default_value_t = 20)]
    pub heldout_per_prompt: usize,
    /// Validate inputs and exit without writing anything.
    #[arg(long)]
    pub dry_run: bool,
}

pub fn run(args: TrainArgs) -> Result<()> {
    let mut cfg = load::train_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(e) = args.epochs {
        match args.stage {
            StageArg::Sft => cfg.sft_epochs = e,
            StageArg::Bpo => cfg.bpo_epochs = e,
        }
    }
    cfg.validate().context("config after flag overrides")?;
    if args.stage == StageArg::Bpo && args.init.is_none() {
        return Err(Usage("the bpo stage needs --init <checkpoint>".into()).into());
    }
    let world = args.world.as_deref().map(load::world).transpose()?;
    let (mut model, progress) = match (&args.init, &world) {
        (Some(path), _) => load::checkpoint(path)?,
        (None, Some(w)) => (w.new_model(cfg.order)?, None),
        (None, None) => {
            return Err(Usage("a fresh sft run needs --world to size the model".into()).into())
        }
    };
    if let Some(w) = &world {
        w.check_model(&model)?;
    }
    let mut progress = progress.unwrap_or_default();
    let sft_data: Vec<(u32, TokenSequence)>;
    let bpo_data: Vec<BalancedRecord>;
    match args.stage {
        StageArg::Sft => {
            let recs: Vec<GenRecord> = load::jsonl(&args.data)?;
            sft_data = recs.into_iter().map(|r| (r.prompt_id, r.tokens)).collect();
            bpo_data = Vec::new();
            for (p, z) in &sft_data {
                model
                    .sequence_logprob(*p, z)
                    .with_context(|| format!("record for prompt {p}"))?;
            }
        }
        StageArg::Bpo => {
            bpo_data = load::jsonl(&args.data)?;
            sft_data = Vec::new();
            for r in &bpo_data {
                for z in &r.group_sequences {
                    model
                        .sequence_logprob(r.prompt_id, z)
                        .with_context(|| format!("record for prompt {}", r.prompt_id))?;
                }
            }
        }
    }
    if args.dry_run {
        info!("dry run: config, inputs and model are consistent");
        return Ok(());
    }

    let mut rec = Recorder::start(format!("train {:?}", args.stage).to_lowercase(), cfg.seed);
    rec.config(&args.config);
    rec.input(&args.data);
    if let Some(p) = &args.init {
        rec.input(p);
    }
    let eval = world
        .as_ref()
        .map(|w| EvalSet::from_world(w, w.neutral_prompts(), args.heldout_per_prompt, cfg.seed))
        .transpose()?;
    let report = match args.stage {
        StageArg::Sft => sft_stage(&mut model, &sft_data, &cfg, eval.as_ref(), &mut progress)?,
        StageArg::Bpo => bpo_stage(&mut model, &bpo_data, &cfg, eval.as_ref(), &mut progress)?,
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let ckpt_path = args.out.join("checkpoint.json");
    Checkpoint::from_model(&model, Some(progress)).save(&ckpt_path)?;
    let report_path = args.out.join("run-report.csv");
    RunReport::from_stages(&[&report], Some("checkpoint.json".into())).write_csv(&report_path)?;
    if let Some(last) = report.rows.last() {
        info!(
            "{} epoch {}: nll {:.4}, rd {}",
            last.stage.as_str(),
            last.epoch,
            last.nll_train,
            last.rd.map_or("-".into(), |r| format!("{r:.4}"))
        );
    }
    rec.output(&ckpt_path);
    rec.output(&report_path);
    rec.finish(&args.out)
}
