//! `gen-data`: synthetic datasets from a world spec.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use fairgen_core::io::write_jsonl;
use log::info;

use crate::manifest::{parent_dir, Recorder};
use crate::{load, Usage};

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("kind").required(true).args(["balanced", "skew", "embeddings"]))]
pub struct GenArgs {
    /// World spec (TOML).
    #[arg(long)]
    pub world: PathBuf,
    /// Output JSONL file; a manifest is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Balanced records: one sequence per group for each prompt.
    #[arg(long)]
    pub balanced: bool,
    /// Label distribution for a biased corpus, e.g. `0.9,0.1`.
    #[arg(long, value_delimiter = ',')]
    pub skew: Option<Vec<f64>>,
    /// Encoder embeddings with oracle labels.
    #[arg(long)]
    pub embeddings: bool,
    /// With `--skew`: add explicitly attributed records for the augmented
    /// prompts; `--per-group` then counts neutral records per prompt.
    #[arg(long, requires = "skew")]
    pub with_augmented: bool,
    /// Use the first N neutral prompts (default: all).
    #[arg(long)]
    pub prompts: Option<u32>,
    #[arg(long, default_value_t = 5)]
    pub per_group: usize,
    /// Record count for `--skew` without `--with-augmented`.
    #[arg(long, default_value_t = 5000)]
    pub total: usize,
    /// Embedding noise override.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, env = "FAIRGEN_SEED", default_value_t = 0)]
    pub seed: u64,
}

pub fn run(args: GenArgs) -> Result<()> {
    let mut rec = Recorder::start("gen-data", args.seed);
    let mut world = load::world(&args.world)?;
    rec.config(&args.world);
    let base = args.prompts.unwrap_or(world.base_prompts);
    if base == 0 || base > world.base_prompts {
        return Err(Usage(format!(
            "--prompts must be in 1..={}, got {base}",
            world.base_prompts
        ))
        .into());
    }
    let prompts: Vec<u32> = (0..base).map(|b| world.neutral_prompt(b)).collect();
    let count = if args.balanced {
        let data = world.gen_balanced_dataset(&prompts, args.per_group, args.seed)?;
        write_jsonl(&args.out, &data)?;
        data.len()
    } else if let Some(skew) = &args.skew {
        let data = if args.with_augmented {
            world.gen_pretrain_with_augmented(skew, args.per_group, args.seed)?
        } else {
            world.gen_biased_pretrain(&prompts, skew, args.total, args.seed)?
        };
        write_jsonl(&args.out, &data)?;
        data.len()
    } else {
        if let Some(sigma) = args.noise {
            world.embed_noise_sigma = sigma;
            world.validate().context("--noise")?;
        }
        let data = world.gen_embeddings(args.per_group, args.seed)?;
        write_jsonl(&args.out, &data)?;
        data.len()
    };
    info!("wrote {count} records to {}", args.out.display());
    rec.output(&args.out);
    rec.finish(&parent_dir(&args.out))
}
