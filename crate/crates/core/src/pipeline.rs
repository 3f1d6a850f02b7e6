//! End-to-end experiment on a synthetic world: skewed pretraining corpus →
//! supervised finetuning → balanced preference optimization, with bias and
//! fidelity measured before and after stage 2.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::Progress;
use crate::model::{ARModel, TokenSequence};
use crate::seed::derive_seed;
use crate::trainer::{
    bpo_stage, content_nll, evaluate_bias, sft_stage, BiasReport, EvalSet, StageReport, TrainConfig,
};
use crate::world::{BalancedRecord, WorldSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub world: WorldSpec,
    /// Label distribution of the pretraining corpus for neutral prompts.
    pub skew: Vec<f64>,
    pub pretrain_per_prompt: usize,
    pub balanced_per_group: usize,
    pub heldout_per_prompt: usize,
    pub sft: TrainConfig,
    pub bpo: TrainConfig,
}

impl Scenario {
    /// Desk-scale defaults: 16 image tokens, two signal tokens per group, eight
    /// positions, twenty base prompts.
    pub fn desk(labels: Vec<String>, skew: Vec<f64>) -> Result<Self> {
        let world = WorldSpec::disjoint(labels, 16, 2, 8, 20)?;
        Ok(Self {
            world,
            skew,
            pretrain_per_prompt: 1000,
            balanced_per_group: 50,
            heldout_per_prompt: 20,
            sft: TrainConfig {
                lr: 1.0,
                sft_epochs: 10,
                ..TrainConfig::default()
            },
            bpo: TrainConfig {
                lr: 200.0,
                bpo_epochs: 2,
                ..TrainConfig::default()
            },
        })
    }

    pub fn pretrain_corpus(&self, seed: u64) -> Result<Vec<(u32, TokenSequence)>> {
        let prompts = self.world.neutral_prompts();
        Ok(self
            .world
            .gen_biased_pretrain(
                &prompts,
                &self.skew,
                self.pretrain_per_prompt * prompts.len(),
                derive_seed(seed, &[10]),
            )?
            .into_iter()
            .map(|r| (r.prompt_id, r.tokens))
            .collect())
    }

    pub fn balanced_dataset(&self, seed: u64) -> Result<Vec<BalancedRecord>> {
        self.world.gen_balanced_dataset(
            &self.world.neutral_prompts(),
            self.balanced_per_group,
            derive_seed(seed, &[11]),
        )
    }

    /// Runs both stages with every seed derived from `seed`.
    pub fn run(&self, seed: u64) -> Result<Outcome> {
        let world = &self.world;
        let prompts = world.neutral_prompts();
        let corpus = self.pretrain_corpus(seed)?;
        let balanced = self.balanced_dataset(seed)?;
        let eval = EvalSet::from_world(world, prompts.clone(), self.heldout_per_prompt, seed)?;
        let sft_cfg = TrainConfig {
            seed,
            ..self.sft.clone()
        };
        let bpo_cfg = TrainConfig {
            seed,
            ..self.bpo.clone()
        };
        let eval_seed = derive_seed(seed, &[12]);
        let n = sft_cfg.eval_samples_per_prompt;

        let mut progress = Progress::default();
        let mut model = world.new_model(sft_cfg.order)?;
        let sft_report = sft_stage(&mut model, &corpus, &sft_cfg, Some(&eval), &mut progress)?;
        let sft_model = model.clone();
        let sft_bias = evaluate_bias(&model, world, &prompts, n, eval_seed)?;
        let sft_nll = content_nll(&model, world, &eval.heldout)?;

        let bpo_report = bpo_stage(&mut model, &balanced, &bpo_cfg, Some(&eval), &mut progress)?;
        let bpo_bias = evaluate_bias(&model, world, &prompts, n, eval_seed)?;
        let bpo_nll = content_nll(&model, world, &eval.heldout)?;
        Ok(Outcome {
            sft_model,
            bpo_model: model,
            sft_report,
            bpo_report,
            sft_bias,
            bpo_bias,
            sft_heldout_nll: sft_nll,
            bpo_heldout_nll: bpo_nll,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub sft_model: ARModel,
    pub bpo_model: ARModel,
    pub sft_report: StageReport,
    pub bpo_report: StageReport,
    pub sft_bias: BiasReport,
    pub bpo_bias: BiasReport,
    pub sft_heldout_nll: f64,
    pub bpo_heldout_nll: f64,
}

impl Outcome {
    /// `1 - rd_after / rd_before`
    pub fn relative_rd_reduction(&self) -> f64 {
        1.0 - self.bpo_bias.macro_rd / self.sft_bias.macro_rd
    }

    /// `nll_after / nll_before - 1`
    pub fn relative_nll_change(&self) -> f64 {
        self.bpo_heldout_nll / self.sft_heldout_nll - 1.0
    }
}
