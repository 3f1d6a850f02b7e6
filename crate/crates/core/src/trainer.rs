//! Two-stage training: supervised finetuning on (prompt, tokens) pairs, then
//! balanced preference optimization on multi-group records.
//!
//! Every epoch shuffles with a seed derived from `(seed, stage, epoch)`, where
//! `epoch` is the global epoch counter stored in checkpoints. A run split across
//! a checkpoint therefore replays the same minibatches as an uninterrupted one.

use std::path::Path;

use log::{debug, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{domain, FairgenError, Result};
use crate::io::{write_atomic, Progress};
use crate::losses::{
    bpo_batch_loss, bpo_multigroup_loss, log_odds_ratio, nll_loss, Pairing, ProbMode,
};
use crate::metrics::{rd_bias, sample_many, FreqVector};
use crate::model::{ARModel, GradTable, TokenSequence};
use crate::seed::{derive_seed, rng_from};
use crate::world::{BalancedRecord, WorldSpec};

const SFT_TAG: u64 = 1;
const BPO_TAG: u64 = 2;
const EVAL_TAG: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub sft_epochs: usize,
    pub bpo_epochs: usize,
    /// Weight of the NLL anchor added to the balance loss in stage 2.
    pub lambda_nll_anchor: f64,
    pub seed: u64,
    pub eval_samples_per_prompt: usize,
    pub loss_variant: Pairing,
    pub prob_mode: ProbMode,
    /// Context length of a freshly created model.
    pub order: usize,
    pub logit_clamp: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            momentum: 0.0,
            batch_size: 16,
            sft_epochs: 10,
            bpo_epochs: 2,
            lambda_nll_anchor: 0.0,
            seed: 0,
            eval_samples_per_prompt: 160,
            loss_variant: Pairing::Cyclic,
            prob_mode: ProbMode::LengthNormalized,
            order: 2,
            logit_clamp: 15.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return domain(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return domain(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return domain("batch_size must be >= 1");
        }
        if self.sft_epochs == 0 || self.bpo_epochs == 0 {
            return domain("epoch counts must be >= 1");
        }
        if !(self.lambda_nll_anchor >= 0.0 && self.lambda_nll_anchor.is_finite()) {
            return domain("lambda_nll_anchor must be finite and non-negative");
        }
        if self.eval_samples_per_prompt == 0 {
            return domain("eval_samples_per_prompt must be >= 1");
        }
        if self.logit_clamp.is_nan() || self.logit_clamp <= 0.0 {
            return domain("logit_clamp must be positive");
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Plain SGD with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: GradTable,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: GradTable::new(),
        }
    }

    pub fn step(&mut self, model: &mut ARModel, grads: &GradTable) {
        if self.momentum == 0.0 {
            model.apply_update(grads, -self.lr);
            return;
        }
        self.velocity.scale(self.momentum);
        self.velocity.add_scaled(grads, 1.0);
        model.apply_update(&self.velocity, -self.lr);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sft,
    Bpo,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Sft => "sft",
            Stage::Bpo => "bpo",
        }
    }
}

/// Bias measured by sampling and oracle labelling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBias {
    pub prompt: u32,
    pub freqs: FreqVector,
    pub rd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub per_prompt: Vec<PromptBias>,
    /// Label frequencies over all samples of all prompts.
    pub pooled: FreqVector,
    /// Mean of the per-prompt RD values.
    pub macro_rd: f64,
}

/// Samples `n` sequences per prompt and labels them with the world oracle.
pub fn evaluate_bias(
    model: &ARModel,
    world: &WorldSpec,
    prompts: &[u32],
    n: usize,
    seed: u64,
) -> Result<BiasReport> {
    if n == 0 {
        return domain("need at least one sample per prompt");
    }
    if prompts.is_empty() {
        return domain("no prompts to evaluate");
    }
    world.check_model(model)?;
    let k = world.group_count();
    let mut all_labels = Vec::with_capacity(n * prompts.len());
    let mut per_prompt = Vec::with_capacity(prompts.len());
    for &prompt in prompts {
        let labels: Vec<usize> = sample_many(model, prompt, n, seed)?
            .iter()
            .map(|z| world.classify(z))
            .collect();
        let freqs = FreqVector::from_labels(labels.iter().copied(), k)?;
        all_labels.extend(labels);
        per_prompt.push(PromptBias {
            prompt,
            rd: rd_bias(&freqs)?,
            freqs,
        });
    }
    let macro_rd = per_prompt.iter().map(|p| p.rd).sum::<f64>() / per_prompt.len() as f64;
    Ok(BiasReport {
        per_prompt,
        pooled: FreqVector::from_labels(all_labels, k)?,
        macro_rd,
    })
}

/// Mean per-token NLL over the non-signal positions of `data`.
pub fn content_nll(
    model: &ARModel,
    world: &WorldSpec,
    data: &[(u32, TokenSequence)],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (prompt, z) in data {
        for (pos, lp) in model.step_logprobs(*prompt, z)?.into_iter().enumerate() {
            if !world.is_signal_position(pos) {
                total -= lp;
                count += 1;
            }
        }
    }
    if count == 0 {
        return domain("no content positions to score");
    }
    Ok(total / count as f64)
}

pub fn mean_nll(model: &ARModel, data: &[(u32, TokenSequence)]) -> Result<f64> {
    let refs: Vec<(u32, &TokenSequence)> = data.iter().map(|(p, z)| (*p, z)).collect();
    Ok(nll_loss(model, &refs)?.value)
}

/// Mean `|log OR|` over the consecutive group pairs of every record.
pub fn mean_abs_log_or(model: &ARModel, data: &[BalancedRecord], mode: ProbMode) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for rec in data {
        let k = rec.group_sequences.len();
        for (a, b) in Pairing::Cyclic
            .pairs(k)
            .into_iter()
            .take(if k == 2 { 1 } else { k })
        {
            let u = log_odds_ratio(
                model,
                rec.prompt_id,
                &rec.group_sequences[a],
                &rec.group_sequences[b],
                mode,
            )?;
            total += u.abs();
            count += 1;
        }
    }
    if count == 0 {
        return domain("no records");
    }
    Ok(total / count as f64)
}

pub fn mean_bpo_loss(
    model: &ARModel,
    data: &[BalancedRecord],
    pairing: Pairing,
    mode: ProbMode,
) -> Result<f64> {
    if data.is_empty() {
        return domain("no records");
    }
    let mut total = 0.0;
    for rec in data {
        total += bpo_multigroup_loss(model, rec, pairing, mode)?.value;
    }
    Ok(total / data.len() as f64)
}

/// Held-out material used for per-epoch evaluation.
#[derive(Debug, Clone)]
pub struct EvalSet<'a> {
    pub world: &'a WorldSpec,
    pub prompts: Vec<u32>,
    pub heldout: Vec<(u32, TokenSequence)>,
    pub balanced: Option<&'a [BalancedRecord]>,
}

impl<'a> EvalSet<'a> {
    /// Held-out sequences drawn from the world: `per_prompt` records per group for
    /// every prompt, seeded independently of training data.
    pub fn from_world(
        world: &'a WorldSpec,
        prompts: Vec<u32>,
        per_prompt: usize,
        seed: u64,
    ) -> Result<Self> {
        let heldout = world
            .gen_balanced_dataset(&prompts, per_prompt, derive_seed(seed, &[EVAL_TAG, 1]))?
            .into_iter()
            .flat_map(|r| {
                let p = r.prompt_id;
                r.group_sequences.into_iter().map(move |z| (p, z))
            })
            .collect();
        Ok(Self {
            world,
            prompts,
            heldout,
            balanced: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub stage: Stage,
    pub nll_train: f64,
    pub nll_heldout: Option<f64>,
    pub rd: Option<f64>,
    pub bpo_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub rows: Vec<EpochRow>,
    /// Mean |log OR| before the first and after the last epoch (stage 2 only).
    pub initial_abs_log_or: Option<f64>,
    pub final_abs_log_or: Option<f64>,
    /// Logit entries moved by post-step clamping.
    pub clamp_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<EpochRow>,
    pub clamp_events: usize,
    pub checkpoint: Option<String>,
}

impl RunReport {
    pub fn from_stages(stages: &[&StageReport], checkpoint: Option<String>) -> Self {
        Self {
            rows: stages.iter().flat_map(|s| s.rows.iter().cloned()).collect(),
            clamp_events: stages.iter().map(|s| s.clamp_events).sum(),
            checkpoint,
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "epoch",
            "stage",
            "nll_train",
            "nll_heldout",
            "rd",
            "bpo_loss",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                r.stage.as_str().to_string(),
                r.nll_train.to_string(),
                opt(r.nll_heldout),
                opt(r.rd),
                opt(r.bpo_loss),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| FairgenError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }
}

fn eval_row(
    model: &ARModel,
    stage: Stage,
    epoch: usize,
    nll_train: f64,
    cfg: &TrainConfig,
    eval: Option<&EvalSet>,
) -> Result<EpochRow> {
    let mut row = EpochRow {
        epoch,
        stage,
        nll_train,
        nll_heldout: None,
        rd: None,
        bpo_loss: None,
    };
    if let Some(ev) = eval {
        if !ev.heldout.is_empty() {
            row.nll_heldout = Some(content_nll(model, ev.world, &ev.heldout)?);
        }
        if !ev.prompts.is_empty() {
            let bias = evaluate_bias(
                model,
                ev.world,
                &ev.prompts,
                cfg.eval_samples_per_prompt,
                derive_seed(cfg.seed, &[EVAL_TAG]),
            )?;
            row.rd = Some(bias.macro_rd);
        }
        if let Some(bal) = ev.balanced.filter(|b| !b.is_empty()) {
            row.bpo_loss = Some(mean_bpo_loss(model, bal, cfg.loss_variant, cfg.prob_mode)?);
        }
    }
    Ok(row)
}

fn epoch_order(n: usize, seed: u64, tag: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(derive_seed(seed, &[tag, epoch as u64])));
    order
}

fn post_step(model: &mut ARModel, cfg: &TrainConfig, loss: f64) -> Result<usize> {
    if !loss.is_finite() {
        return Err(FairgenError::NumericalAbort(format!("loss became {loss}")));
    }
    let clamped = model.clamp_logits(cfg.logit_clamp);
    if !model.is_finite() {
        return Err(FairgenError::NumericalAbort(
            "non-finite logits after step".into(),
        ));
    }
    Ok(clamped)
}

/// Stage 1: `cfg.sft_epochs` epochs of minibatch SGD on the mean sequence NLL.
pub fn sft_stage(
    model: &mut ARModel,
    data: &[(u32, TokenSequence)],
    cfg: &TrainConfig,
    eval: Option<&EvalSet>,
    progress: &mut Progress,
) -> Result<StageReport> {
    cfg.validate()?;
    if data.is_empty() {
        return domain("empty SFT dataset");
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut rows = Vec::with_capacity(cfg.sft_epochs);
    let mut clamp_events = 0;
    for _ in 0..cfg.sft_epochs {
        let epoch = progress.sft_epochs + 1;
        let order = epoch_order(data.len(), cfg.seed, SFT_TAG, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(u32, &TokenSequence)> =
                chunk.iter().map(|&i| (data[i].0, &data[i].1)).collect();
            let loss = nll_loss(model, &batch)?;
            opt.step(model, &loss.grads);
            clamp_events += post_step(model, cfg, loss.value)?;
        }
        progress.sft_epochs = epoch;
        let row = eval_row(model, Stage::Sft, epoch, mean_nll(model, data)?, cfg, eval)?;
        debug!("sft epoch {epoch}: {row:?}");
        rows.push(row);
    }
    if clamp_events > 0 {
        warn!("logit clamping touched {clamp_events} entries during SFT");
    }
    Ok(StageReport {
        stage: Stage::Sft,
        rows,
        initial_abs_log_or: None,
        final_abs_log_or: None,
        clamp_events,
    })
}

/// Stage 2: `cfg.bpo_epochs` epochs minimizing the multi-group balance loss,
/// plus `lambda_nll_anchor` times the NLL of the record sequences.
pub fn bpo_stage(
    model: &mut ARModel,
    data: &[BalancedRecord],
    cfg: &TrainConfig,
    eval: Option<&EvalSet>,
    progress: &mut Progress,
) -> Result<StageReport> {
    cfg.validate()?;
    if data.is_empty() {
        return domain("empty balanced dataset");
    }
    if let Some(r) = data.iter().find(|r| r.group_sequences.len() < 2) {
        return domain(format!(
            "record for prompt {} has {} groups, need >= 2",
            r.prompt_id,
            r.group_sequences.len()
        ));
    }
    if progress.sft_epochs == 0 {
        warn!("balanced preference stage started from a model without supervised finetuning");
    }
    let initial = mean_abs_log_or(model, data, cfg.prob_mode)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut rows = Vec::with_capacity(cfg.bpo_epochs);
    let mut clamp_events = 0;
    let train_seqs: Vec<(u32, TokenSequence)> = data
        .iter()
        .flat_map(|r| {
            r.group_sequences
                .iter()
                .map(move |z| (r.prompt_id, z.clone()))
        })
        .collect();
    for _ in 0..cfg.bpo_epochs {
        let epoch = progress.bpo_epochs + 1;
        let order = epoch_order(data.len(), cfg.seed, BPO_TAG, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&BalancedRecord> = chunk.iter().map(|&i| &data[i]).collect();
            let loss = bpo_batch_loss(
                model,
                &batch,
                cfg.loss_variant,
                cfg.prob_mode,
                cfg.lambda_nll_anchor,
            )?;
            opt.step(model, &loss.grads);
            clamp_events += post_step(model, cfg, loss.value)?;
        }
        progress.bpo_epochs = epoch;
        let mut row = eval_row(
            model,
            Stage::Bpo,
            epoch,
            mean_nll(model, &train_seqs)?,
            cfg,
            eval,
        )?;
        if row.bpo_loss.is_none() {
            row.bpo_loss = Some(mean_bpo_loss(model, data, cfg.loss_variant, cfg.prob_mode)?);
        }
        debug!("bpo epoch {epoch}: {row:?}");
        rows.push(row);
    }
    if clamp_events > 0 {
        warn!("logit clamping touched {clamp_events} entries during BPO");
    }
    Ok(StageReport {
        stage: Stage::Bpo,
        rows,
        initial_abs_log_or: Some(initial),
        final_abs_log_or: Some(mean_abs_log_or(model, data, cfg.prob_mode)?),
        clamp_events,
    })
}
