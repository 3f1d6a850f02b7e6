//! Likelihood and preference losses with analytic gradients.
//!
//! Preference losses work on the log-odds of a sequence,
//! `logit(p) = log p - log(1 - p)`, where `p` is either the length-normalized
//! sequence probability `exp(logprob_sum / T)` (default) or the raw product
//! `exp(logprob_sum)`. The log odds ratio of two sequences is the difference
//! of their log-odds, so no odds value is ever materialized during training.

use serde::{Deserialize, Serialize};

use crate::error::{domain, FairgenError, Result};
use crate::model::{ARModel, GradTable, TokenSequence};
use crate::world::BalancedRecord;

/// How a sequence probability is formed from per-token probabilities.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbMode {
    /// Geometric mean of the per-token probabilities.
    #[default]
    LengthNormalized,
    /// Plain product; tiny for long sequences, so odds ≈ p.
    RawProduct,
}

/// Which group pairs the multi-group balance loss sums over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// `(d_k, d_{(k+1) mod K})` for every k.
    #[default]
    Cyclic,
    /// Every ordered pair `(d_k, d_l)` with `k != l`.
    AllPairs,
}

impl Pairing {
    pub fn pairs(self, k: usize) -> Vec<(usize, usize)> {
        match self {
            Pairing::Cyclic => (0..k).map(|i| (i, (i + 1) % k)).collect(),
            Pairing::AllPairs => (0..k)
                .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqScore {
    pub logprob_sum: f64,
    pub length: usize,
    pub normalized_prob: f64,
}

impl SeqScore {
    pub fn new(logprob_sum: f64, length: usize) -> Result<Self> {
        if length == 0 {
            return domain("sequence length must be positive");
        }
        if !logprob_sum.is_finite() || logprob_sum >= 0.0 {
            return domain(format!("log-probability {logprob_sum} outside (-inf, 0)"));
        }
        Ok(Self {
            logprob_sum,
            length,
            normalized_prob: (logprob_sum / length as f64).exp(),
        })
    }

    /// Score whose length-normalized probability is `p`.
    pub fn from_normalized_prob(p: f64, length: usize) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return domain(format!("probability {p} outside (0, 1)"));
        }
        Self::new(p.ln() * length as f64, length)
    }

    pub fn of(model: &ARModel, prompt: u32, z: &TokenSequence) -> Result<Self> {
        Self::new(model.sequence_logprob(prompt, z)?, z.len())
    }

    pub fn log_prob(&self, mode: ProbMode) -> f64 {
        match mode {
            ProbMode::LengthNormalized => self.logprob_sum / self.length as f64,
            ProbMode::RawProduct => self.logprob_sum,
        }
    }

    /// `log(p / (1 - p))` evaluated in log space.
    pub fn log_odds(&self, mode: ProbMode) -> Result<f64> {
        log_odds_from_log_prob(self.log_prob(mode))
    }
}

fn log_odds_from_log_prob(lp: f64) -> Result<f64> {
    if !(lp < 0.0 && lp.is_finite()) {
        return domain(format!("log-probability {lp} outside (-inf, 0)"));
    }
    Ok(lp - (-lp.exp_m1()).ln())
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log σ(u)` as `log1p(exp(-u))`.
pub fn orpo_from_log_or(u: f64) -> f64 {
    if u >= 0.0 {
        (-u).exp().ln_1p()
    } else {
        -u + u.exp().ln_1p()
    }
}

pub fn orpo_from_log_or_grad(u: f64) -> f64 {
    -sigmoid(-u)
}

/// `log(1 + (σ(u) - 1/2)^2)`.
pub fn bal_from_log_or(u: f64) -> f64 {
    let d = sigmoid(u) - 0.5;
    (d * d).ln_1p()
}

pub fn bal_from_log_or_grad(u: f64) -> f64 {
    let s = sigmoid(u);
    let d = s - 0.5;
    2.0 * d * s * (1.0 - s) / (1.0 + d * d)
}

/// Loss value with its gradient over the model logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: GradTable,
}

impl LossValue {
    fn zero() -> Self {
        Self {
            value: 0.0,
            grads: GradTable::new(),
        }
    }

    fn check_finite(self) -> Result<Self> {
        if !self.value.is_finite() || !self.grads.is_finite() {
            return Err(FairgenError::NumericalAbort(format!(
                "non-finite loss {}",
                self.value
            )));
        }
        Ok(self)
    }
}

/// Mean negative log-likelihood over the batch.
pub fn nll_loss(model: &ARModel, batch: &[(u32, &TokenSequence)]) -> Result<LossValue> {
    if batch.is_empty() {
        return domain("empty batch");
    }
    let scale = 1.0 / batch.len() as f64;
    let mut out = LossValue::zero();
    for &(prompt, z) in batch {
        out.value -= scale * model.sequence_logprob(prompt, z)?;
        model.accumulate_logprob_grad(prompt, z, -scale, &mut out.grads)?;
    }
    out.check_finite()
}

pub fn odds(score: &SeqScore) -> Result<f64> {
    let p = score.normalized_prob;
    if !(p > 0.0 && p < 1.0) {
        return domain(format!("probability {p} outside (0, 1)"));
    }
    Ok(p / (1.0 - p))
}

pub fn odds_ratio(w: &SeqScore, l: &SeqScore) -> Result<f64> {
    Ok(odds(w)? / odds(l)?)
}

/// Log-odds of `z` and the derivative of that log-odds w.r.t. the sequence logprob sum.
fn log_odds_and_slope(
    model: &ARModel,
    prompt: u32,
    z: &TokenSequence,
    mode: ProbMode,
) -> Result<(f64, f64)> {
    let score = SeqScore::of(model, prompt, z)?;
    let lp = score.log_prob(mode);
    let dlp = match mode {
        ProbMode::LengthNormalized => 1.0 / score.length as f64,
        ProbMode::RawProduct => 1.0,
    };
    // d/dlp [lp - log(1 - e^lp)] = 1 / (1 - e^lp)
    Ok((log_odds_from_log_prob(lp)?, dlp / -lp.exp_m1()))
}

pub fn log_odds_ratio(
    model: &ARModel,
    prompt: u32,
    y_a: &TokenSequence,
    y_b: &TokenSequence,
    mode: ProbMode,
) -> Result<f64> {
    let (a, _) = log_odds_and_slope(model, prompt, y_a, mode)?;
    let (b, _) = log_odds_and_slope(model, prompt, y_b, mode)?;
    Ok(a - b)
}

/// Adds `scale * f(log OR(y_a, y_b))` and its gradient into `out`.
#[allow(clippy::too_many_arguments)]
fn accumulate_pair(
    model: &ARModel,
    prompt: u32,
    y_a: &TokenSequence,
    y_b: &TokenSequence,
    mode: ProbMode,
    scale: f64,
    f: fn(f64) -> f64,
    df: fn(f64) -> f64,
    out: &mut LossValue,
) -> Result<()> {
    if y_a.len() != y_b.len() {
        return Err(FairgenError::Shape {
            expected: y_a.len(),
            got: y_b.len(),
        });
    }
    let (lo_a, slope_a) = log_odds_and_slope(model, prompt, y_a, mode)?;
    let (lo_b, slope_b) = log_odds_and_slope(model, prompt, y_b, mode)?;
    let u = lo_a - lo_b;
    let g = scale * df(u);
    out.value += scale * f(u);
    model.accumulate_logprob_grad(prompt, y_a, g * slope_a, &mut out.grads)?;
    model.accumulate_logprob_grad(prompt, y_b, -g * slope_b, &mut out.grads)?;
    Ok(())
}

/// `-log σ(log OR(y_w, y_l))`.
pub fn orpo_loss(
    model: &ARModel,
    prompt: u32,
    y_w: &TokenSequence,
    y_l: &TokenSequence,
    mode: ProbMode,
) -> Result<LossValue> {
    let mut out = LossValue::zero();
    accumulate_pair(
        model,
        prompt,
        y_w,
        y_l,
        mode,
        1.0,
        orpo_from_log_or,
        orpo_from_log_or_grad,
        &mut out,
    )?;
    out.check_finite()
}

/// Bradley–Terry preference of `w` over `l` under the DPO implicit reward.
///
/// `p(w, l) + p(l, w) == 1` holds exactly: the larger side is computed with
/// the logistic function and the smaller side as its complement, which is
/// exact in floating point for values in [1/2, 1].
pub fn dpo_bt_preference(
    logprob_policy_w: f64,
    logprob_policy_l: f64,
    logprob_ref_w: f64,
    logprob_ref_l: f64,
    beta: f64,
) -> Result<f64> {
    if !(beta > 0.0 && beta.is_finite()) {
        return domain(format!("beta must be positive, got {beta}"));
    }
    let margin = beta * ((logprob_policy_w - logprob_ref_w) - (logprob_policy_l - logprob_ref_l));
    if margin.is_nan() {
        return domain("reward margin is NaN");
    }
    Ok(if margin >= 0.0 {
        sigmoid(margin)
    } else {
        1.0 - sigmoid(-margin)
    })
}

/// Balanced-odds penalty `log(1 + (σ(log OR(y_i, y_j)) - 1/2)^2)`.
pub fn bpo_pair_loss(
    model: &ARModel,
    prompt: u32,
    y_i: &TokenSequence,
    y_j: &TokenSequence,
    mode: ProbMode,
) -> Result<LossValue> {
    let mut out = LossValue::zero();
    accumulate_pair(
        model,
        prompt,
        y_i,
        y_j,
        mode,
        1.0,
        bal_from_log_or,
        bal_from_log_or_grad,
        &mut out,
    )?;
    out.check_finite()
}

/// Sum of pair penalties over the record's group sequences.
pub fn bpo_multigroup_loss(
    model: &ARModel,
    record: &BalancedRecord,
    pairing: Pairing,
    mode: ProbMode,
) -> Result<LossValue> {
    let mut out = LossValue::zero();
    accumulate_multigroup(model, record, pairing, mode, 1.0, &mut out)?;
    out.check_finite()
}

pub(crate) fn accumulate_multigroup(
    model: &ARModel,
    record: &BalancedRecord,
    pairing: Pairing,
    mode: ProbMode,
    scale: f64,
    out: &mut LossValue,
) -> Result<()> {
    let seqs = &record.group_sequences;
    if seqs.len() < 2 {
        return domain(format!(
            "record has {} group sequences, need >= 2",
            seqs.len()
        ));
    }
    for (a, b) in pairing.pairs(seqs.len()) {
        accumulate_pair(
            model,
            record.prompt_id,
            &seqs[a],
            &seqs[b],
            mode,
            scale,
            bal_from_log_or,
            bal_from_log_or_grad,
            out,
        )?;
    }
    Ok(())
}

/// Mean of the multi-group loss over a batch, optionally plus `lambda` times the
/// mean NLL of every group sequence in the batch.
pub fn bpo_batch_loss(
    model: &ARModel,
    batch: &[&BalancedRecord],
    pairing: Pairing,
    mode: ProbMode,
    lambda_nll: f64,
) -> Result<LossValue> {
    if batch.is_empty() {
        return domain("empty batch");
    }
    let scale = 1.0 / batch.len() as f64;
    let mut out = LossValue::zero();
    for rec in batch {
        accumulate_multigroup(model, rec, pairing, mode, scale, &mut out)?;
    }
    if lambda_nll > 0.0 {
        let seqs: Vec<(u32, &TokenSequence)> = batch
            .iter()
            .flat_map(|r| r.group_sequences.iter().map(move |z| (r.prompt_id, z)))
            .collect();
        let nll = nll_loss(model, &seqs)?;
        out.value += lambda_nll * nll.value;
        out.grads.add_scaled(&nll.grads, lambda_nll);
    }
    out.check_finite()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RowKey, Vocabulary};

    fn unigram_model(width: usize) -> ARModel {
        let v = Vocabulary::new(1, width, vec!["a".into(), "b".into()]).unwrap();
        ARModel::new(v, 0, 1, 1).unwrap()
    }

    #[test]
    fn odds_values() {
        let half = SeqScore::from_normalized_prob(0.5, 3).unwrap();
        assert!((odds(&half).unwrap() - 1.0).abs() < 1e-12);
        let p8 = SeqScore::from_normalized_prob(0.8, 2).unwrap();
        assert!((odds(&p8).unwrap() - 4.0).abs() < 1e-9);
        let p2 = SeqScore::from_normalized_prob(0.2, 2).unwrap();
        assert!((odds(&p8).unwrap() * odds(&p2).unwrap() - 1.0).abs() < 1e-9);
        assert!((odds_ratio(&p8, &half).unwrap() - 4.0).abs() < 1e-9);
        assert!((odds_ratio(&p8, &p8).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_probabilities() {
        assert!(SeqScore::from_normalized_prob(0.0, 1).is_err());
        assert!(SeqScore::from_normalized_prob(1.0, 1).is_err());
        assert!(SeqScore::new(0.0, 2).is_err());
        let bogus = SeqScore {
            logprob_sum: 0.0,
            length: 1,
            normalized_prob: 1.0,
        };
        assert!(odds(&bogus).is_err());
    }

    #[test]
    fn log_odds_matches_direct_formula() {
        let s = SeqScore::from_normalized_prob(0.3, 4).unwrap();
        let lo = s.log_odds(ProbMode::LengthNormalized).unwrap();
        assert!((lo - (0.3f64 / 0.7).ln()).abs() < 1e-12);
    }

    #[test]
    fn scalar_loss_closed_forms() {
        assert!((orpo_from_log_or(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((orpo_from_log_or(16f64.ln()) - 0.060625).abs() < 1e-6);
        assert!((orpo_from_log_or(16f64.ln()) - (17.0f64 / 16.0).ln()).abs() < 1e-12);
        assert_eq!(bal_from_log_or(0.0), 0.0);
        assert!((bal_from_log_or(4f64.ln()) - 1.09f64.ln()).abs() < 1e-12);
        assert!((1.09f64.ln() - 0.086178).abs() < 1e-6);
    }

    #[test]
    fn dpo_preference_values() {
        assert_eq!(dpo_bt_preference(-3.0, -2.0, -3.0, -2.0, 0.5).unwrap(), 0.5);
        let p = dpo_bt_preference(3f64.ln(), 0.0, 0.0, 0.0, 1.0).unwrap();
        assert!((p - 0.75).abs() < 1e-12);
        assert!(dpo_bt_preference(0.0, 0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn orpo_equal_sequences_is_ln2() {
        let m = unigram_model(4);
        let z = TokenSequence(vec![1]);
        let l = orpo_loss(
            &m,
            0,
            &z,
            &TokenSequence(vec![2]),
            ProbMode::LengthNormalized,
        )
        .unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-12);
        let b = bpo_pair_loss(&m, 0, &z, &z, ProbMode::LengthNormalized).unwrap();
        assert_eq!(b.value, 0.0);
        assert!(b.grads.max_abs() == 0.0);
    }

    #[test]
    fn pair_loss_from_model_probabilities() {
        // p_w = 0.8, p_l = 0.2 on a single-step alphabet of three tokens
        let mut m = unigram_model(3);
        m.set_row(RowKey::new(0, &[]), vec![0.8f64.ln(), 0.2f64.ln(), -40.0])
            .unwrap();
        let w = TokenSequence(vec![0]);
        let l = TokenSequence(vec![1]);
        let orpo = orpo_loss(&m, 0, &w, &l, ProbMode::LengthNormalized).unwrap();
        assert!((orpo.value - 0.060625).abs() < 1e-6);
    }

    #[test]
    fn pairings() {
        assert_eq!(Pairing::Cyclic.pairs(3), vec![(0, 1), (1, 2), (2, 0)]);
        assert_eq!(Pairing::Cyclic.pairs(2), vec![(0, 1), (1, 0)]);
        assert_eq!(Pairing::AllPairs.pairs(3).len(), 6);
    }

    #[test]
    fn multigroup_needs_two_groups() {
        let m = unigram_model(3);
        let rec = BalancedRecord {
            prompt_id: 0,
            group_sequences: vec![TokenSequence(vec![0])],
        };
        assert!(
            bpo_multigroup_loss(&m, &rec, Pairing::Cyclic, ProbMode::LengthNormalized).is_err()
        );
    }

    #[test]
    fn empty_nll_batch() {
        let m = unigram_model(3);
        assert!(matches!(nll_loss(&m, &[]), Err(FairgenError::Domain(_))));
    }

    #[test]
    fn mismatched_pair_lengths() {
        let v = Vocabulary::new(1, 3, vec!["a".into(), "b".into()]).unwrap();
        let m = ARModel::new(v, 0, 2, 1).unwrap();
        let r = bpo_pair_loss(
            &m,
            0,
            &TokenSequence(vec![0, 1]),
            &TokenSequence(vec![0]),
            ProbMode::LengthNormalized,
        );
        assert!(matches!(r, Err(FairgenError::Shape { .. })));
    }
}
