//! Synthetic generative world.
//!
//! Stands in for the image tokenizer and the image-synthesis pipeline: every
//! token sequence is drawn from a known parametric process, so the demographic
//! label of a sequence is recoverable by a Bayes-optimal oracle and the
//! encoder embedding carries a controllable amount of label information.
//!
//! Sequences have `seq_len` positions. Positions in `signal_positions` are drawn
//! from the group's signal distribution; all other positions are drawn from the
//! shared content distribution.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::model::{draw_categorical, ARModel, TokenSequence, Vocabulary};
use crate::seed::{derive_seed, rng_from};

const NORM_TOL: f64 = 1e-12;
/// Minimum pairwise total-variation distance between group signal distributions.
pub const MIN_SIGNAL_TV: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub vocab: Vocabulary,
    pub seq_len: usize,
    /// Number of neutral base prompts; augmented prompts get ids after them.
    pub base_prompts: u32,
    pub signal_positions: Vec<usize>,
    pub signal_dists: Vec<Vec<f64>>,
    pub content_dist: Vec<f64>,
    pub embed_dim: usize,
    pub embed_noise_sigma: f64,
}

/// One generated sample with its demographic label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenRecord {
    pub prompt_id: u32,
    pub tokens: TokenSequence,
    pub label: usize,
}

/// A neutral prompt paired with one sequence per demographic group, in group order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalancedRecord {
    pub prompt_id: u32,
    #[serde(rename = "groups")]
    pub group_sequences: Vec<TokenSequence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub label: usize,
}

fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn check_dist(name: &str, d: &[f64], width: usize) -> Result<()> {
    if d.len() != width {
        return domain(format!("{name}: expected {width} entries, got {}", d.len()));
    }
    if d.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return domain(format!("{name}: entries must be finite and non-negative"));
    }
    let total: f64 = d.iter().sum();
    if (total - 1.0).abs() > NORM_TOL {
        return domain(format!("{name}: sums to {total}, not 1"));
    }
    Ok(())
}

impl WorldSpec {
    /// World whose group signal distributions are uniform over disjoint blocks of
    /// `signal_tokens` tokens (group g owns tokens `g*signal_tokens..`). Content is
    /// spread over the whole alphabet with weights decaying like `1/sqrt(i+1)`.
    pub fn disjoint(
        labels: Vec<String>,
        image_token_count: usize,
        signal_tokens: usize,
        seq_len: usize,
        base_prompts: u32,
    ) -> Result<Self> {
        let k = labels.len();
        if signal_tokens == 0 || k * signal_tokens > image_token_count {
            return domain(format!(
                "{k} groups x {signal_tokens} signal tokens do not fit in {image_token_count}"
            ));
        }
        let signal_dists = (0..k)
            .map(|g| {
                (0..image_token_count)
                    .map(|t| {
                        if t / signal_tokens == g {
                            1.0 / signal_tokens as f64
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let weights: Vec<f64> = (0..image_token_count)
            .map(|i| 1.0 / ((i + 1) as f64).sqrt())
            .collect();
        let total: f64 = weights.iter().sum();
        let world = Self {
            vocab: Vocabulary::new(32, image_token_count, labels)?,
            seq_len,
            base_prompts,
            signal_positions: vec![0],
            signal_dists,
            content_dist: weights.iter().map(|w| w / total).collect(),
            embed_dim: k + 8,
            embed_noise_sigma: 0.1,
        };
        world.validate()?;
        Ok(world)
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        let k = self.group_count();
        let width = self.vocab.image_token_count;
        if self.seq_len == 0 {
            return domain("seq_len must be positive");
        }
        if self.base_prompts == 0 {
            return domain("base_prompts must be positive");
        }
        if self.signal_positions.is_empty() {
            return domain("signal_positions must not be empty");
        }
        let unique: BTreeSet<_> = self.signal_positions.iter().collect();
        if unique.len() != self.signal_positions.len() {
            return domain("signal_positions contains duplicates");
        }
        if let Some(p) = self.signal_positions.iter().find(|&&p| p >= self.seq_len) {
            return domain(format!(
                "signal position {p} outside seq_len {}",
                self.seq_len
            ));
        }
        if self.signal_dists.len() != k {
            return domain(format!(
                "expected {k} signal distributions, got {}",
                self.signal_dists.len()
            ));
        }
        for (g, d) in self.signal_dists.iter().enumerate() {
            check_dist(&format!("signal_dists[{g}]"), d, width)?;
        }
        check_dist("content_dist", &self.content_dist, width)?;
        for a in 0..k {
            for b in a + 1..k {
                let tv = tv_distance(&self.signal_dists[a], &self.signal_dists[b]);
                if tv < MIN_SIGNAL_TV - NORM_TOL {
                    return domain(format!(
                        "signal distributions {a} and {b} too close (TV = {tv:.4} < {MIN_SIGNAL_TV})"
                    ));
                }
            }
        }
        if self.embed_dim < k {
            return domain(format!(
                "embed_dim {} smaller than group count {k}",
                self.embed_dim
            ));
        }
        if !(self.embed_noise_sigma >= 0.0 && self.embed_noise_sigma.is_finite()) {
            return domain("embed_noise_sigma must be finite and non-negative");
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let world: Self = toml::from_str(s)?;
        world.validate()?;
        Ok(world)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("world spec serializes to TOML")
    }

    pub fn group_count(&self) -> usize {
        self.vocab.group_count()
    }

    pub fn is_signal_position(&self, pos: usize) -> bool {
        self.signal_positions.contains(&pos)
    }

    pub fn neutral_prompt(&self, base: u32) -> u32 {
        base
    }

    /// Id of the demographic-augmented variant of base prompt `base` for `group`.
    pub fn augmented_prompt(&self, base: u32, group: usize) -> u32 {
        self.base_prompts + base * self.group_count() as u32 + group as u32
    }

    pub fn neutral_prompts(&self) -> Vec<u32> {
        (0..self.base_prompts).collect()
    }

    /// Size of the prompt id space (neutral plus augmented).
    pub fn num_prompts(&self) -> u32 {
        self.base_prompts * (self.group_count() as u32 + 1)
    }

    /// Fresh all-uniform model sized for this world.
    pub fn new_model(&self, order: usize) -> Result<ARModel> {
        ARModel::new(self.vocab.clone(), order, self.seq_len, self.num_prompts())
    }

    /// Errors unless `model` shares this world's alphabet and sequence length.
    pub fn check_model(&self, model: &ARModel) -> Result<()> {
        if model.vocab.image_token_count != self.vocab.image_token_count
            || model.vocab.group_count() != self.group_count()
        {
            return domain(format!(
                "alphabet mismatch: model has {} image tokens / {} groups, world has {} / {}",
                model.vocab.image_token_count,
                model.vocab.group_count(),
                self.vocab.image_token_count,
                self.group_count()
            ));
        }
        if model.seq_len != self.seq_len {
            return domain(format!(
                "sequence length mismatch: model {} vs world {}",
                model.seq_len, self.seq_len
            ));
        }
        Ok(())
    }

    fn check_group(&self, group: usize) -> Result<()> {
        if group >= self.group_count() {
            return domain(format!("group {group} out of range"));
        }
        Ok(())
    }

    fn fill_content(&self, rng: &mut impl Rng) -> Vec<u32> {
        (0..self.seq_len)
            .map(|_| draw_categorical(&self.content_dist, rng.random::<f64>()))
            .collect()
    }

    fn fill_signal(&self, toks: &mut [u32], group: usize, rng: &mut impl Rng) {
        for &p in &self.signal_positions {
            toks[p] = draw_categorical(&self.signal_dists[group], rng.random::<f64>());
        }
    }

    /// Draws one sequence of `group`.
    pub fn sample_group_sequence(&self, group: usize, rng_seed: u64) -> Result<TokenSequence> {
        self.check_group(group)?;
        let mut rng = rng_from(rng_seed);
        let mut toks = self.fill_content(&mut rng);
        self.fill_signal(&mut toks, group, &mut rng);
        Ok(TokenSequence(toks))
    }

    /// Bayes-optimal label: argmax over groups of the signal-position likelihood,
    /// ties to the lowest group index.
    pub fn classify(&self, z: &TokenSequence) -> usize {
        let toks = z.tokens();
        let mut best = 0;
        let mut best_ll = f64::NEG_INFINITY;
        for (g, dist) in self.signal_dists.iter().enumerate() {
            let ll: f64 = self
                .signal_positions
                .iter()
                .map(|&p| match toks.get(p) {
                    Some(&t) => dist.get(t as usize).copied().unwrap_or(0.0).ln(),
                    None => 0.0,
                })
                .sum();
            if g == 0 || ll > best_ll {
                best = g;
                best_ll = ll;
            }
        }
        best
    }

    /// Synthetic encoder embedding: one-hot group block for the oracle label,
    /// hashed content-token features, then isotropic Gaussian noise.
    pub fn encode(&self, z: &TokenSequence, rng_seed: u64) -> Result<Embedding> {
        z.validate(self.vocab.image_token_count)?;
        let k = self.group_count();
        let label = self.classify(z);
        let mut values = vec![0.0; self.embed_dim];
        values[label] = 1.0;
        let extra = self.embed_dim - k;
        let content: Vec<(usize, u32)> = z
            .tokens()
            .iter()
            .copied()
            .enumerate()
            .filter(|(p, _)| !self.is_signal_position(*p))
            .collect();
        if extra > 0 && !content.is_empty() {
            let w = 1.0 / content.len() as f64;
            for (p, t) in content {
                let slot = (t as usize * 31 + p * 7) % extra;
                values[k + slot] += w;
            }
        }
        if self.embed_noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.embed_noise_sigma)
                .expect("sigma validated finite and positive");
            let mut rng = rng_from(rng_seed);
            values
                .iter_mut()
                .for_each(|v| *v += normal.sample(&mut rng));
        }
        Ok(Embedding { values, label })
    }

    /// For each prompt, `per_group` records holding one sequence per group.
    ///
    /// Within a record the content positions are drawn once and shared across the
    /// group sequences; only the signal positions differ.
    pub fn gen_balanced_dataset(
        &self,
        prompts: &[u32],
        per_group: usize,
        rng_seed: u64,
    ) -> Result<Vec<BalancedRecord>> {
        if prompts.is_empty() {
            return domain("prompt list is empty");
        }
        if per_group == 0 {
            return domain("per_group must be >= 1");
        }
        let mut out = Vec::with_capacity(prompts.len() * per_group);
        for &prompt in prompts {
            for i in 0..per_group {
                let mut rng = rng_from(derive_seed(rng_seed, &[prompt as u64, i as u64]));
                let content = self.fill_content(&mut rng);
                let group_sequences = (0..self.group_count())
                    .map(|g| {
                        let mut toks = content.clone();
                        self.fill_signal(&mut toks, g, &mut rng);
                        TokenSequence(toks)
                    })
                    .collect();
                out.push(BalancedRecord {
                    prompt_id: prompt,
                    group_sequences,
                });
            }
        }
        Ok(out)
    }

    /// Corpus whose labels follow `skew`; record `i` uses `prompts[i % len]`.
    pub fn gen_biased_pretrain(
        &self,
        prompts: &[u32],
        skew: &[f64],
        total: usize,
        rng_seed: u64,
    ) -> Result<Vec<GenRecord>> {
        if prompts.is_empty() {
            return domain("prompt list is empty");
        }
        validate_skew(skew, self.group_count())?;
        let out = (0..total)
            .map(|i| {
                let mut rng = rng_from(derive_seed(rng_seed, &[i as u64]));
                let label = draw_categorical(skew, rng.random::<f64>()) as usize;
                let mut toks = self.fill_content(&mut rng);
                self.fill_signal(&mut toks, label, &mut rng);
                GenRecord {
                    prompt_id: prompts[i % prompts.len()],
                    tokens: TokenSequence(toks),
                    label,
                }
            })
            .collect();
        Ok(out)
    }

    /// Training corpus for a biased base model: `per_prompt` skewed records per
    /// neutral prompt plus `per_prompt / K` (at least one) records for every
    /// augmented prompt, each labelled with its explicit group.
    pub fn gen_pretrain_with_augmented(
        &self,
        skew: &[f64],
        per_prompt: usize,
        rng_seed: u64,
    ) -> Result<Vec<GenRecord>> {
        let k = self.group_count();
        let neutral = self.neutral_prompts();
        let mut out = self.gen_biased_pretrain(
            &neutral,
            skew,
            per_prompt * neutral.len(),
            derive_seed(rng_seed, &[0]),
        )?;
        let aug_count = (per_prompt / k).max(1);
        for g in 0..k {
            let aug: Vec<u32> = neutral
                .iter()
                .map(|&b| self.augmented_prompt(b, g))
                .collect();
            let mut one_hot = vec![0.0; k];
            one_hot[g] = 1.0;
            out.extend(self.gen_biased_pretrain(
                &aug,
                &one_hot,
                aug_count * aug.len(),
                derive_seed(rng_seed, &[1, g as u64]),
            )?);
        }
        Ok(out)
    }

    /// `per_group` embeddings of freshly drawn sequences for every group.
    pub fn gen_embeddings(&self, per_group: usize, rng_seed: u64) -> Result<Vec<Embedding>> {
        let k = self.group_count();
        let mut out = Vec::with_capacity(per_group * k);
        for i in 0..per_group {
            for g in 0..k {
                let idx = (i * k + g) as u64;
                let z = self.sample_group_sequence(g, derive_seed(rng_seed, &[0, idx]))?;
                out.push(self.encode(&z, derive_seed(rng_seed, &[1, idx]))?);
            }
        }
        Ok(out)
    }
}

pub fn validate_skew(skew: &[f64], k: usize) -> Result<()> {
    if skew.len() != k {
        return domain(format!("skew has {} entries, expected {k}", skew.len()));
    }
    if skew.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return domain("skew entries must be finite and non-negative");
    }
    let total: f64 = skew.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return domain(format!("skew sums to {total}, not 1"));
    }
    Ok(())
}
