//! Tabular autoregressive categorical model over image tokens.
//!
//! The next-token distribution is conditioned on a discrete prompt id and the
//! most recent `order` image tokens. Each `(prompt, context)` pair owns one row
//! of logits over the image-token alphabet; rows that were never written read
//! as all-zero logits (the uniform distribution).

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, FairgenError, Result};
use crate::seed::rng_from;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub text_token_count: usize,
    pub image_token_count: usize,
    pub demographic_labels: Vec<String>,
}

impl Vocabulary {
    pub fn new(
        text_token_count: usize,
        image_token_count: usize,
        demographic_labels: Vec<String>,
    ) -> Result<Self> {
        let vocab = Self {
            text_token_count,
            image_token_count,
            demographic_labels,
        };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn validate(&self) -> Result<()> {
        if self.text_token_count == 0 {
            return domain("text_token_count must be positive");
        }
        if self.image_token_count < 2 {
            return domain(format!(
                "image_token_count must be >= 2, got {}",
                self.image_token_count
            ));
        }
        if self.demographic_labels.len() < 2 {
            return domain(format!(
                "need at least 2 demographic labels, got {}",
                self.demographic_labels.len()
            ));
        }
        Ok(())
    }

    pub fn group_count(&self) -> usize {
        self.demographic_labels.len()
    }

    /// Total size of the unified text+image vocabulary.
    pub fn size(&self) -> usize {
        self.text_token_count + self.image_token_count
    }

    /// Maps an image-token index into the unified vocabulary; text tokens occupy
    /// the low ids.
    pub fn unified_id(&self, image_token: u32) -> Option<usize> {
        let t = image_token as usize;
        (t < self.image_token_count).then_some(self.text_token_count + t)
    }
}

/// Image-token sequence. Ids are indices into the image-token alphabet.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, image_token_count: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t as usize >= image_token_count) {
            Some(t) => domain(format!(
                "token {t} outside image alphabet of size {image_token_count}"
            )),
            None => Ok(()),
        }
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

/// Row address: prompt id plus the (already truncated) token context.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RowKey {
    pub prompt: u32,
    pub context: Vec<u32>,
}

impl RowKey {
    pub fn new(prompt: u32, context: &[u32]) -> Self {
        Self {
            prompt,
            context: context.to_vec(),
        }
    }

    /// `"prompt|t1,t2"`; an empty context encodes as `"prompt|"`.
    pub fn encode(&self) -> String {
        let ctx: Vec<String> = self.context.iter().map(u32::to_string).collect();
        format!("{}|{}", self.prompt, ctx.join(","))
    }

    pub fn decode(s: &str) -> Result<Self> {
        let bad = || FairgenError::Domain(format!("malformed row key {s:?}"));
        let (p, ctx) = s.split_once('|').ok_or_else(bad)?;
        let prompt = p.parse().map_err(|_| bad())?;
        let context = if ctx.is_empty() {
            Vec::new()
        } else {
            ctx.split(',')
                .map(|t| t.parse().map_err(|_| bad()))
                .collect::<Result<Vec<u32>>>()?
        };
        Ok(Self { prompt, context })
    }
}

/// Sparse table of per-row vectors; used both for gradients and optimizer state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradTable {
    rows: BTreeMap<RowKey, Vec<f64>>,
}

impl GradTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn row(&self, key: &RowKey) -> Option<&[f64]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    pub fn row_mut(&mut self, key: RowKey, width: usize) -> &mut Vec<f64> {
        self.rows.entry(key).or_insert_with(|| vec![0.0; width])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&RowKey, &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &GradTable, scale: f64) {
        for (key, row) in &other.rows {
            let dst = self.row_mut(key.clone(), row.len());
            for (d, s) in dst.iter_mut().zip(row) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for row in self.rows.values_mut() {
            row.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.rows.values().flatten().all(|v| v.is_finite())
    }
}

pub(crate) fn softmax_into(logits: &[f64], temperature: f64, out: &mut Vec<f64>) {
    out.clear();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    out.extend(logits.iter().map(|&l| ((l - max) / temperature).exp()));
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    softmax_into(logits, 1.0, &mut out);
    out
}

#[derive(Debug, Clone)]
pub struct ARModel {
    pub vocab: Vocabulary,
    pub order: usize,
    pub seq_len: usize,
    pub num_prompts: u32,
    logits: BTreeMap<RowKey, Vec<f64>>,
}

impl PartialEq for ARModel {
    /// Missing rows compare equal to explicit all-zero rows.
    fn eq(&self, other: &Self) -> bool {
        if self.vocab != other.vocab
            || self.order != other.order
            || self.seq_len != other.seq_len
            || self.num_prompts != other.num_prompts
        {
            return false;
        }
        let covers = |a: &Self, b: &Self| {
            a.logits
                .iter()
                .all(|(k, row)| b.logits_row(k).as_ref() == row.as_slice())
        };
        covers(self, other) && covers(other, self)
    }
}

impl ARModel {
    pub fn new(vocab: Vocabulary, order: usize, seq_len: usize, num_prompts: u32) -> Result<Self> {
        vocab.validate()?;
        if seq_len == 0 {
            return domain("seq_len must be positive");
        }
        if num_prompts == 0 {
            return domain("num_prompts must be positive");
        }
        Ok(Self {
            vocab,
            order,
            seq_len,
            num_prompts,
            logits: BTreeMap::new(),
        })
    }

    pub fn width(&self) -> usize {
        self.vocab.image_token_count
    }

    pub fn rows(&self) -> impl Iterator<Item = (&RowKey, &Vec<f64>)> {
        self.logits.iter()
    }

    pub fn row_count(&self) -> usize {
        self.logits.len()
    }

    fn check_prompt(&self, prompt: u32) -> Result<()> {
        if prompt >= self.num_prompts {
            return domain(format!(
                "prompt id {prompt} outside configured set of {}",
                self.num_prompts
            ));
        }
        Ok(())
    }

    fn check_sequence(&self, z: &TokenSequence) -> Result<()> {
        if z.len() != self.seq_len {
            return Err(FairgenError::Shape {
                expected: self.seq_len,
                got: z.len(),
            });
        }
        z.validate(self.width())
    }

    /// Row key for predicting the token that follows `history`.
    pub fn key_for(&self, prompt: u32, history: &[u32]) -> RowKey {
        let start = history.len().saturating_sub(self.order);
        RowKey::new(prompt, &history[start..])
    }

    pub fn logits_row(&self, key: &RowKey) -> Cow<'_, [f64]> {
        match self.logits.get(key) {
            Some(row) => Cow::Borrowed(row.as_slice()),
            None => Cow::Owned(vec![0.0; self.width()]),
        }
    }

    pub fn set_row(&mut self, key: RowKey, row: Vec<f64>) -> Result<()> {
        self.check_prompt(key.prompt)?;
        if row.len() != self.width() {
            return Err(FairgenError::Shape {
                expected: self.width(),
                got: row.len(),
            });
        }
        if key.context.len() > self.order {
            return domain(format!(
                "context of length {} exceeds model order {}",
                key.context.len(),
                self.order
            ));
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return domain(format!("non-finite logit {v} in row {}", key.encode()));
        }
        self.logits.insert(key, row);
        Ok(())
    }

    /// Softmax of the row selected by `prompt` and the last `order` tokens of `context`.
    pub fn next_token_dist(&self, prompt: u32, context: &[u32]) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        let key = self.key_for(prompt, context);
        let row = self.logits_row(&key);
        if row.iter().any(|v| !v.is_finite()) {
            return domain(format!("non-finite logits in row {}", key.encode()));
        }
        Ok(softmax(&row))
    }

    /// Per-position log-probabilities `log P(z_t | prompt, z_<t)` in nats.
    pub fn step_logprobs(&self, prompt: u32, z: &TokenSequence) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        self.check_sequence(z)?;
        let toks = z.tokens();
        let mut probs = Vec::with_capacity(self.width());
        Ok((0..toks.len())
            .map(|t| {
                let key = self.key_for(prompt, &toks[..t]);
                softmax_into(&self.logits_row(&key), 1.0, &mut probs);
                probs[toks[t] as usize].ln()
            })
            .collect())
    }

    pub fn sequence_logprob(&self, prompt: u32, z: &TokenSequence) -> Result<f64> {
        Ok(self.step_logprobs(prompt, z)?.iter().sum())
    }

    /// Adds `scale * d log P(z | prompt) / d logits` into `out`.
    pub fn accumulate_logprob_grad(
        &self,
        prompt: u32,
        z: &TokenSequence,
        scale: f64,
        out: &mut GradTable,
    ) -> Result<()> {
        self.check_prompt(prompt)?;
        self.check_sequence(z)?;
        let toks = z.tokens();
        let mut probs = Vec::with_capacity(self.width());
        for t in 0..toks.len() {
            let key = self.key_for(prompt, &toks[..t]);
            softmax_into(&self.logits_row(&key), 1.0, &mut probs);
            let row = out.row_mut(key, self.width());
            for (g, p) in row.iter_mut().zip(&probs) {
                *g -= scale * p;
            }
            row[toks[t] as usize] += scale;
        }
        Ok(())
    }

    pub fn grad_sequence_logprob(&self, prompt: u32, z: &TokenSequence) -> Result<GradTable> {
        let mut g = GradTable::new();
        self.accumulate_logprob_grad(prompt, z, 1.0, &mut g)?;
        Ok(g)
    }

    pub fn sample_sequence(&self, prompt: u32, rng_seed: u64) -> Result<TokenSequence> {
        self.sample_sequence_with_temperature(prompt, rng_seed, 1.0)
    }

    /// Ancestral sampling; `temperature` divides the logits before the softmax.
    pub fn sample_sequence_with_temperature(
        &self,
        prompt: u32,
        rng_seed: u64,
        temperature: f64,
    ) -> Result<TokenSequence> {
        self.check_prompt(prompt)?;
        if !(temperature > 0.0 && temperature.is_finite()) {
            return domain(format!("temperature must be positive, got {temperature}"));
        }
        let mut rng = rng_from(rng_seed);
        let mut toks: Vec<u32> = Vec::with_capacity(self.seq_len);
        let mut probs = Vec::with_capacity(self.width());
        for _ in 0..self.seq_len {
            let key = self.key_for(prompt, &toks);
            softmax_into(&self.logits_row(&key), temperature, &mut probs);
            toks.push(draw_categorical(&probs, rng.random::<f64>()));
        }
        Ok(TokenSequence(toks))
    }

    /// `logits += step * update` on every row present in `update`.
    pub fn apply_update(&mut self, update: &GradTable, step: f64) {
        let width = self.width();
        for (key, g) in update.iter() {
            let row = self
                .logits
                .entry(key.clone())
                .or_insert_with(|| vec![0.0; width]);
            for (l, d) in row.iter_mut().zip(g) {
                *l += step * d;
            }
        }
    }

    /// Clamps every logit into `[-limit, limit]`; returns how many entries moved.
    pub fn clamp_logits(&mut self, limit: f64) -> usize {
        let mut n = 0;
        for v in self.logits.values_mut().flatten() {
            if v.abs() > limit {
                *v = v.clamp(-limit, limit);
                n += 1;
            }
        }
        n
    }

    pub fn is_finite(&self) -> bool {
        self.logits.values().flatten().all(|v| v.is_finite())
    }

    /// Largest absolute logit difference between two models of the same shape.
    pub fn max_abs_diff(&self, other: &ARModel) -> f64 {
        let keys: std::collections::BTreeSet<&RowKey> =
            self.logits.keys().chain(other.logits.keys()).collect();
        keys.into_iter()
            .flat_map(|k| {
                let a = self.logits_row(k).into_owned();
                let b = other.logits_row(k).into_owned();
                a.into_iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }
}

/// Inverse-CDF draw; `u` in [0, 1).
pub(crate) fn draw_categorical(probs: &[f64], u: f64) -> u32 {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    // rounding left u above the final partial sum; pick the last non-zero entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32
}
