//! Representation disparity and token-distribution auditing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::model::{ARModel, TokenSequence};
use crate::seed::derive_seed;
use crate::world::{GenRecord, WorldSpec};

const FREQ_TOL: f64 = 1e-9;

/// Demographic label frequencies over a set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqVector {
    pub freqs: Vec<f64>,
    pub sample_count: usize,
}

impl FreqVector {
    pub fn new(freqs: Vec<f64>, sample_count: usize) -> Result<Self> {
        if freqs.len() < 2 {
            return domain(format!("need K >= 2 frequencies, got {}", freqs.len()));
        }
        if freqs.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return domain("frequencies must be finite and non-negative");
        }
        let total: f64 = freqs.iter().sum();
        if (total - 1.0).abs() > FREQ_TOL {
            return domain(format!("frequencies sum to {total}"));
        }
        Ok(Self {
            freqs,
            sample_count,
        })
    }

    pub fn from_labels(labels: impl IntoIterator<Item = usize>, k: usize) -> Result<Self> {
        let mut counts = vec![0usize; k];
        let mut n = 0;
        for l in labels {
            if l >= k {
                return domain(format!("label {l} outside {k} groups"));
            }
            counts[l] += 1;
            n += 1;
        }
        if n == 0 {
            return domain("no labels to count");
        }
        Self::new(counts.iter().map(|&c| c as f64 / n as f64).collect(), n)
    }

    pub fn group_count(&self) -> usize {
        self.freqs.len()
    }

    /// Largest pairwise frequency gap.
    pub fn max_gap(&self) -> f64 {
        let max = self.freqs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.freqs.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }

    /// Most frequent group, ties to the lowest index.
    pub fn majority(&self) -> usize {
        let mut best = 0;
        for (i, &f) in self.freqs.iter().enumerate() {
            if f > self.freqs[best] {
                best = i;
            }
        }
        best
    }
}

/// Mean absolute pairwise frequency gap, `sum_{i<j} |f_i - f_j| / (K(K-1)/2)`.
pub fn rd_bias(freqs: &FreqVector) -> Result<f64> {
    let f = &freqs.freqs;
    let k = f.len();
    if k < 2 {
        return domain("RD needs K >= 2");
    }
    // sorted ascending, sum_{i<j} (f_j - f_i) = sum_j f_j * (2j - (K-1))
    let mut sorted = f.clone();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted
        .iter()
        .enumerate()
        .map(|(j, &v)| v * (2.0 * j as f64 - (k - 1) as f64))
        .sum();
    Ok(total / (k * (k - 1) / 2) as f64)
}

pub fn label_freqs(records: &[GenRecord], k: usize) -> Result<FreqVector> {
    FreqVector::from_labels(records.iter().map(|r| r.label), k)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Token counts over all positions, normalized by `M * T`.
    #[default]
    UnigramPooled,
    /// One distribution per position; divergences average over positions.
    PerPosition,
}

/// Empirical token distribution estimated from `sample_count` sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDist {
    pub pooling: Pooling,
    /// A single row when pooled, one row per position otherwise.
    pub rows: Vec<Vec<f64>>,
    pub sample_count: usize,
}

impl EmpiricalDist {
    /// Probability vector over the alphabet; for per-position pooling this is the
    /// position average.
    pub fn probs(&self) -> Vec<f64> {
        let n = self.rows.len() as f64;
        let width = self.rows[0].len();
        (0..width)
            .map(|t| self.rows.iter().map(|r| r[t]).sum::<f64>() / n)
            .collect()
    }

    pub fn width(&self) -> usize {
        self.rows[0].len()
    }

    /// Distribution given directly as probabilities (a single pooled row).
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.is_empty()
            || probs.iter().any(|p| !p.is_finite() || *p < 0.0)
            || (total - 1.0).abs() > FREQ_TOL
        {
            return domain("probabilities must be non-negative and sum to 1");
        }
        Ok(Self {
            pooling: Pooling::UnigramPooled,
            rows: vec![probs],
            sample_count: 0,
        })
    }
}

pub fn empirical_dist(
    samples: &[TokenSequence],
    image_token_count: usize,
    pooling: Pooling,
) -> Result<EmpiricalDist> {
    let Some(first) = samples.first() else {
        return domain("no samples");
    };
    let len = first.len();
    if len == 0 {
        return domain("empty sequences");
    }
    if samples.iter().any(|s| s.len() != len) {
        return domain("ragged sample lengths");
    }
    for s in samples {
        s.validate(image_token_count)?;
    }
    let m = samples.len();
    let rows = match pooling {
        Pooling::UnigramPooled => {
            let mut counts = vec![0usize; image_token_count];
            for s in samples {
                for &t in s.tokens() {
                    counts[t as usize] += 1;
                }
            }
            let n = (m * len) as f64;
            vec![counts.iter().map(|&c| c as f64 / n).collect()]
        }
        Pooling::PerPosition => (0..len)
            .map(|p| {
                let mut counts = vec![0usize; image_token_count];
                for s in samples {
                    counts[s.tokens()[p] as usize] += 1;
                }
                counts.iter().map(|&c| c as f64 / m as f64).collect()
            })
            .collect(),
    };
    Ok(EmpiricalDist {
        pooling,
        rows,
        sample_count: m,
    })
}

/// `sum p log(p/q)` in nats; `+inf` where `p > 0` meets `q = 0`.
pub fn kl_vec(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi == 0.0 {
                0.0
            } else if qi == 0.0 {
                f64::INFINITY
            } else {
                pi * (pi / qi).ln()
            }
        })
        .sum()
}

pub fn jsd_vec(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl_vec(p, &m) + 0.5 * kl_vec(q, &m)
}

fn check_compatible(p: &EmpiricalDist, q: &EmpiricalDist) -> Result<()> {
    if p.width() != q.width() {
        return domain(format!(
            "alphabet sizes differ: {} vs {}",
            p.width(),
            q.width()
        ));
    }
    if p.pooling != q.pooling || p.rows.len() != q.rows.len() {
        return domain("distributions use different pooling");
    }
    Ok(())
}

fn row_average(p: &EmpiricalDist, q: &EmpiricalDist, f: fn(&[f64], &[f64]) -> f64) -> f64 {
    let n = p.rows.len() as f64;
    p.rows
        .iter()
        .zip(&q.rows)
        .map(|(a, b)| f(a, b))
        .sum::<f64>()
        / n
}

pub fn kl(p: &EmpiricalDist, q: &EmpiricalDist) -> Result<f64> {
    check_compatible(p, q)?;
    Ok(row_average(p, q, kl_vec))
}

/// Jensen–Shannon divergence in nats, in `[0, ln 2]`.
pub fn jsd(p: &EmpiricalDist, q: &EmpiricalDist) -> Result<f64> {
    check_compatible(p, q)?;
    Ok(row_average(p, q, jsd_vec))
}

/// Draws `n` sequences for `prompt`, one derived seed per sample.
pub fn sample_many(
    model: &ARModel,
    prompt: u32,
    n: usize,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    (0..n)
        .into_par_iter()
        .map(|i| model.sample_sequence(prompt, derive_seed(seed, &[prompt as u64, i as u64])))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocateReport {
    pub prompt: u32,
    /// JSD between the neutral-prompt distribution and each augmented prompt's.
    pub jsd: Vec<f64>,
    /// Oracle-labelled majority group among the neutral samples.
    pub majority: usize,
    pub neutral_freqs: FreqVector,
    pub argmin_jsd: usize,
    /// Whether the closest augmented distribution belongs to the majority group.
    pub flag: bool,
}

impl LocateReport {
    pub fn max_min_gap(&self) -> f64 {
        let max = self.jsd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.jsd.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }
}

/// Compares the token distribution under a neutral prompt with those under each
/// demographic-augmented prompt.
pub fn locate_lm_bias(
    model: &ARModel,
    world: &WorldSpec,
    neutral_prompt: u32,
    augmented_prompts: &[u32],
    m: usize,
    pooling: Pooling,
    seed: u64,
) -> Result<LocateReport> {
    if m < 100 {
        return domain(format!("need M >= 100 samples, got {m}"));
    }
    let k = world.group_count();
    if augmented_prompts.len() != k {
        return domain(format!(
            "expected {k} augmented prompts, got {}",
            augmented_prompts.len()
        ));
    }
    world.check_model(model)?;
    let width = world.vocab.image_token_count;
    let neutral = sample_many(model, neutral_prompt, m, seed)?;
    let neutral_dist = empirical_dist(&neutral, width, pooling)?;
    let neutral_freqs = FreqVector::from_labels(neutral.iter().map(|z| world.classify(z)), k)?;
    let jsd = augmented_prompts
        .iter()
        .map(|&p| {
            let samples = sample_many(model, p, m, seed)?;
            jsd(&neutral_dist, &empirical_dist(&samples, width, pooling)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut argmin_jsd = 0;
    for (i, &d) in jsd.iter().enumerate() {
        if d < jsd[argmin_jsd] {
            argmin_jsd = i;
        }
    }
    let majority = neutral_freqs.majority();
    Ok(LocateReport {
        prompt: neutral_prompt,
        jsd,
        majority,
        neutral_freqs,
        argmin_jsd,
        flag: argmin_jsd == majority,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(f: &[f64]) -> FreqVector {
        FreqVector::new(f.to_vec(), 0).unwrap()
    }

    #[test]
    fn rd_examples() {
        assert_eq!(rd_bias(&fv(&[0.5, 0.5])).unwrap(), 0.0);
        assert!((rd_bias(&fv(&[0.9, 0.1])).unwrap() - 0.8).abs() < 1e-12);
        assert!((rd_bias(&fv(&[1.0, 0.0, 0.0, 0.0])).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn freq_vector_rejects_bad_input() {
        assert!(FreqVector::new(vec![1.0], 1).is_err());
        assert!(FreqVector::new(vec![0.6, 0.6], 1).is_err());
        assert!(FreqVector::from_labels(Vec::<usize>::new(), 2).is_err());
        assert!(FreqVector::from_labels(vec![0, 3], 2).is_err());
    }

    #[test]
    fn label_freq_counting() {
        let rec = |label| GenRecord {
            prompt_id: 0,
            tokens: TokenSequence(vec![0]),
            label,
        };
        let f = label_freqs(&[rec(0), rec(0), rec(1)], 2).unwrap();
        assert!((f.freqs[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((f.freqs[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(f.sample_count, 3);
        let g = label_freqs(&[rec(1), rec(0), rec(0)], 2).unwrap();
        assert_eq!(f, g);
        assert!(label_freqs(&[], 2).is_err());
    }

    #[test]
    fn pooled_counting() {
        let d = empirical_dist(&[TokenSequence(vec![0, 0, 1])], 2, Pooling::UnigramPooled).unwrap();
        assert_eq!(d.probs(), vec![2.0 / 3.0, 1.0 / 3.0]);
        let many = vec![TokenSequence(vec![0, 0, 1]); 7];
        assert_eq!(
            empirical_dist(&many, 2, Pooling::UnigramPooled)
                .unwrap()
                .probs(),
            d.probs()
        );
    }

    #[test]
    fn empirical_dist_errors() {
        assert!(empirical_dist(&[], 2, Pooling::UnigramPooled).is_err());
        let ragged = [TokenSequence(vec![0, 1]), TokenSequence(vec![0])];
        assert!(empirical_dist(&ragged, 2, Pooling::PerPosition).is_err());
        assert!(empirical_dist(&[TokenSequence(vec![5])], 2, Pooling::PerPosition).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = EmpiricalDist::from_probs(vec![1.0, 0.0]).unwrap();
        let q = EmpiricalDist::from_probs(vec![0.5, 0.5]).unwrap();
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        assert!((kl(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl(&q, &p).unwrap(), f64::INFINITY);
    }

    #[test]
    fn jsd_examples() {
        let p = EmpiricalDist::from_probs(vec![1.0, 0.0]).unwrap();
        let q = EmpiricalDist::from_probs(vec![0.0, 1.0]).unwrap();
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        assert!((jsd(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((jsd(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn mismatched_alphabets() {
        let p = EmpiricalDist::from_probs(vec![1.0, 0.0]).unwrap();
        let q = EmpiricalDist::from_probs(vec![0.5, 0.25, 0.25]).unwrap();
        assert!(jsd(&p, &q).is_err());
        assert!(kl(&p, &q).is_err());
    }

    #[test]
    fn locate_needs_enough_samples() {
        let w = WorldSpec::disjoint(vec!["a".into(), "b".into()], 8, 2, 4, 2).unwrap();
        let m = w.new_model(2).unwrap();
        let aug = [w.augmented_prompt(0, 0), w.augmented_prompt(0, 1)];
        assert!(locate_lm_bias(&m, &w, 0, &aug, 99, Pooling::UnigramPooled, 0).is_err());
        let r = locate_lm_bias(&m, &w, 0, &aug, 100, Pooling::UnigramPooled, 0).unwrap();
        assert!(r.jsd.iter().all(|&d| (0.0..=2f64.ln()).contains(&d)));
    }
}
