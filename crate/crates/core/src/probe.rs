//! Linear probing of encoder embeddings with multinomial logistic regression.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{domain, FairgenError, Result};
use crate::model::softmax;
use crate::seed::rng_from;
use crate::world::Embedding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    /// `K x embed_dim`
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub split_ratio: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            split_ratio: 0.8,
            epochs: 200,
            lr: 0.1,
            seed: 0,
        }
    }
}

/// Held-out metrics; precision, recall and F1 are macro-averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub train_accuracy: f64,
    pub split_seed: u64,
    pub train_size: usize,
    pub test_size: usize,
}

impl ProbeModel {
    pub fn zeros(k: usize, dim: usize) -> Self {
        Self {
            weights: vec![vec![0.0; dim]; k],
            bias: vec![0.0; k],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(FairgenError::Shape {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect())
    }
}

/// Argmax of the affine scores, ties to the lowest label.
pub fn predict(probe: &ProbeModel, e: &Embedding) -> Result<usize> {
    let s = probe.scores(&e.values)?;
    let mut best = 0;
    for (i, &v) in s.iter().enumerate() {
        if v > s[best] {
            best = i;
        }
    }
    Ok(best)
}

fn cross_entropy(probe: &ProbeModel, data: &[&Embedding]) -> Result<f64> {
    let mut total = 0.0;
    for e in data {
        let p = softmax(&probe.scores(&e.values)?);
        total -= p[e.label].ln();
    }
    Ok(total / data.len() as f64)
}

/// Full-batch gradient descent on mean cross-entropy from a zero initialization.
/// Returns the probe and the loss before each epoch plus the final loss.
pub fn fit_logistic(
    data: &[&Embedding],
    k: usize,
    epochs: usize,
    lr: f64,
) -> Result<(ProbeModel, Vec<f64>)> {
    let Some(first) = data.first() else {
        return domain("no training data");
    };
    let dim = first.values.len();
    if let Some(e) = data.iter().find(|e| e.values.len() != dim) {
        return Err(FairgenError::Shape {
            expected: dim,
            got: e.values.len(),
        });
    }
    if let Some(e) = data.iter().find(|e| e.label >= k) {
        return domain(format!("label {} outside {k} classes", e.label));
    }
    let mut probe = ProbeModel::zeros(k, dim);
    let mut losses = Vec::with_capacity(epochs + 1);
    let n = data.len() as f64;
    for _ in 0..epochs {
        losses.push(cross_entropy(&probe, data)?);
        let mut gw = vec![vec![0.0; dim]; k];
        let mut gb = vec![0.0; k];
        for e in data {
            let mut p = softmax(&probe.scores(&e.values)?);
            p[e.label] -= 1.0;
            for c in 0..k {
                gb[c] += p[c];
                for (g, v) in gw[c].iter_mut().zip(&e.values) {
                    *g += p[c] * v;
                }
            }
        }
        for c in 0..k {
            probe.bias[c] -= lr * gb[c] / n;
            for (w, g) in probe.weights[c].iter_mut().zip(&gw[c]) {
                *w -= lr * g / n;
            }
        }
    }
    losses.push(cross_entropy(&probe, data)?);
    Ok((probe, losses))
}

/// Per-class confusion counts → macro precision / recall / F1 over every class
/// that occurs as a true or predicted label. Classes never predicted get
/// precision 0.
pub fn macro_scores(truth: &[usize], pred: &[usize], k: usize) -> (f64, f64, f64, f64) {
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fneg = vec![0usize; k];
    let mut present = vec![false; k];
    for (&t, &p) in truth.iter().zip(pred) {
        present[t] = true;
        present[p] = true;
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let classes: Vec<usize> = (0..k).filter(|&c| present[c]).collect();
    let m = classes.len() as f64;
    let (mut prec, mut rec, mut f1) = (0.0, 0.0, 0.0);
    for &c in &classes {
        let p = ratio(tp[c], tp[c] + fp[c]);
        let r = ratio(tp[c], tp[c] + fneg[c]);
        prec += p;
        rec += r;
        f1 += if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
    }
    let acc = ratio(tp.iter().sum(), truth.len());
    (acc, prec / m, rec / m, f1 / m)
}

pub fn train_probe(
    embeddings: &[Embedding],
    cfg: &ProbeConfig,
) -> Result<(ProbeModel, ProbeReport)> {
    if !(cfg.split_ratio > 0.0 && cfg.split_ratio < 1.0) {
        return domain(format!("split_ratio {} outside (0, 1)", cfg.split_ratio));
    }
    if embeddings.len() < 2 {
        return domain("need at least two embeddings");
    }
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    order.shuffle(&mut rng_from(cfg.seed));
    let n_train = ((embeddings.len() as f64 * cfg.split_ratio).round() as usize)
        .clamp(1, embeddings.len() - 1);
    let train: Vec<&Embedding> = order[..n_train].iter().map(|&i| &embeddings[i]).collect();
    let test: Vec<&Embedding> = order[n_train..].iter().map(|&i| &embeddings[i]).collect();
    let mut seen: Vec<usize> = train.iter().map(|e| e.label).collect();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return domain("training split contains a single class");
    }
    let k = embeddings.iter().map(|e| e.label).max().unwrap_or(0) + 1;
    let (probe, _) = fit_logistic(&train, k, cfg.epochs, cfg.lr)?;
    let eval = |set: &[&Embedding]| -> Result<(Vec<usize>, Vec<usize>)> {
        let truth = set.iter().map(|e| e.label).collect();
        let pred = set
            .iter()
            .map(|e| predict(&probe, e))
            .collect::<Result<_>>()?;
        Ok((truth, pred))
    };
    let (t_truth, t_pred) = eval(&train)?;
    let (truth, pred) = eval(&test)?;
    let (accuracy, precision, recall, f1) = macro_scores(&truth, &pred, k);
    let report = ProbeReport {
        accuracy,
        precision,
        recall,
        f1,
        train_accuracy: macro_scores(&t_truth, &t_pred, k).0,
        split_seed: cfg.seed,
        train_size: train.len(),
        test_size: test.len(),
    };
    Ok((probe, report))
}
