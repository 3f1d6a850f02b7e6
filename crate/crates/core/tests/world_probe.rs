//! Synthetic world, sampler and linear probe checked against counting oracles.

mod common;

use common::*;
use fairgen_core::metrics::{label_freqs, sample_many};
use fairgen_core::model::{ARModel, RowKey, TokenSequence, Vocabulary};
use fairgen_core::probe::{macro_scores, train_probe, ProbeConfig};
use fairgen_core::world::{Embedding, WorldSpec};

fn overlapping_world() -> WorldSpec {
    // two groups over two signal tokens, TV distance 0.2, Bayes rate 0.6
    WorldSpec {
        vocab: Vocabulary::new(8, 4, labels(2)).unwrap(),
        seq_len: 3,
        base_prompts: 2,
        signal_positions: vec![0],
        signal_dists: vec![vec![0.6, 0.4, 0.0, 0.0], vec![0.4, 0.6, 0.0, 0.0]],
        content_dist: vec![0.25; 4],
        embed_dim: 6,
        embed_noise_sigma: 0.1,
    }
}

#[test]
fn uniform_sampler_frequencies() {
    let v = Vocabulary::new(2, 4, labels(2)).unwrap();
    let m = ARModel::new(v, 1, 1, 1).unwrap();
    let samples = sample_many(&m, 0, 40_000, 17).unwrap();
    let mut counts = [0usize; 4];
    for s in &samples {
        counts[s.tokens()[0] as usize] += 1;
    }
    for c in counts {
        assert!((c as f64 / 40_000.0 - 0.25).abs() <= 0.01, "{counts:?}");
    }
}

#[test]
fn degenerate_sampler_emits_dominant_token() {
    let v = Vocabulary::new(2, 4, labels(2)).unwrap();
    let mut m = ARModel::new(v, 0, 1, 1).unwrap();
    m.set_row(RowKey::new(0, &[]), vec![0.0, 20.0, 0.0, 0.0])
        .unwrap();
    let samples = sample_many(&m, 0, 10_000, 3).unwrap();
    let hits = samples.iter().filter(|s| s.tokens()[0] == 1).count();
    assert!(hits as f64 / 10_000.0 >= 0.999);
}

#[test]
fn sampling_is_reproducible() {
    let m = random_model(&mut rng(9), 3, 2, 6, 2, 2.0);
    let a = sample_many(&m, 1, 50, 5).unwrap();
    assert_eq!(a, sample_many(&m, 1, 50, 5).unwrap());
    assert_ne!(a, sample_many(&m, 1, 50, 6).unwrap());
}

#[test]
fn classify_matches_likelihood_enumeration() {
    let w = overlapping_world();
    for t0 in 0..4u32 {
        for t1 in 0..4u32 {
            let z = TokenSequence(vec![t0, t1, 0]);
            let lik: Vec<f64> = w.signal_dists.iter().map(|d| d[t0 as usize]).collect();
            let expected = if lik[1] > lik[0] { 1 } else { 0 };
            assert_eq!(w.classify(&z), expected);
        }
    }
}

#[test]
fn classify_reaches_bayes_rate_on_overlapping_world() {
    let w = overlapping_world();
    let n = 20_000;
    let mut correct = 0;
    for i in 0..n {
        let g = i % 2;
        let z = w.sample_group_sequence(g, i as u64).unwrap();
        correct += (w.classify(&z) == g) as usize;
    }
    // Bayes rate = sum_t max_g 0.5 p_g(t) = 0.6
    let acc = correct as f64 / n as f64;
    assert!(acc >= 0.58, "{acc}");
}

#[test]
fn noiseless_signal_is_recovered() {
    let w = WorldSpec::disjoint(labels(3), 12, 2, 6, 4).unwrap();
    for g in 0..3 {
        for s in 0..50 {
            let z = w.sample_group_sequence(g, s).unwrap();
            assert_eq!(w.classify(&z), g);
        }
    }
}

#[test]
fn biased_corpus_label_counts() {
    let w = WorldSpec::disjoint(labels(2), 16, 2, 8, 10).unwrap();
    let recs = w
        .gen_biased_pretrain(&w.neutral_prompts(), &[0.9, 0.1], 5000, 4)
        .unwrap();
    let f = label_freqs(&recs, 2).unwrap();
    assert!((f.freqs[0] - 0.9).abs() <= 0.02 && (f.freqs[1] - 0.1).abs() <= 0.02);
    assert!(recs.iter().all(|r| w.classify(&r.tokens) == r.label));
    let degenerate = w
        .gen_biased_pretrain(&w.neutral_prompts(), &[1.0, 0.0], 200, 4)
        .unwrap();
    assert!(degenerate.iter().all(|r| r.label == 0));
    assert!(w.gen_biased_pretrain(&[0], &[1.2, -0.2], 10, 0).is_err());
}

#[test]
fn balanced_dataset_is_balanced() {
    let w = WorldSpec::disjoint(labels(2), 16, 2, 8, 10).unwrap();
    let recs = w.gen_balanced_dataset(&w.neutral_prompts(), 5, 1).unwrap();
    assert_eq!(recs.len(), 50);
    let mut counts = [0usize; 2];
    for r in &recs {
        for z in &r.group_sequences {
            counts[w.classify(z)] += 1;
        }
    }
    assert_eq!(counts, [50, 50]);
    assert!(w.gen_balanced_dataset(&[], 5, 1).is_err());
}

fn sq_dist(a: &Embedding, b: &Embedding) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).powi(2))
        .sum()
}

#[test]
fn embeddings_cluster_by_group() {
    let mut w = WorldSpec::disjoint(labels(2), 16, 2, 8, 1).unwrap();
    w.embed_noise_sigma = 0.0;
    let e = w.gen_embeddings(50, 2).unwrap();
    for a in &e {
        for b in &e {
            let block = |x: &Embedding| x.values[..2].to_vec();
            assert_eq!(block(a) == block(b), a.label == b.label);
        }
    }
    w.embed_noise_sigma = 0.1;
    let e = w.gen_embeddings(50, 2).unwrap();
    let (mut within, mut between, mut nw, mut nb) = (0.0, 0.0, 0, 0);
    for (i, a) in e.iter().enumerate() {
        for b in &e[i + 1..] {
            if a.label == b.label {
                within += sq_dist(a, b);
                nw += 1;
            } else {
                between += sq_dist(a, b);
                nb += 1;
            }
        }
    }
    assert!(within / (nw as f64) < between / (nb as f64));
}

#[test]
fn probe_separates_clean_and_noisy_embeddings() {
    let mut w = WorldSpec::disjoint(labels(2), 16, 2, 8, 1).unwrap();
    w.embed_noise_sigma = 0.0;
    let (_, r) = train_probe(&w.gen_embeddings(200, 3).unwrap(), &ProbeConfig::default()).unwrap();
    assert_eq!(r.accuracy, 1.0);
    w.embed_noise_sigma = 0.1;
    let (_, r) = train_probe(&w.gen_embeddings(200, 3).unwrap(), &ProbeConfig::default()).unwrap();
    assert!(r.accuracy >= 0.99, "{r:?}");
    assert_eq!(r.train_size + r.test_size, 400);
}

#[test]
fn probe_on_shuffled_labels_is_chance() {
    let w = WorldSpec::disjoint(labels(2), 16, 2, 8, 1).unwrap();
    let mut e = w.gen_embeddings(1000, 5).unwrap();
    let mut r = rng(7);
    let mut labels: Vec<usize> = e.iter().map(|x| x.label).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut r);
    for (x, l) in e.iter_mut().zip(labels) {
        x.label = l;
    }
    let (_, rep) = train_probe(&e, &ProbeConfig::default()).unwrap();
    assert!((rep.accuracy - 0.5).abs() <= 0.1, "{rep:?}");
}

#[test]
#[allow(clippy::needless_range_loop)]
fn macro_scores_match_confusion_matrix() {
    let mut r = rng(11);
    for _ in 0..50 {
        let k = 3;
        let truth: Vec<usize> = (0..60)
            .map(|_| rand::Rng::random_range(&mut r, 0..k))
            .collect();
        let pred: Vec<usize> = (0..60)
            .map(|_| rand::Rng::random_range(&mut r, 0..k))
            .collect();
        let mut cm = vec![vec![0.0; k]; k];
        for (&t, &p) in truth.iter().zip(&pred) {
            cm[t][p] += 1.0;
        }
        let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
        for c in 0..k {
            let col: f64 = (0..k).map(|t| cm[t][c]).sum();
            let row: f64 = cm[c].iter().sum();
            let p = if col > 0.0 { cm[c][c] / col } else { 0.0 };
            let rc = if row > 0.0 { cm[c][c] / row } else { 0.0 };
            p_sum += p;
            r_sum += rc;
            f_sum += if p + rc > 0.0 {
                2.0 * p * rc / (p + rc)
            } else {
                0.0
            };
        }
        let diag: f64 = (0..k).map(|c| cm[c][c]).sum();
        let (acc, p, rc, f1) = macro_scores(&truth, &pred, k);
        assert!((acc - diag / 60.0).abs() < 1e-12);
        assert!((p - p_sum / 3.0).abs() < 1e-12);
        assert!((rc - r_sum / 3.0).abs() < 1e-12);
        assert!((f1 - f_sum / 3.0).abs() < 1e-12);
    }
}
