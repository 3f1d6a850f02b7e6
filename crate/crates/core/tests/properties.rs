//! Property tests for loss and metric invariants.

mod common;

use common::*;
use fairgen_core::losses::*;
use fairgen_core::metrics::*;
use fairgen_core::model::softmax;
use proptest::prelude::*;

fn prob_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("zero mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
    })
}

fn brute_rd(f: &[f64]) -> f64 {
    let k = f.len();
    let mut total = 0.0;
    let mut pairs = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += (f[i] - f[j]).abs();
            pairs += 1.0;
        }
    }
    total / pairs
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(row in prop::collection::vec(-15.0f64..15.0, 1..12)) {
        let p = softmax(&row);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn model_step_dists_sum_to_one(seed in any::<u64>(), ctx in prop::collection::vec(0u32..4, 0..4)) {
        let m = random_model(&mut rng(seed), 4, 2, 4, 2, 3.0);
        let p = m.next_token_dist(1, &ctx).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn balance_penalty_symmetric_and_bounded(u in -60.0f64..60.0) {
        let a = bal_from_log_or(u);
        let b = bal_from_log_or(-u);
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= 0.0 && a <= (1.25f64).ln());
        prop_assert!(orpo_from_log_or(u) >= 0.0);
    }

    #[test]
    fn pair_loss_symmetric_on_models(seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = random_model(&mut r, 3, 1, 4, 1, 3.0);
        let a = random_seq(&mut r, 3, 4);
        let b = random_seq(&mut r, 3, 4);
        for mode in [ProbMode::LengthNormalized, ProbMode::RawProduct] {
            let ab = bpo_pair_loss(&m, 0, &a, &b, mode).unwrap().value;
            let ba = bpo_pair_loss(&m, 0, &b, &a, mode).unwrap().value;
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab <= (1.25f64).ln());
            let lor = log_odds_ratio(&m, 0, &a, &b, mode).unwrap();
            prop_assert!((lor + log_odds_ratio(&m, 0, &b, &a, mode).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn odds_ratio_reciprocal(pa in 0.01f64..0.99, pb in 0.01f64..0.99) {
        let a = SeqScore::from_normalized_prob(pa, 3).unwrap();
        let b = SeqScore::from_normalized_prob(pb, 3).unwrap();
        let prod = odds_ratio(&a, &b).unwrap() * odds_ratio(&b, &a).unwrap();
        prop_assert!((prod - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dpo_preferences_complement(
        a in -50.0f64..0.0, b in -50.0f64..0.0, c in -50.0f64..0.0, d in -50.0f64..0.0,
        beta in 0.01f64..10.0,
    ) {
        let wl = dpo_bt_preference(a, b, c, d, beta).unwrap();
        let lw = dpo_bt_preference(b, a, d, c, beta).unwrap();
        prop_assert_eq!(wl + lw, 1.0);
        prop_assert!((0.0..=1.0).contains(&wl));
    }

    #[test]
    fn multigroup_rotation_invariant(seed in any::<u64>(), k in 2usize..=5, shift in 0usize..5) {
        let mut r = rng(seed);
        let m = random_model(&mut r, 3, 1, 3, 1, 3.0);
        let seqs: Vec<_> = (0..k).map(|_| random_seq(&mut r, 3, 3)).collect();
        let mut rotated = seqs.clone();
        rotated.rotate_left(shift % k);
        let rec = |s: Vec<_>| fairgen_core::BalancedRecord { prompt_id: 0, group_sequences: s };
        for pairing in [Pairing::Cyclic, Pairing::AllPairs] {
            let x = bpo_multigroup_loss(&m, &rec(seqs.clone()), pairing, ProbMode::LengthNormalized).unwrap().value;
            let y = bpo_multigroup_loss(&m, &rec(rotated.clone()), pairing, ProbMode::LengthNormalized).unwrap().value;
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rd_matches_pairwise_enumeration(f in (2usize..=5).prop_flat_map(prob_vec)) {
        let fv = FreqVector::new(f.clone(), 0).unwrap();
        let rd = rd_bias(&fv).unwrap();
        prop_assert!((rd - brute_rd(&f)).abs() < 1e-12);
        prop_assert!(rd >= 0.0 && rd <= 2.0 / f.len() as f64 + 1e-12);
    }

    #[test]
    fn jsd_symmetric_bounded(pq in (2usize..10).prop_flat_map(|n| (prob_vec(n), prob_vec(n)))) {
        let (p, q) = pq;
        let a = jsd_vec(&p, &q);
        prop_assert!((a - jsd_vec(&q, &p)).abs() < 1e-12);
        prop_assert!((-1e-15..=std::f64::consts::LN_2 + 1e-12).contains(&a));
        prop_assert!(jsd_vec(&p, &p).abs() < 1e-15);
        prop_assert!(kl_vec(&p, &q) >= -1e-12);
    }

    #[test]
    fn jsd_positive_when_different(p in prob_vec(4), i in 0usize..4) {
        let mut q = p.clone();
        let j = (i + 1) % 4;
        let moved = q[i] * 0.5;
        prop_assume!(moved > 1e-6);
        q[i] -= moved;
        q[j] += moved;
        prop_assert!(jsd_vec(&p, &q) > 0.0);
    }

    #[test]
    fn pooled_distribution_is_position_average(seed in any::<u64>(), m in 1usize..20) {
        let mut r = rng(seed);
        let samples: Vec<_> = (0..m).map(|_| random_seq(&mut r, 5, 4)).collect();
        let pooled = empirical_dist(&samples, 5, Pooling::UnigramPooled).unwrap();
        let per = empirical_dist(&samples, 5, Pooling::PerPosition).unwrap();
        for (a, b) in pooled.probs().iter().zip(per.probs()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let mut doubled = samples.clone();
        doubled.extend(samples.iter().cloned());
        prop_assert_eq!(empirical_dist(&doubled, 5, Pooling::PerPosition).unwrap().rows, per.rows);
    }
}
