#![allow(dead_code)]

use fairgen_core::model::{ARModel, GradTable, RowKey, TokenSequence, Vocabulary};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn labels(k: usize) -> Vec<String> {
    (0..k).map(|g| format!("g{g}")).collect()
}

/// Every context of length 0..=order over `width` tokens.
pub fn all_contexts(width: usize, order: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..order {
        let mut next = Vec::new();
        for ctx in &frontier {
            for t in 0..width as u32 {
                let mut c: Vec<u32> = ctx.clone();
                c.push(t);
                next.push(c);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

pub fn all_keys(model: &ARModel) -> Vec<RowKey> {
    let ctxs = all_contexts(model.width(), model.order);
    (0..model.num_prompts)
        .flat_map(|p| ctxs.iter().map(move |c| RowKey::new(p, c)))
        .collect()
}

/// Model with every row filled with uniform draws from `[-bound, bound]`.
pub fn random_model(
    r: &mut impl Rng,
    width: usize,
    order: usize,
    seq_len: usize,
    prompts: u32,
    bound: f64,
) -> ARModel {
    let v = Vocabulary::new(2, width, labels(2)).unwrap();
    let mut m = ARModel::new(v, order, seq_len, prompts).unwrap();
    for key in all_keys(&m) {
        let row = (0..width).map(|_| r.random_range(-bound..=bound)).collect();
        m.set_row(key, row).unwrap();
    }
    m
}

pub fn random_seq(r: &mut impl Rng, width: usize, len: usize) -> TokenSequence {
    TokenSequence((0..len).map(|_| r.random_range(0..width as u32)).collect())
}

/// Central finite differences of `f` over every logit of `model`.
pub fn fd_grad(model: &ARModel, eps: f64, f: impl Fn(&ARModel) -> f64) -> GradTable {
    let mut out = GradTable::new();
    let mut work = model.clone();
    for key in all_keys(model) {
        let base = model.logits_row(&key).into_owned();
        for i in 0..base.len() {
            let mut up = base.clone();
            up[i] += eps;
            work.set_row(key.clone(), up).unwrap();
            let fp = f(&work);
            let mut down = base.clone();
            down[i] -= eps;
            work.set_row(key.clone(), down).unwrap();
            let fm = f(&work);
            out.row_mut(key.clone(), base.len())[i] = (fp - fm) / (2.0 * eps);
        }
        work.set_row(key, base).unwrap();
    }
    out
}

/// Max abs difference over every row of the model (missing rows count as zero).
pub fn grad_gap(model: &ARModel, a: &GradTable, b: &GradTable) -> f64 {
    let zeros = vec![0.0; model.width()];
    all_keys(model)
        .iter()
        .flat_map(|k| {
            let x = a.row(k).unwrap_or(&zeros).to_vec();
            let y = b.row(k).unwrap_or(&zeros).to_vec();
            x.into_iter()
                .zip(y)
                .map(|(p, q)| (p - q).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}
