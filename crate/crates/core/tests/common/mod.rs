//! Helpers shared by the integration tests: random corpora and a naive,
//! independently written reference decomposition.

#![allow(dead_code)]

use std::collections::HashMap;

use cedecomp::PredictionRecord;
use rand::seq::index::sample;
use rand::Rng;

/// A random corpus with `support` distinct ranks and scores in (0, 1].
///
/// Ranks are scattered over `[0, 4·support)`; scores are uniform or
/// log-uniform down to 1e-12 so both ends of the range get exercised.
pub fn random_corpus<R: Rng>(rng: &mut R, support: usize) -> Vec<PredictionRecord> {
    let ranks = sample(rng, 4 * support, support);
    let mut out = Vec::new();
    let mut pos = 0u64;
    for rank in ranks.iter() {
        let count = rng.random_range(1..=8);
        for _ in 0..count {
            let score = if rng.random_bool(0.5) {
                1.0 - rng.random::<f64>()
            } else {
                10f64.powf(-12.0 * rng.random::<f64>())
            };
            out.push(PredictionRecord::new(pos / 512, pos % 512, 0, score.ln(), rank as u64));
            pos += 1;
        }
    }
    out
}

pub struct Naive {
    pub ce: f64,
    pub ee: f64,
    pub sa: f64,
    pub conf: f64,
    pub support: usize,
}

/// Textbook formulas with plain summation: `p_e = n_e/N`, `Q_e` the
/// geometric mean score of group `e`, `q = Q/ΣQ`.
pub fn naive(records: &[PredictionRecord]) -> Naive {
    let mut groups: HashMap<u64, (f64, f64)> = HashMap::new();
    let mut total_lns = 0.0;
    for r in records {
        let g = groups.entry(r.rbe).or_insert((0.0, 0.0));
        g.0 += 1.0;
        g.1 += r.ln_score;
        total_lns += r.ln_score;
    }
    let n = records.len() as f64;
    let c: f64 = groups.values().map(|(k, s)| (s / k).exp()).sum();
    let mut ee = 0.0;
    let mut sa = 0.0;
    for (k, s) in groups.values() {
        let p = k / n;
        let q = (s / k).exp() / c;
        ee -= p * p.ln();
        sa += p * (p / q).ln();
    }
    Naive {
        ce: -total_lns / n,
        ee,
        sa,
        conf: c.ln(),
        support: groups.len(),
    }
}
