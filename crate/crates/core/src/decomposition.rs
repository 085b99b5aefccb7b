//! Rank-grouped aggregation and the three-way split of cross-entropy.
//!
//! Grouping the per-token losses `-ln s` by rank-based error `e` gives
//!
//! ```text
//! CE = -Σ_e p_e ln Q_e
//!    = -Σ_e p_e ln p_e  +  Σ_e p_e ln(p_e / q_e)  -  ln C
//!       (error-entropy)     (self-alignment)         (confidence)
//! ```
//!
//! where `p_e = n_e / N`, `Q_e` is the geometric mean of the scores in group
//! `e`, `C = Σ_e Q_e` and `q_e = Q_e / C`. Everything here works in natural
//! log. [`direct_ce`] computes the loss straight from the per-rank sums and is
//! the independent check for [`decompose`].

use std::borrow::Borrow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{compensated_sum, log_sum_exp, CompensatedSum};
use crate::records::PredictionRecord;

/// Relative tolerance of the decomposition identity.
pub const IDENTITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DecompositionError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("zero probability score in rank group {rank}")]
    ZeroScore { rank: u64 },
    #[error("non-finite log-score sum in rank group {rank}")]
    NonFinite { rank: u64 },
}

/// Sufficient statistics for one rank group.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RankStats {
    pub count: u64,
    sum_lns: CompensatedSum,
}

impl RankStats {
    pub fn sum_lns(&self) -> f64 {
        self.sum_lns.value()
    }

    /// Log of the geometric mean score of the group.
    pub fn mean_lns(&self) -> f64 {
        self.sum_lns() / self.count as f64
    }
}

/// Per-rank counts and log-score sums, mergeable across shards.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankAggregate {
    per_rank: BTreeMap<u64, RankStats>,
    total: u64,
}

impl RankAggregate {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rbe: u64, ln_score: f64) {
        let stats = self.per_rank.entry(rbe).or_default();
        stats.count += 1;
        stats.sum_lns.add(ln_score);
        self.total += 1;
    }

    pub fn push_record(&mut self, record: &PredictionRecord) {
        self.push(record.rbe, record.ln_score);
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn support_size(&self) -> usize {
        self.per_rank.len()
    }

    /// Rank groups in ascending rank order.
    pub fn ranks(&self) -> impl Iterator<Item = (u64, &RankStats)> + '_ {
        self.per_rank.iter().map(|(&e, s)| (e, s))
    }

    pub fn get(&self, rank: u64) -> Option<&RankStats> {
        self.per_rank.get(&rank)
    }

    /// Pointwise addition of counts and compensated sums.
    pub fn merge(mut self, other: &RankAggregate) -> RankAggregate {
        self.merge_in(other);
        self
    }

    pub fn merge_in(&mut self, other: &RankAggregate) {
        for (&rank, stats) in &other.per_rank {
            let mine = self.per_rank.entry(rank).or_default();
            mine.count += stats.count;
            mine.sum_lns.merge(&stats.sum_lns);
        }
        self.total += other.total;
    }
}

/// Groups records by rank-based error.
pub fn accumulate<I>(records: I) -> Result<RankAggregate, DecompositionError>
where
    I: IntoIterator,
    I::Item: Borrow<PredictionRecord>,
{
    let mut agg = RankAggregate::new();
    for r in records {
        agg.push_record(r.borrow());
    }
    if agg.is_empty() {
        return Err(DecompositionError::EmptyCorpus);
    }
    Ok(agg)
}

/// `merge(a, b)` as a free function.
pub fn merge(a: &RankAggregate, b: &RankAggregate) -> RankAggregate {
    a.clone().merge(b)
}

/// Empirical pmf of the rank-based error.
#[derive(Debug, Clone, PartialEq)]
pub struct RbeDistribution {
    pub p: BTreeMap<u64, f64>,
    /// `ln p_e`, computed as `ln n_e - ln N`.
    pub ln_p: BTreeMap<u64, f64>,
}

impl RbeDistribution {
    pub fn support(&self) -> Vec<u64> {
        self.p.keys().copied().collect()
    }
}

pub fn rbe_distribution(agg: &RankAggregate) -> RbeDistribution {
    let n = agg.total as f64;
    let ln_n = n.ln();
    let mut p = BTreeMap::new();
    let mut ln_p = BTreeMap::new();
    for (e, s) in agg.ranks() {
        p.insert(e, s.count as f64 / n);
        ln_p.insert(e, (s.count as f64).ln() - ln_n);
    }
    RbeDistribution { p, ln_p }
}

/// Group geometric means and their normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDistribution {
    /// `ln Q_e`, the log geometric mean score of each group.
    pub ln_q_mean: BTreeMap<u64, f64>,
    /// Normalized `q_e = Q_e / C`.
    pub q: BTreeMap<u64, f64>,
    /// `ln q_e`, kept to avoid an exp/log round trip.
    pub ln_q: BTreeMap<u64, f64>,
    /// `ln C`, the log of the summed geometric means.
    pub ln_c: f64,
}

pub fn score_distribution(agg: &RankAggregate) -> Result<ScoreDistribution, DecompositionError> {
    if agg.is_empty() {
        return Err(DecompositionError::EmptyCorpus);
    }
    let mut ln_q_mean = BTreeMap::new();
    for (e, s) in agg.ranks() {
        let m = s.mean_lns();
        if m == f64::NEG_INFINITY {
            return Err(DecompositionError::ZeroScore { rank: e });
        }
        if !m.is_finite() {
            return Err(DecompositionError::NonFinite { rank: e });
        }
        ln_q_mean.insert(e, m);
    }
    let values: Vec<f64> = ln_q_mean.values().copied().collect();
    let ln_c = log_sum_exp(&values);
    let ln_q: BTreeMap<u64, f64> = ln_q_mean.iter().map(|(&e, &m)| (e, m - ln_c)).collect();
    let q = ln_q.iter().map(|(&e, &l)| (e, l.exp())).collect();
    Ok(ScoreDistribution {
        ln_q_mean,
        q,
        ln_q,
        ln_c,
    })
}

/// Token-averaged cross-entropy straight from the per-rank sums.
pub fn direct_ce(agg: &RankAggregate) -> f64 {
    let total = compensated_sum(agg.ranks().map(|(_, s)| s.sum_lns()));
    -total / agg.total as f64
}

/// The decomposed loss of one corpus cell, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub ce: f64,
    pub ee: f64,
    pub sa: f64,
    pub conf: f64,
    /// `ce - (ee + sa - conf)`.
    pub residual: f64,
    pub n: u64,
    pub support_size: u64,
}

impl Decomposition {
    pub fn identity_holds(&self) -> bool {
        self.residual.abs() <= IDENTITY_TOLERANCE * self.ce.abs().max(1.0)
    }

    /// Rescales every log-valued field by `1 / ln(base)`.
    pub fn in_base(&self, base: f64) -> Decomposition {
        let k = base.ln();
        Decomposition {
            ce: self.ce / k,
            ee: self.ee / k,
            sa: self.sa / k,
            conf: self.conf / k,
            residual: self.residual / k,
            ..*self
        }
    }

    /// Inverse of [`Decomposition::in_base`]: values in base `base` back to nats.
    pub fn from_base(&self, base: f64) -> Decomposition {
        let k = base.ln();
        Decomposition {
            ce: self.ce * k,
            ee: self.ee * k,
            sa: self.sa * k,
            conf: self.conf * k,
            residual: self.residual * k,
            ..*self
        }
    }
}

/// Splits the cross-entropy of `agg` into error-entropy, self-alignment and
/// confidence.
///
/// Sums run over ranks in ascending order with compensation. Self-alignment
/// is accumulated as `Σ p_e (expm1(d_e) - d_e)` with `d_e = ln q_e - ln p_e`;
/// this equals `Σ p_e ln(p_e/q_e)` because both distributions sum to one, and
/// every term is non-negative, so rounding never drives it below zero.
pub fn decompose(agg: &RankAggregate) -> Result<Decomposition, DecompositionError> {
    let scores = score_distribution(agg)?;
    let rbe = rbe_distribution(agg);

    let ee = compensated_sum(rbe.p.iter().map(|(e, &p)| -p * rbe.ln_p[e]));
    let ee = ee.clamp(0.0, (agg.support_size() as f64).ln());

    let sa = compensated_sum(rbe.p.iter().map(|(e, &p)| {
        let d = scores.ln_q[e] - rbe.ln_p[e];
        p * (d.exp_m1() - d)
    }));

    let conf = scores.ln_c;
    let ce = direct_ce(agg);
    let residual = ce - (ee + sa - conf);
    Ok(Decomposition {
        ce,
        ee,
        sa,
        conf,
        residual,
        n: agg.total,
        support_size: agg.support_size() as u64,
    })
}

/// `ln Σ_{e ∈ support} 1/(e+1)`: the largest confidence any proper softmax can
/// reach on this support, attained when `Q_e = 1/(e+1)` for every group.
pub fn harmonic_conf_bound(agg: &RankAggregate) -> f64 {
    harmonic_bound_over(agg.ranks().map(|(e, _)| e))
}

pub(crate) fn harmonic_bound_over<I: IntoIterator<Item = u64>>(support: I) -> f64 {
    compensated_sum(support.into_iter().map(|e| 1.0 / (e as f64 + 1.0))).ln()
}
