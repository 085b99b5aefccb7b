//! Distribution-level views: binned rank distributions, `p` vs `q` overlays,
//! mean score-by-rank-position profiles and checkpoint dynamics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposition::{Decomposition, RbeDistribution, ScoreDistribution};
use crate::numeric::{compensated_sum, CompensatedSum};
use crate::records::{CorpusManifest, PredictionRecord};

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("support mismatch between p and q")]
    SupportMismatch,
    #[error("no profiled records at rbe={0}")]
    NoProfiledRecords(u64),
    #[error("profile length K must be positive")]
    ZeroLength,
    #[error("no cells to build a series from")]
    NoCells,
    #[error("cells mix models or datasets: {0}")]
    MixedCells(String),
    #[error("cell for {0} has no checkpoint_step")]
    MissingStep(String),
    #[error("duplicate checkpoint steps: {0:?}")]
    DuplicateSteps(Vec<u64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinScheme {
    Raw,
    Log2,
}

impl FromStr for BinScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(BinScheme::Raw),
            "log2" => Ok(BinScheme::Log2),
            other => Err(format!("unknown bin scheme `{other}` (expected raw or log2)")),
        }
    }
}

impl fmt::Display for BinScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BinScheme::Raw => "raw",
            BinScheme::Log2 => "log2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    /// Inclusive.
    pub lo: u64,
    /// Exclusive. Saturates at `u64::MAX` for the last log2 bin.
    pub hi: u64,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinnedSeries {
    pub scheme: BinScheme,
    pub bins: Vec<Bin>,
}

impl BinnedSeries {
    pub fn total_mass(&self) -> f64 {
        compensated_sum(self.bins.iter().map(|b| b.mass))
    }
}

/// Index of the log2 bin holding `rank`: 0 → `[0,1)`, k ≥ 1 → `[2^(k-1), 2^k)`.
fn log2_bin(rank: u64) -> u32 {
    64 - rank.leading_zeros()
}

fn log2_edges(k: u32) -> (u64, u64) {
    if k == 0 {
        (0, 1)
    } else {
        let lo = 1u64 << (k - 1);
        let hi = 1u64.checked_shl(k).unwrap_or(u64::MAX);
        (lo, hi)
    }
}

/// Bins a sparse rank distribution.
///
/// `Raw` emits one unit-width bin per support rank. `Log2` emits every
/// power-of-two bin from `[0,1)` up to the one holding the largest rank,
/// including empty bins, so the bins partition `[0, max_rank]`.
pub fn bin_distribution(dist: &BTreeMap<u64, f64>, scheme: BinScheme) -> BinnedSeries {
    let bins = match scheme {
        BinScheme::Raw => dist
            .iter()
            .map(|(&e, &mass)| Bin {
                lo: e,
                hi: e.saturating_add(1),
                mass,
            })
            .collect(),
        BinScheme::Log2 => match dist.keys().next_back() {
            None => Vec::new(),
            Some(&max_rank) => {
                let n_bins = log2_bin(max_rank) + 1;
                let mut sums = vec![CompensatedSum::new(); n_bins as usize];
                for (&e, &mass) in dist {
                    sums[log2_bin(e) as usize].add(mass);
                }
                sums.iter()
                    .enumerate()
                    .map(|(k, s)| {
                        let (lo, hi) = log2_edges(k as u32);
                        Bin {
                            lo,
                            hi,
                            mass: s.value(),
                        }
                    })
                    .collect()
            }
        },
    };
    BinnedSeries { scheme, bins }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlayRow {
    pub rank: u64,
    pub p: f64,
    pub q: f64,
}

/// Paired `(e, p_e, q_e)` rows with their total-variation distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub rows: Vec<OverlayRow>,
    pub tv: f64,
}

pub fn overlay(p: &RbeDistribution, q: &ScoreDistribution) -> Result<Overlay, ProfileError> {
    overlay_maps(&p.p, &q.q)
}

/// Overlay of two sparse distributions that must share a support.
pub fn overlay_maps(p: &BTreeMap<u64, f64>, q: &BTreeMap<u64, f64>) -> Result<Overlay, ProfileError> {
    if p.len() != q.len() || p.keys().zip(q.keys()).any(|(a, b)| a != b) {
        return Err(ProfileError::SupportMismatch);
    }
    let rows: Vec<OverlayRow> = p
        .iter()
        .zip(q.values())
        .map(|((&rank, &p), &q)| OverlayRow { rank, p, q })
        .collect();
    let tv = 0.5 * compensated_sum(rows.iter().map(|r| (r.p - r.q).abs()));
    Ok(Overlay { rows, tv })
}

/// Arithmetic mean probability at each of the first K rank positions, over
/// records whose ground truth sat at a fixed rank.
///
/// This is a display statistic (typical score shapes), not the geometric mean
/// that feeds the decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreByRankProfile {
    pub condition_rbe: u64,
    /// Entry `i` is the mean score at rank position `i + 1`.
    pub mean_score: Vec<f64>,
    pub count: u64,
    /// Records at `condition_rbe` skipped for lacking a profile of length K.
    pub skipped: u64,
}

pub fn score_by_rank<'a, I>(records: I, rbe: u64, k: usize) -> Result<ScoreByRankProfile, ProfileError>
where
    I: IntoIterator<Item = &'a PredictionRecord>,
{
    let mut acc = ScoreByRankAccumulator::new(rbe, k)?;
    for r in records {
        acc.push(r);
    }
    acc.finish()
}

/// Streaming form of [`score_by_rank`].
#[derive(Debug, Clone)]
pub struct ScoreByRankAccumulator {
    rbe: u64,
    sums: Vec<CompensatedSum>,
    count: u64,
    skipped: u64,
}

impl ScoreByRankAccumulator {
    pub fn new(rbe: u64, k: usize) -> Result<Self, ProfileError> {
        if k == 0 {
            return Err(ProfileError::ZeroLength);
        }
        Ok(Self {
            rbe,
            sums: vec![CompensatedSum::new(); k],
            count: 0,
            skipped: 0,
        })
    }

    pub fn push(&mut self, record: &PredictionRecord) {
        if record.rbe != self.rbe {
            return;
        }
        match &record.topk_ln_scores {
            Some(topk) if topk.len() >= self.sums.len() => {
                for (s, &lns) in self.sums.iter_mut().zip(topk) {
                    s.add(lns.exp());
                }
                self.count += 1;
            }
            _ => self.skipped += 1,
        }
    }

    pub fn finish(self) -> Result<ScoreByRankProfile, ProfileError> {
        if self.count == 0 {
            return Err(ProfileError::NoProfiledRecords(self.rbe));
        }
        let n = self.count as f64;
        Ok(ScoreByRankProfile {
            condition_rbe: self.rbe,
            mean_score: self.sums.iter().map(|s| s.value() / n).collect(),
            count: self.count,
            skipped: self.skipped,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsRow {
    pub step: u64,
    pub ce: f64,
    pub ee: f64,
    pub sa: f64,
    pub conf: f64,
}

/// Components of one model on one dataset across training checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsSeries {
    pub model_name: String,
    pub dataset: String,
    pub rows: Vec<DynamicsRow>,
}

pub fn dynamics_series(cells: &[(CorpusManifest, Decomposition)]) -> Result<DynamicsSeries, ProfileError> {
    let (first, _) = cells.first().ok_or(ProfileError::NoCells)?;
    let mut rows = Vec::with_capacity(cells.len());
    for (m, d) in cells {
        if m.model_name != first.model_name || m.dataset != first.dataset {
            return Err(ProfileError::MixedCells(format!(
                "{}/{} vs {}/{}",
                first.model_name, first.dataset, m.model_name, m.dataset
            )));
        }
        let step = m
            .checkpoint_step
            .ok_or_else(|| ProfileError::MissingStep(m.model_name.clone()))?;
        rows.push(DynamicsRow {
            step,
            ce: d.ce,
            ee: d.ee,
            sa: d.sa,
            conf: d.conf,
        });
    }
    rows.sort_by_key(|r| r.step);
    let mut dups: Vec<u64> = rows
        .windows(2)
        .filter(|w| w[0].step == w[1].step)
        .map(|w| w[0].step)
        .collect();
    dups.dedup();
    if !dups.is_empty() {
        return Err(ProfileError::DuplicateSteps(dups));
    }
    Ok(DynamicsSeries {
        model_name: first.model_name.clone(),
        dataset: first.dataset.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(pairs: &[(u64, f64)]) -> BTreeMap<u64, f64> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn raw_binning_is_identity() {
        let d = dist(&[(0, 0.5), (3, 0.25), (9, 0.25)]);
        let b = bin_distribution(&d, BinScheme::Raw);
        let got: Vec<_> = b.bins.iter().map(|b| (b.lo, b.hi, b.mass)).collect();
        assert_eq!(got, vec![(0, 1, 0.5), (3, 4, 0.25), (9, 10, 0.25)]);
    }

    #[test]
    fn log2_binning_hand_example() {
        let d = dist(&[(0, 0.5), (1, 0.25), (2, 0.125), (3, 0.125)]);
        let b = bin_distribution(&d, BinScheme::Log2);
        let got: Vec<_> = b.bins.iter().map(|b| (b.lo, b.hi, b.mass)).collect();
        assert_eq!(got, vec![(0, 1, 0.5), (1, 2, 0.25), (2, 4, 0.25)]);
    }

    #[test]
    fn log2_binning_keeps_empty_bins() {
        let d = dist(&[(0, 0.5), (9, 0.5)]);
        let b = bin_distribution(&d, BinScheme::Log2);
        let edges: Vec<_> = b.bins.iter().map(|b| (b.lo, b.hi)).collect();
        assert_eq!(edges, vec![(0, 1), (1, 2), (2, 4), (4, 8), (8, 16)]);
        assert_eq!(b.bins[4].mass, 0.5);
        assert_eq!(b.total_mass(), 1.0);
        let top = bin_distribution(&dist(&[(u64::MAX - 1, 1.0)]), BinScheme::Log2);
        assert_eq!(top.bins.last().unwrap().hi, u64::MAX);
    }

    #[test]
    fn overlay_tv_examples() {
        let p = dist(&[(0, 1.0)]);
        assert_eq!(overlay_maps(&p, &p).unwrap().tv, 0.0);
        let p = dist(&[(0, 2.0 / 3.0), (1, 1.0 / 3.0)]);
        let q = dist(&[(0, 0.5), (1, 0.5)]);
        let o = overlay_maps(&p, &q).unwrap();
        assert!((o.tv - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(o.rows.len(), 2);
        assert_eq!(overlay_maps(&q, &p).unwrap().tv, o.tv);
    }

    #[test]
    fn overlay_support_mismatch() {
        let p = dist(&[(0, 1.0)]);
        let q = dist(&[(1, 1.0)]);
        assert_eq!(overlay_maps(&p, &q).unwrap_err(), ProfileError::SupportMismatch);
    }

    fn profiled(scores: &[f64]) -> PredictionRecord {
        let lns: Vec<f64> = scores.iter().map(|s| s.ln()).collect();
        PredictionRecord::new(0, 0, 0, lns[1], 1).with_topk(lns)
    }

    #[test]
    fn score_by_rank_examples() {
        let one = [profiled(&[0.5, 0.3, 0.2])];
        let p = score_by_rank(&one, 1, 3).unwrap();
        assert_eq!(p.count, 1);
        for (got, want) in p.mean_score.iter().zip([0.5, 0.3, 0.2]) {
            assert!((got - want).abs() < 1e-15);
        }

        let two = [profiled(&[0.5, 0.3, 0.2]), profiled(&[0.5, 0.3, 0.2])];
        let p2 = score_by_rank(&two, 1, 3).unwrap();
        assert_eq!(p2.count, 2);
        assert_eq!(p2.mean_score, p.mean_score);

        let mixed = [
            profiled(&[0.5, 0.3, 0.2]),
            profiled(&[0.7, 0.2, 0.1]),
            PredictionRecord::new(0, 0, 0, -1.0, 1),
            PredictionRecord::new(0, 0, 0, -1.0, 0),
        ];
        let p = score_by_rank(&mixed, 1, 3).unwrap();
        assert_eq!((p.count, p.skipped), (2, 1));
        for (got, want) in p.mean_score.iter().zip([0.6, 0.25, 0.15]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn score_by_rank_without_profiles() {
        let recs = [PredictionRecord::new(0, 0, 0, -1.0, 1)];
        let err = score_by_rank(&recs, 1, 3).unwrap_err();
        assert_eq!(err.to_string(), "no profiled records at rbe=1");
        assert_eq!(score_by_rank(&recs, 1, 0).unwrap_err(), ProfileError::ZeroLength);
    }

    fn cell(step: Option<u64>) -> (CorpusManifest, Decomposition) {
        let mut m = CorpusManifest::new("pythia-70m", "pythia", 18_915_328, "wiki", 50_000, 1);
        m.checkpoint_step = step;
        let s = step.unwrap_or(0) as f64;
        let d = Decomposition {
            ce: 3.0 - s * 1e-3,
            ee: 2.0,
            sa: 0.5,
            conf: -0.5,
            residual: 0.0,
            n: 1,
            support_size: 1,
        };
        (m, d)
    }

    #[test]
    fn dynamics_ordering_and_errors() {
        let single = dynamics_series(&[cell(Some(16))]).unwrap();
        assert_eq!(single.rows.len(), 1);

        let s = dynamics_series(&[cell(Some(128)), cell(Some(0)), cell(Some(16))]).unwrap();
        let steps: Vec<_> = s.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 16, 128]);

        let err = dynamics_series(&[cell(Some(0)), cell(Some(0))]).unwrap_err();
        assert_eq!(err, ProfileError::DuplicateSteps(vec![0]));

        assert!(matches!(dynamics_series(&[cell(None)]), Err(ProfileError::MissingStep(_))));
        let mut other = cell(Some(1));
        other.0.dataset = "c4".into();
        assert!(matches!(
            dynamics_series(&[cell(Some(0)), other]),
            Err(ProfileError::MixedCells(_))
        ));
        assert_eq!(dynamics_series(&[]).unwrap_err(), ProfileError::NoCells);
    }
}
