//! Synthetic record corpora with controlled rank distribution, self-alignment
//! and confidence.
//!
//! Ranks are drawn multinomially from a target distribution. Within each rank
//! group the log-scores scatter log-normally around a target `ln Q_e` and are
//! then shifted so the group's geometric mean hits `ln Q_e` exactly. The
//! targets are `ln Q_e = ln q_e + conf`, with `q` a mixture of the empirical
//! rank distribution and the uniform distribution on its support, so the
//! decomposition of a generated corpus is known in advance:
//! `EE = H(p̂)`, `SA = KL(p̂ ‖ q)` and `Conf = conf`.
//!
//! All randomness comes from ChaCha20 (`rand_chacha::ChaCha20Rng`) seeded
//! with `seed_from_u64(seed)`; corpus `i` of a scaling series draws from
//! stream `i`. The draw order is: one rank per record, then one normal
//! deviate per record in ascending rank group order, then one ground-truth
//! token id per record.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::decomposition::harmonic_bound_over;
use crate::numeric::{compensated_sum, CompensatedSum};
use crate::records::{CorpusManifest, PredictionRecord};

const DOC_LEN: u64 = 512;
const DEFAULT_VOCAB: u64 = 50_000;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("confidence target {requested} is infeasible on this support (feasible maximum {max})")]
    InfeasibleConfidence { requested: f64, max: f64 },
    #[error("target entropy {target} outside the attainable interval [0, {max}]")]
    EntropyOutOfRange { target: f64, max: f64 },
    #[error("self-alignment target {requested} exceeds the attainable maximum {max}")]
    InfeasibleAlignment { requested: f64, max: f64 },
}

/// Target rank distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PFamily {
    /// `p[e]` for ranks `0..len`.
    Explicit(Vec<f64>),
    /// `p_e ∝ r^e` for `e` in `0..=max_rank`.
    Geometric { r: f64, max_rank: u64 },
}

impl PFamily {
    fn weights(&self) -> Result<Vec<f64>, SynthError> {
        match self {
            PFamily::Explicit(p) => {
                if p.is_empty() || p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                    return Err(SynthError::InvalidSpec(
                        "explicit distribution needs finite non-negative entries".into(),
                    ));
                }
                let total = compensated_sum(p.iter().copied());
                if (total - 1.0).abs() > 1e-9 {
                    return Err(SynthError::InvalidSpec(format!(
                        "explicit distribution sums to {total}, not 1"
                    )));
                }
                Ok(p.clone())
            }
            PFamily::Geometric { r, max_rank } => {
                if !(*r > 0.0 && *r < 1.0) {
                    return Err(SynthError::InvalidSpec(format!("geometric r = {r} not in (0, 1)")));
                }
                Ok(truncated_geometric(*r, *max_rank))
            }
        }
    }
}

fn default_sigma() -> f64 {
    0.1
}
fn default_model() -> String {
    "synthetic".into()
}
fn default_family() -> String {
    "synth".into()
}
fn default_dataset() -> String {
    "synthetic".into()
}
fn default_params() -> u64 {
    1
}

/// Parameters of one synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_records: u64,
    pub p_family: PFamily,
    /// 1.0 → `q ≡ p̂`; 0.0 → `q` uniform over the sampled support.
    pub alignment: f64,
    /// Desired `ln C`.
    pub conf_target: f64,
    pub seed: u64,
    /// Log-normal scatter of scores within a rank group.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub vocab_size: Option<u64>,
    #[serde(default = "default_model")]
    pub model_name: String,
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default = "default_dataset")]
    pub dataset: String,
    #[serde(default = "default_params")]
    pub nonemb_params: u64,
}

impl SynthSpec {
    pub fn new(n_records: u64, p_family: PFamily, alignment: f64, conf_target: f64, seed: u64) -> Self {
        Self {
            n_records,
            p_family,
            alignment,
            conf_target,
            seed,
            sigma: default_sigma(),
            vocab_size: None,
            model_name: default_model(),
            family: default_family(),
            dataset: default_dataset(),
            nonemb_params: default_params(),
        }
    }
}

fn default_n_records() -> u64 {
    50_000
}
fn default_max_rank() -> u64 {
    4095
}
fn default_sa_target() -> f64 {
    0.1
}
fn default_conf_target() -> f64 {
    -0.5
}

/// A family of corpora whose error-entropy follows a planted power law in
/// model size: `EE(N) = coefficient · (N / reference_size)^(-alpha)`.
///
/// `reference_size` defaults to the smallest size, so `coefficient` is the
/// error-entropy of the smallest model. Self-alignment and confidence are
/// held at `sa_target` and `conf_target` for every size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSpec {
    pub alpha: f64,
    pub coefficient: f64,
    pub sizes: Vec<u64>,
    #[serde(default = "default_n_records")]
    pub n_records: u64,
    pub seed: u64,
    #[serde(default)]
    pub reference_size: Option<f64>,
    #[serde(default = "default_max_rank")]
    pub max_rank: u64,
    #[serde(default = "default_sa_target")]
    pub sa_target: f64,
    #[serde(default = "default_conf_target")]
    pub conf_target: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default = "default_dataset")]
    pub dataset: String,
}

impl SeriesSpec {
    pub fn new(alpha: f64, coefficient: f64, sizes: Vec<u64>, n_records: u64, seed: u64) -> Self {
        Self {
            alpha,
            coefficient,
            sizes,
            n_records,
            seed,
            reference_size: None,
            max_rank: default_max_rank(),
            sa_target: default_sa_target(),
            conf_target: default_conf_target(),
            sigma: default_sigma(),
            family: default_family(),
            dataset: default_dataset(),
        }
    }

    fn reference(&self) -> f64 {
        self.reference_size
            .unwrap_or_else(|| self.sizes.iter().copied().min().unwrap_or(1) as f64)
    }

    /// Planted error-entropy at model size `n`.
    pub fn target_ee(&self, n: u64) -> f64 {
        self.coefficient * (n as f64 / self.reference()).powf(-self.alpha)
    }
}

/// Generated records with their manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<PredictionRecord>,
    pub manifest: CorpusManifest,
}

/// `p_e = r^e / Σ r^k` over `0..=max_rank`.
pub fn truncated_geometric(r: f64, max_rank: u64) -> Vec<f64> {
    let w: Vec<f64> = (0..=max_rank).map(|e| r.powf(e as f64)).collect();
    let z = compensated_sum(w.iter().copied());
    w.into_iter().map(|x| x / z).collect()
}

/// Shannon entropy in nats, skipping zero entries.
pub fn entropy(p: &[f64]) -> f64 {
    compensated_sum(p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()))
}

pub fn geometric_entropy(r: f64, max_rank: u64) -> f64 {
    entropy(&truncated_geometric(r, max_rank))
}

/// Finds `r` such that the geometric distribution truncated to `0..=max_rank`
/// has Shannon entropy `target_h`, by bisection (the entropy increases with
/// `r` on `(0, 1)`).
pub fn solve_p_for_entropy(target_h: f64, max_rank: u64) -> Result<f64, SynthError> {
    let max = ((max_rank as f64) + 1.0).ln();
    if !(target_h >= 0.0 && target_h <= max + 1e-12) {
        return Err(SynthError::EntropyOutOfRange { target: target_h, max });
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if geometric_entropy(mid, max_rank) < target_h {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let err = |r: f64| (geometric_entropy(r, max_rank) - target_h).abs();
    // r = 0 is the degenerate point mass; keep the answer inside (0, 1)
    if lo > 0.0 && err(lo) < err(hi) {
        Ok(lo)
    } else {
        Ok(hi)
    }
}

fn sample_ranks(rng: &mut ChaCha20Rng, weights: &[f64], n: u64) -> Result<Vec<u64>, SynthError> {
    let dist = WeightedIndex::new(weights).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    Ok((0..n).map(|_| dist.sample(rng) as u64).collect())
}

/// Record indices per sampled rank, ascending.
fn group_indices(ranks: &[u64]) -> BTreeMap<u64, Vec<usize>> {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &e) in ranks.iter().enumerate() {
        groups.entry(e).or_default().push(i);
    }
    groups
}

/// `ln q_e` for the mixture `a·p̂ + (1-a)·uniform` on the sampled support.
fn mixture_ln_q(groups: &BTreeMap<u64, Vec<usize>>, n: u64, alignment: f64) -> BTreeMap<u64, f64> {
    let n = n as f64;
    let u = 1.0 / groups.len() as f64;
    groups
        .iter()
        .map(|(&e, idx)| {
            let p = idx.len() as f64 / n;
            let lq = if alignment == 1.0 {
                (idx.len() as f64).ln() - n.ln()
            } else {
                (alignment * p + (1.0 - alignment) * u).ln()
            };
            (e, lq)
        })
        .collect()
}

/// KL(p̂ ‖ a·p̂ + (1-a)·uniform).
fn mixture_kl(groups: &BTreeMap<u64, Vec<usize>>, n: u64, alignment: f64) -> f64 {
    let lq = mixture_ln_q(groups, n, alignment);
    let nf = n as f64;
    compensated_sum(groups.iter().map(|(e, idx)| {
        let p = idx.len() as f64 / nf;
        p * ((idx.len() as f64).ln() - nf.ln() - lq[e])
    }))
}

/// Mixture weight whose self-alignment equals `target` (KL falls as the weight rises).
fn solve_alignment(groups: &BTreeMap<u64, Vec<usize>>, n: u64, target: f64) -> Result<f64, SynthError> {
    if target <= 0.0 {
        return Ok(1.0);
    }
    let max = mixture_kl(groups, n, 0.0);
    if target > max {
        return Err(SynthError::InfeasibleAlignment { requested: target, max });
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mixture_kl(groups, n, mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Largest `ln C` realizable with the given `ln q`: every score must stay
/// `<= 1`, and `C` cannot exceed the harmonic sum over the support.
fn feasible_conf_max(ln_q: &BTreeMap<u64, f64>) -> f64 {
    let max_lq = ln_q.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let harmonic = harmonic_bound_over(ln_q.keys().copied());
    (-max_lq).min(harmonic)
}

fn realize_scores(
    rng: &mut ChaCha20Rng,
    groups: &BTreeMap<u64, Vec<usize>>,
    ln_q: &BTreeMap<u64, f64>,
    conf: f64,
    sigma: f64,
    n: usize,
) -> Result<Vec<f64>, SynthError> {
    let normal = Normal::new(0.0, sigma).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let mut ln_scores = vec![0.0; n];
    for (&e, idx) in groups {
        let target = ln_q[&e] + conf;
        let z: Vec<f64> = idx.iter().map(|_| normal.sample(rng)).collect();
        let mean = compensated_sum(z.iter().copied()) / z.len() as f64;
        let dev: Vec<f64> = z.iter().map(|x| x - mean).collect();

        // Keep scores under 1/(e+1) when the target allows it, and always under 1.
        let rank_cap = -((e as f64) + 1.0).ln();
        let ceiling = if target <= rank_cap { rank_cap } else { 0.0 };
        let max_dev = dev.iter().copied().fold(0.0f64, f64::max);
        let shrink = if max_dev > 0.0 && target + max_dev > ceiling {
            ((ceiling - target) / max_dev).max(0.0)
        } else {
            1.0
        };

        let mut sum = CompensatedSum::new();
        let vals: Vec<f64> = dev
            .iter()
            .map(|d| {
                let v = target + shrink * d;
                sum.add(v);
                v
            })
            .collect();
        // absorb the rounding left in the group mean
        let fix = target - sum.value() / vals.len() as f64;
        for (&i, v) in idx.iter().zip(vals) {
            ln_scores[i] = (v + fix).min(ceiling);
        }
    }
    Ok(ln_scores)
}

#[allow(clippy::too_many_arguments)]
fn build_records(
    rng: &mut ChaCha20Rng,
    ranks: &[u64],
    groups: &BTreeMap<u64, Vec<usize>>,
    ln_q: &BTreeMap<u64, f64>,
    conf: f64,
    sigma: f64,
    vocab: u64,
) -> Result<Vec<PredictionRecord>, SynthError> {
    let feasible = feasible_conf_max(ln_q);
    if conf > feasible + 1e-12 {
        return Err(SynthError::InfeasibleConfidence {
            requested: conf,
            max: feasible,
        });
    }
    let ln_scores = realize_scores(rng, groups, ln_q, conf, sigma, ranks.len())?;
    Ok(ranks
        .iter()
        .zip(ln_scores)
        .enumerate()
        .map(|(i, (&rbe, lns))| {
            let i = i as u64;
            let gt = rng.random_range(0..vocab);
            PredictionRecord::new(i / DOC_LEN, i % DOC_LEN, gt, lns, rbe)
        })
        .collect())
}

fn check_common(n_records: u64, sigma: f64) -> Result<(), SynthError> {
    if n_records == 0 {
        return Err(SynthError::InvalidSpec("n_records must be positive".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(SynthError::InvalidSpec(format!("sigma = {sigma} must be finite and >= 0")));
    }
    Ok(())
}

fn resolve_vocab(requested: Option<u64>, n_ranks: usize) -> Result<u64, SynthError> {
    let needed = (n_ranks as u64).max(2);
    match requested {
        Some(v) if v < needed => Err(SynthError::InvalidSpec(format!(
            "vocab_size {v} cannot hold {n_ranks} ranks"
        ))),
        Some(v) => Ok(v),
        None => Ok(DEFAULT_VOCAB.max(needed)),
    }
}

/// Generates one corpus; identical specs give identical records.
pub fn gen_corpus(spec: &SynthSpec) -> Result<SynthCorpus, SynthError> {
    check_common(spec.n_records, spec.sigma)?;
    if !(0.0..=1.0).contains(&spec.alignment) {
        return Err(SynthError::InvalidSpec(format!(
            "alignment {} not in [0, 1]",
            spec.alignment
        )));
    }
    if !spec.conf_target.is_finite() {
        return Err(SynthError::InvalidSpec("conf_target must be finite".into()));
    }
    if spec.nonemb_params == 0 {
        return Err(SynthError::InvalidSpec("nonemb_params must be positive".into()));
    }
    let weights = spec.p_family.weights()?;
    let vocab = resolve_vocab(spec.vocab_size, weights.len())?;

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let ranks = sample_ranks(&mut rng, &weights, spec.n_records)?;
    let groups = group_indices(&ranks);
    let ln_q = mixture_ln_q(&groups, spec.n_records, spec.alignment);
    let records = build_records(&mut rng, &ranks, &groups, &ln_q, spec.conf_target, spec.sigma, vocab)?;

    let mut manifest = CorpusManifest::new(
        spec.model_name.clone(),
        spec.family.clone(),
        spec.nonemb_params,
        spec.dataset.clone(),
        vocab,
        spec.n_records,
    );
    manifest.seed = Some(spec.seed);
    manifest.extra.insert("generator".into(), Value::from("chacha20"));
    Ok(SynthCorpus { records, manifest })
}

/// Generates one corpus per model size with a planted error-entropy power law.
pub fn gen_scaling_series(spec: &SeriesSpec) -> Result<Vec<SynthCorpus>, SynthError> {
    check_common(spec.n_records, spec.sigma)?;
    if spec.sizes.is_empty() || spec.sizes.contains(&0) {
        return Err(SynthError::InvalidSpec("sizes must be non-empty and positive".into()));
    }
    if !(spec.alpha > 0.0 && spec.coefficient > 0.0) {
        return Err(SynthError::InvalidSpec("alpha and coefficient must be positive".into()));
    }
    if !(spec.reference() > 0.0) {
        return Err(SynthError::InvalidSpec("reference_size must be positive".into()));
    }
    let max_h = ((spec.max_rank as f64) + 1.0).ln();
    let vocab = resolve_vocab(None, spec.max_rank as usize + 1)?;

    let mut out = Vec::with_capacity(spec.sizes.len());
    for (i, &size) in spec.sizes.iter().enumerate() {
        let target = spec.target_ee(size);
        if !(target > 0.0 && target < max_h) {
            return Err(SynthError::EntropyOutOfRange { target, max: max_h });
        }
        let r = solve_p_for_entropy(target, spec.max_rank)?;
        let weights = truncated_geometric(r, spec.max_rank);

        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let ranks = sample_ranks(&mut rng, &weights, spec.n_records)?;
        let groups = group_indices(&ranks);
        let alignment = solve_alignment(&groups, spec.n_records, spec.sa_target)?;
        let ln_q = mixture_ln_q(&groups, spec.n_records, alignment);
        let records = build_records(&mut rng, &ranks, &groups, &ln_q, spec.conf_target, spec.sigma, vocab)?;

        let mut manifest = CorpusManifest::new(
            format!("synth-{i:02}-{size}"),
            spec.family.clone(),
            size,
            spec.dataset.clone(),
            vocab,
            spec.n_records,
        );
        manifest.seed = Some(spec.seed);
        manifest.extra.insert("generator".into(), Value::from("chacha20"));
        manifest.extra.insert("stream".into(), Value::from(i as u64));
        manifest.extra.insert("planted_ee".into(), Value::from(target));
        out.push(SynthCorpus { records, manifest });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::{accumulate, decompose};

    #[test]
    fn point_mass_gives_all_zero_components() {
        let spec = SynthSpec::new(1000, PFamily::Explicit(vec![1.0]), 1.0, 0.0, 7);
        let c = gen_corpus(&spec).unwrap();
        assert!(c.records.iter().all(|r| r.rbe == 0 && r.ln_score == 0.0));
        let d = decompose(&accumulate(&c.records).unwrap()).unwrap();
        assert_eq!((d.ce, d.ee, d.sa, d.conf), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::new(
            2000,
            PFamily::Geometric { r: 0.6, max_rank: 31 },
            0.7,
            -0.4,
            99,
        );
        assert_eq!(gen_corpus(&spec).unwrap(), gen_corpus(&spec).unwrap());
        let mut other = spec.clone();
        other.seed = 100;
        assert_ne!(gen_corpus(&spec).unwrap().records, gen_corpus(&other).unwrap().records);
    }

    #[test]
    fn realized_components_match_targets() {
        let spec = SynthSpec::new(
            20_000,
            PFamily::Geometric { r: 0.5, max_rank: 15 },
            0.6,
            -0.8,
            3,
        );
        let c = gen_corpus(&spec).unwrap();
        let agg = accumulate(&c.records).unwrap();
        let d = decompose(&agg).unwrap();
        assert!((d.conf - spec.conf_target).abs() < 1e-12, "conf {}", d.conf);
        assert!(d.identity_holds());
        let groups = group_indices(&c.records.iter().map(|r| r.rbe).collect::<Vec<_>>());
        let kl = mixture_kl(&groups, spec.n_records, spec.alignment);
        assert!((d.sa - kl).abs() < 1e-12);
        assert!(c.records.iter().all(|r| r.ln_score <= 0.0));
    }

    #[test]
    fn infeasible_confidence_reports_maximum() {
        // support {0}: C = Q_0 <= 1
        let spec = SynthSpec::new(10, PFamily::Explicit(vec![1.0]), 1.0, 0.5, 1);
        match gen_corpus(&spec).unwrap_err() {
            SynthError::InfeasibleConfidence { requested, max } => {
                assert_eq!(requested, 0.5);
                assert!(max.abs() < 1e-15);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spec_validation() {
        let bad_sum = SynthSpec::new(10, PFamily::Explicit(vec![0.5, 0.4]), 1.0, -1.0, 1);
        assert!(matches!(gen_corpus(&bad_sum), Err(SynthError::InvalidSpec(_))));
        let bad_r = SynthSpec::new(10, PFamily::Geometric { r: 1.0, max_rank: 3 }, 1.0, -1.0, 1);
        assert!(matches!(gen_corpus(&bad_r), Err(SynthError::InvalidSpec(_))));
        let bad_align = SynthSpec::new(10, PFamily::Explicit(vec![1.0]), 1.5, -1.0, 1);
        assert!(matches!(gen_corpus(&bad_align), Err(SynthError::InvalidSpec(_))));
    }

    #[test]
    fn entropy_solver_examples() {
        let r = solve_p_for_entropy(0.0, 15).unwrap();
        assert!(r > 0.0 && r <= 1e-9);
        assert!(geometric_entropy(r, 15) < 1e-8);

        let r = solve_p_for_entropy(4f64.ln(), 3).unwrap();
        let p = truncated_geometric(r, 3);
        assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-6), "{p:?}");

        let r = solve_p_for_entropy(0.5, 63).unwrap();
        assert!((geometric_entropy(r, 63) - 0.5).abs() <= 1e-9);

        assert!(matches!(
            solve_p_for_entropy(3.0, 3),
            Err(SynthError::EntropyOutOfRange { .. })
        ));
        assert!(solve_p_for_entropy(-0.1, 3).is_err());
    }

    #[test]
    fn series_manifests() {
        let spec = SeriesSpec::new(0.3, 2.0, vec![1_000, 10_000], 2_000, 5);
        let series = gen_scaling_series(&spec).unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].manifest.nonemb_params, 1_000);
        assert_ne!(series[0].manifest.model_name, series[1].manifest.model_name);
        for c in &series {
            let d = decompose(&accumulate(&c.records).unwrap()).unwrap();
            assert!((d.sa - spec.sa_target).abs() < 1e-9, "sa {}", d.sa);
            assert!((d.conf - spec.conf_target).abs() < 1e-12);
        }
    }
}
