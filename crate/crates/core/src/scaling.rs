//! Power-law fits of loss components against model size.
//!
//! Each metric `M` is regressed as `ln|M| = c_M + α_M ln N` by unweighted
//! ordinary least squares, where `N` is the non-embedding parameter count.
//! The absolute value is needed because confidence can be negative. Exponent
//! deltas `|α_M - α_CE|` compare each component's scaling with the full loss.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposition::Decomposition;
use crate::numeric::compensated_sum;
use crate::records::CorpusManifest;

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ScalingError {
    #[error("insufficient points: {usable} usable, need at least 2")]
    InsufficientPoints { usable: usize },
    #[error("all usable points share the same model size")]
    DegenerateSizes,
    #[error("fits cover different model sets")]
    ModelSetMismatch,
    #[error("degenerate decomposition: all components are zero")]
    DegenerateDecomposition,
    #[error("model `{0}` appears more than once in group `{1}`")]
    DuplicateModel(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "EE")]
    Ee,
    #[serde(rename = "SA")]
    Sa,
    #[serde(rename = "CONF")]
    Conf,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Ce, Metric::Ee, Metric::Sa, Metric::Conf];
    pub const COMPONENTS: [Metric; 3] = [Metric::Ee, Metric::Sa, Metric::Conf];

    pub fn of(&self, d: &Decomposition) -> f64 {
        match self {
            Metric::Ce => d.ce,
            Metric::Ee => d.ee,
            Metric::Sa => d.sa,
            Metric::Conf => d.conf,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Ce => "CE",
            Metric::Ee => "EE",
            Metric::Sa => "SA",
            Metric::Conf => "CONF",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One model's value of a metric.
#[derive(Debug, Clone, PartialEq)]
pub struct FitPoint {
    pub model: String,
    pub nonemb_params: u64,
    pub value: f64,
}

impl FitPoint {
    pub fn new(model: impl Into<String>, nonemb_params: u64, value: f64) -> Self {
        Self {
            model: model.into(),
            nonemb_params,
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroppedPoint {
    pub model: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingFit {
    pub metric: Metric,
    /// Scaling exponent `α_M`.
    pub slope: f64,
    /// `c_M`, in natural-log units.
    pub intercept: f64,
    pub r2: f64,
    pub n_points: usize,
    pub dropped_points: Vec<DroppedPoint>,
    /// Models used by the fit, sorted.
    pub models: Vec<String>,
    /// The series changes sign, so `ln|M|` is not smooth across it.
    pub sign_flip: bool,
}

/// Straight-line least squares on `(x, y)` pairs. Returns `(slope, intercept, r2)`.
///
/// A constant `y` is fitted perfectly by a constant: slope 0, R² = 1.
pub fn ols(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64), ScalingError> {
    debug_assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return Err(ScalingError::InsufficientPoints { usable: n });
    }
    let nf = n as f64;
    let x_mean = compensated_sum(xs.iter().copied()) / nf;
    let y_mean = compensated_sum(ys.iter().copied()) / nf;
    let sxx = compensated_sum(xs.iter().map(|x| (x - x_mean) * (x - x_mean)));
    if sxx == 0.0 {
        return Err(ScalingError::DegenerateSizes);
    }
    if ys.iter().all(|y| y.to_bits() == ys[0].to_bits()) {
        return Ok((0.0, ys[0], 1.0));
    }
    let sxy = compensated_sum(xs.iter().zip(ys).map(|(x, y)| (x - x_mean) * (y - y_mean)));
    let syy = compensated_sum(ys.iter().map(|y| (y - y_mean) * (y - y_mean)));
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    if syy == 0.0 {
        return Ok((slope, intercept, 1.0));
    }
    let ss_res = compensated_sum(xs.iter().zip(ys).map(|(x, y)| {
        let r = y - (intercept + slope * x);
        r * r
    }));
    let r2 = (1.0 - ss_res / syy).clamp(0.0, 1.0);
    Ok((slope, intercept, r2))
}

/// Fits `ln|value| = intercept + slope · ln N`.
///
/// Points with `|value| < epsilon` (or a non-finite value) are dropped and
/// listed in the result rather than silently discarded.
pub fn fit_power_law(metric: Metric, points: &[FitPoint], epsilon: f64) -> Result<ScalingFit, ScalingError> {
    let mut xs = Vec::with_capacity(points.len());
    let mut ys = Vec::with_capacity(points.len());
    let mut models = Vec::with_capacity(points.len());
    let mut dropped_points = Vec::new();
    let (mut pos, mut neg) = (false, false);

    for p in points {
        let reason = if p.nonemb_params == 0 {
            Some("non-positive model size".to_string())
        } else if !p.value.is_finite() {
            Some(format!("non-finite value {}", p.value))
        } else if p.value.abs() < epsilon {
            Some(format!("|value| {:e} below epsilon {:e}", p.value.abs(), epsilon))
        } else {
            None
        };
        if let Some(reason) = reason {
            dropped_points.push(DroppedPoint {
                model: p.model.clone(),
                reason,
            });
            continue;
        }
        pos |= p.value > 0.0;
        neg |= p.value < 0.0;
        xs.push((p.nonemb_params as f64).ln());
        ys.push(p.value.abs().ln());
        models.push(p.model.clone());
    }

    if xs.len() < 2 {
        return Err(ScalingError::InsufficientPoints { usable: xs.len() });
    }
    let (slope, intercept, r2) = ols(&xs, &ys)?;
    models.sort();
    Ok(ScalingFit {
        metric,
        slope,
        intercept,
        r2,
        n_points: xs.len(),
        dropped_points,
        models,
        sign_flip: pos && neg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExponentDelta {
    pub metric: Metric,
    pub delta_abs: f64,
}

/// `|α_M - α_CE|`; both fits must cover the same models.
pub fn exponent_delta(fit_m: &ScalingFit, fit_ce: &ScalingFit) -> Result<ExponentDelta, ScalingError> {
    if fit_m.models != fit_ce.models {
        return Err(ScalingError::ModelSetMismatch);
    }
    Ok(ExponentDelta {
        metric: fit_m.metric,
        delta_abs: (fit_m.slope - fit_ce.slope).abs(),
    })
}

/// Each component's fraction of `|EE| + |SA| + |Conf|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComponentShares {
    pub ee_share: f64,
    pub sa_share: f64,
    pub conf_share: f64,
}

pub fn component_shares(d: &Decomposition) -> Result<ComponentShares, ScalingError> {
    let (ee, sa, conf) = (d.ee.abs(), d.sa.abs(), d.conf.abs());
    let total = ee + sa + conf;
    if !(total > 0.0) {
        return Err(ScalingError::DegenerateDecomposition);
    }
    Ok(ComponentShares {
        ee_share: ee / total,
        sa_share: sa / total,
        conf_share: conf / total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Family,
    All,
}

impl FromStr for GroupBy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "family" => Ok(GroupBy::Family),
            "all" => Ok(GroupBy::All),
            other => Err(format!("unknown grouping `{other}` (expected family or all)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitRow {
    pub group: String,
    pub metric: Metric,
    pub fit: ScalingFit,
    /// `|α_M - α_CE|`; `None` for the CE row itself.
    pub delta_abs: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FitReport {
    pub rows: Vec<FitRow>,
    pub notices: Vec<String>,
}

/// Per-group fits of every metric plus exponent deltas of the components.
///
/// Groups are keyed `<dataset>/<family>` (or `<dataset>/all`), since fits are
/// only meaningful within one evaluation corpus. Rows come out sorted by
/// group, then metric in CE, EE, SA, CONF order.
pub fn fit_report(
    cells: &[(CorpusManifest, Decomposition)],
    group_by: GroupBy,
    epsilon: f64,
) -> Result<FitReport, ScalingError> {
    let mut report = FitReport::default();
    if cells.is_empty() {
        report.notices.push("no cells to fit".into());
        return Ok(report);
    }

    let mut groups: BTreeMap<String, Vec<&(CorpusManifest, Decomposition)>> = BTreeMap::new();
    for cell in cells {
        let label = match group_by {
            GroupBy::Family => cell.0.family.as_str(),
            GroupBy::All => "all",
        };
        groups
            .entry(format!("{}/{}", cell.0.dataset, label))
            .or_default()
            .push(cell);
    }

    for (group, members) in &groups {
        let mut seen = BTreeSet::new();
        for (m, _) in members {
            if !seen.insert(m.model_name.as_str()) {
                return Err(ScalingError::DuplicateModel(m.model_name.clone(), group.clone()));
            }
        }
        if members.len() < 2 {
            report.notices.push(format!(
                "group `{group}` skipped: {} model(s), need at least 2",
                members.len()
            ));
            continue;
        }

        let points = |metric: Metric, only: Option<&BTreeSet<&str>>| -> Vec<FitPoint> {
            members
                .iter()
                .filter(|(m, _)| only.is_none_or(|s| s.contains(m.model_name.as_str())))
                .map(|(m, d)| FitPoint::new(m.model_name.clone(), m.nonemb_params, metric.of(d)))
                .collect()
        };

        let mut fits = BTreeMap::new();
        for metric in Metric::ALL {
            match fit_power_law(metric, &points(metric, None), epsilon) {
                Ok(fit) => {
                    for d in &fit.dropped_points {
                        report.notices.push(format!(
                            "group `{group}` {metric}: dropped {} ({})",
                            d.model, d.reason
                        ));
                    }
                    if fit.sign_flip {
                        report.notices.push(format!(
                            "group `{group}` {metric}: values change sign, ln|M| fit is unreliable"
                        ));
                    }
                    fits.insert(metric, fit);
                }
                Err(e) => report
                    .notices
                    .push(format!("group `{group}` {metric}: not fitted ({e})")),
            }
        }

        let ce_fit = fits.get(&Metric::Ce);
        for metric in Metric::ALL {
            let Some(fit) = fits.get(&metric) else { continue };
            let delta_abs = match (metric, ce_fit) {
                (Metric::Ce, _) | (_, None) => None,
                (_, Some(ce)) => match exponent_delta(fit, ce) {
                    Ok(d) => Some(d.delta_abs),
                    Err(_) => {
                        // refit both on the shared models
                        let shared: BTreeSet<&str> = fit
                            .models
                            .iter()
                            .filter(|m| ce.models.contains(m))
                            .map(String::as_str)
                            .collect();
                        let refit = fit_power_law(metric, &points(metric, Some(&shared)), epsilon)
                            .and_then(|m| {
                                let c = fit_power_law(Metric::Ce, &points(Metric::Ce, Some(&shared)), epsilon)?;
                                exponent_delta(&m, &c)
                            });
                        match refit {
                            Ok(d) => {
                                report.notices.push(format!(
                                    "group `{group}` {metric}: delta computed on {} shared models",
                                    shared.len()
                                ));
                                Some(d.delta_abs)
                            }
                            Err(e) => {
                                report
                                    .notices
                                    .push(format!("group `{group}` {metric}: no delta ({e})"));
                                None
                            }
                        }
                    }
                },
            };
            report.rows.push(FitRow {
                group: group.clone(),
                metric,
                fit: fit.clone(),
                delta_abs,
            });
        }
    }
    Ok(report)
}
