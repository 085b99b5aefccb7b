//! Decomposition of language-model cross-entropy into error-entropy,
//! self-alignment and confidence, and power-law scaling analysis of the
//! components across model sizes.
//!
//! The pipeline is: stream [`records::PredictionRecord`]s from a JSON Lines
//! file, fold them into a [`decomposition::RankAggregate`], then
//! [`decomposition::decompose`] it. Cells from several models feed
//! [`scaling::fit_report`]; [`profiles`] prepares plot-ready views and
//! [`synth`] builds corpora with known components for testing.

pub mod decomposition;
pub mod numeric;
pub mod profiles;
pub mod records;
pub mod scaling;
pub mod synth;

pub use decomposition::{accumulate, decompose, direct_ce, Decomposition, RankAggregate};
pub use records::{CorpusManifest, PredictionRecord};
pub use scaling::{fit_power_law, fit_report, Metric, ScalingFit};
