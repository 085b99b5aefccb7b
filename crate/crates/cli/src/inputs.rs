//! Input resolution and the fail-fast loading pass.
//!
//! Every input is fully read, validated and aggregated before any command
//! writes output, so a bad file late in a batch stops the run up front.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use cedecomp::decomposition::{decompose, RankAggregate};
use cedecomp::profiles::{ScoreByRankAccumulator, ScoreByRankProfile};
use cedecomp::records::{open_record_file, validate_record, RecordError};
use cedecomp::{CorpusManifest, Decomposition};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::LogBase;
use crate::error::{CliError, Result};

const DECOMPOSITION_SUFFIX: &str = ".decomposition.json";

/// On-disk form of one decomposed cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionOutput {
    #[serde(flatten)]
    pub values: Decomposition,
    pub log_base: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp_lns: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamped_records: Option<u64>,
    pub source: CorpusManifest,
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub path: PathBuf,
    pub name: String,
    pub manifest: CorpusManifest,
    /// Always in nats.
    pub decomposition: Decomposition,
    pub aggregate: Option<RankAggregate>,
    pub clamped: u64,
    pub profile: Option<ScoreByRankProfile>,
}

impl Cell {
    pub fn output(&self, log_base: LogBase, clamp_lns: Option<f64>) -> DecompositionOutput {
        DecompositionOutput {
            values: match log_base {
                LogBase::E => self.decomposition,
                other => self.decomposition.in_base(other.base()),
            },
            log_base: log_base.label().to_string(),
            clamp_lns,
            clamped_records: clamp_lns.map(|_| self.clamped),
            source: self.manifest.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub clamp_lns: Option<f64>,
    /// `(rbe, K)`; K falls back to the manifest's `top_k`.
    pub score_by_rank: Option<(u64, Option<usize>)>,
}

pub fn is_decomposition_file(path: &Path) -> bool {
    path.to_string_lossy().ends_with(DECOMPOSITION_SUFFIX)
}

pub fn cell_name(path: &Path) -> String {
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    if let Some(stem) = file.strip_suffix(DECOMPOSITION_SUFFIX) {
        return stem.to_string();
    }
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or(file)
}

/// Expands glob patterns and checks that every input exists.
pub fn resolve_inputs(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for pattern in patterns {
        if pattern.contains(['*', '?', '[']) {
            let paths = glob::glob(pattern)
                .map_err(|e| CliError::input(format!("bad pattern `{pattern}`: {e}")))?;
            let mut matched: Vec<PathBuf> = paths
                .filter_map(|p| p.ok())
                .filter(|p| !p.to_string_lossy().ends_with(".manifest.json"))
                .collect();
            if matched.is_empty() {
                return Err(CliError::input(format!("pattern `{pattern}` matched no files")));
            }
            matched.sort();
            out.extend(matched);
        } else {
            let path = PathBuf::from(pattern);
            if !path.exists() {
                return Err(CliError::input(format!("{}: no such file", path.display())));
            }
            out.push(path);
        }
    }
    Ok(out)
}

fn record_error(path: &Path, e: RecordError) -> CliError {
    CliError::input(format!("{}: {e}", path.display()))
}

pub fn load_record_cell(path: &Path, opts: &LoadOptions) -> Result<Cell> {
    let (manifest, mut reader) = open_record_file(path).map_err(|e| record_error(path, e))?;
    let mut profile = match opts.score_by_rank {
        None => None,
        Some((rbe, k)) => {
            let k = k
                .or(manifest.top_k.map(|k| k as usize))
                .ok_or_else(|| {
                    CliError::input(format!(
                        "{}: --top-k is required (manifest has no top_k)",
                        path.display()
                    ))
                })?;
            Some(ScoreByRankAccumulator::new(rbe, k).map_err(|e| CliError::input(e.to_string()))?)
        }
    };

    let mut agg = RankAggregate::new();
    let mut clamped = 0u64;
    while let Some(item) = reader.next_located() {
        let (line, mut record) = item.map_err(|e| record_error(path, e))?;
        if let Some(floor) = opts.clamp_lns {
            if record.ln_score < floor {
                record.ln_score = floor;
                clamped += 1;
            }
            if let Some(topk) = record.topk_ln_scores.as_mut() {
                topk.iter_mut().filter(|x| **x < floor).for_each(|x| *x = floor);
            }
        }
        let report = validate_record(&record, &manifest);
        if let Some(issue) = report.errors.first() {
            return Err(CliError::validation(format!(
                "{}: line {line}: {issue}",
                path.display()
            )));
        }
        agg.push_record(&record);
        if let Some(p) = profile.as_mut() {
            p.push(&record);
        }
    }

    let decomposition = decompose(&agg)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    let profile = profile
        .map(|p| p.finish())
        .transpose()
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    Ok(Cell {
        path: path.to_path_buf(),
        name: cell_name(path),
        manifest,
        decomposition,
        aggregate: Some(agg),
        clamped,
        profile,
    })
}

pub fn load_decomposition_cell(path: &Path) -> Result<Cell> {
    let file = File::open(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let out: DecompositionOutput = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let base = LogBase::from_label(&out.log_base).ok_or_else(|| {
        CliError::input(format!("{}: unknown log_base `{}`", path.display(), out.log_base))
    })?;
    out.source
        .check()
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(Cell {
        path: path.to_path_buf(),
        name: cell_name(path),
        manifest: out.source,
        decomposition: if base == LogBase::E {
            out.values
        } else {
            out.values.from_base(base.base())
        },
        aggregate: None,
        clamped: out.clamped_records.unwrap_or(0),
        profile: None,
    })
}

pub fn load_cell(path: &Path, opts: &LoadOptions, records_only: bool) -> Result<Cell> {
    if is_decomposition_file(path) {
        if records_only {
            return Err(CliError::input(format!(
                "{}: this view needs a record file, not a decomposition",
                path.display()
            )));
        }
        load_decomposition_cell(path)
    } else {
        load_record_cell(path, opts)
    }
}

/// Loads every input on up to `jobs` threads, preserving input order.
///
/// All failures are printed; the first one in input order is returned.
pub fn load_all(paths: &[PathBuf], opts: &LoadOptions, jobs: usize, records_only: bool) -> Result<Vec<Cell>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::input(e.to_string()))?;
    let results: Vec<Result<Cell>> =
        pool.install(|| paths.par_iter().map(|p| load_cell(p, opts, records_only)).collect());

    let mut first_err = None;
    let mut cells = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(c) => cells.push(c),
            Err(e) => {
                eprintln!("error: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(cells),
    }
}
