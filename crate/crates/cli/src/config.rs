//! JSON run configuration. Keys mirror the command-line flags; flags win.

use std::fs;
use std::path::{Path, PathBuf};

use cedecomp::profiles::BinScheme;
use cedecomp::scaling::GroupBy;
use serde::Deserialize;

use crate::error::{CliError, Result};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub inputs: Vec<String>,
    pub jobs: Option<usize>,
    pub log_base: Option<LogBase>,
    pub output_dir: Option<PathBuf>,
    pub clamp_lns: Option<f64>,
    pub epsilon: Option<f64>,
    pub group_by: Option<GroupBy>,
    pub shares: Option<bool>,
    pub overlay: Option<bool>,
    pub dynamics: Option<bool>,
    pub score_by_rank: Option<u64>,
    pub top_k: Option<usize>,
    pub bins: Option<BinScheme>,
    /// Directory relative paths in the file are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let mut cfg: FileConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.output_dir = cfg.output_dir.map(|d| cfg.base_dir.join(d));
        cfg.inputs = cfg
            .inputs
            .iter()
            .map(|i| {
                if Path::new(i).is_absolute() {
                    i.clone()
                } else {
                    cfg.base_dir.join(i).to_string_lossy().into_owned()
                }
            })
            .collect();
        Ok(cfg)
    }
}

/// Display unit for log-valued outputs. Internal math is always in nats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
pub enum LogBase {
    #[default]
    #[serde(rename = "e")]
    #[value(name = "e")]
    E,
    #[serde(rename = "2")]
    #[value(name = "2")]
    Two,
    #[serde(rename = "10")]
    #[value(name = "10")]
    Ten,
}

impl LogBase {
    pub fn base(&self) -> f64 {
        match self {
            LogBase::E => std::f64::consts::E,
            LogBase::Two => 2.0,
            LogBase::Ten => 10.0,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            LogBase::E => "e",
            LogBase::Two => "2",
            LogBase::Ten => "10",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "e" => Some(LogBase::E),
            "2" => Some(LogBase::Two),
            "10" => Some(LogBase::Ten),
            _ => None,
        }
    }
}
