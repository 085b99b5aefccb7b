use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use cedecomp::decomposition::{harmonic_conf_bound, rbe_distribution, score_distribution, RankAggregate};
use cedecomp::profiles::{bin_distribution, dynamics_series, overlay, BinScheme};
use cedecomp::records::{open_record_file, save_corpus, validate_record, RecordError};
use cedecomp::scaling::{component_shares, fit_report, GroupBy};
use cedecomp::synth::{gen_corpus, gen_scaling_series, SeriesSpec, SynthCorpus, SynthSpec};
use rayon::prelude::*;
use serde_json::json;

use crate::config::LogBase;
use crate::error::{CliError, Result};
use crate::inputs::{is_decomposition_file, load_all, resolve_inputs, Cell, LoadOptions};

/// Options shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Global {
    pub jobs: usize,
    pub log_base: LogBase,
    pub output_dir: Option<PathBuf>,
}

pub struct FitOptions {
    pub group_by: GroupBy,
    pub epsilon: f64,
    pub shares: bool,
    pub clamp_lns: Option<f64>,
}

pub struct ReportOptions {
    pub overlay: bool,
    pub dynamics: bool,
    pub score_by_rank: Option<u64>,
    pub top_k: Option<usize>,
    pub bins: BinScheme,
    pub clamp_lns: Option<f64>,
}

fn num(x: f64) -> String {
    format!("{x:?}")
}

fn check_clamp(clamp: Option<f64>) -> Result<()> {
    match clamp {
        Some(v) if !(v.is_finite() && v <= 0.0) => Err(CliError::input(format!(
            "--clamp-lns must be a finite value <= 0, got {v}"
        ))),
        _ => Ok(()),
    }
}

fn require_inputs(paths: &[PathBuf]) -> Result<()> {
    if paths.is_empty() {
        return Err(CliError::input("no inputs given"));
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))
}

fn check_unique_names(cells: &[Cell]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for c in cells {
        if !seen.insert(c.name.as_str()) {
            return Err(CliError::input(format!(
                "two inputs share the output name `{}`",
                c.name
            )));
        }
    }
    Ok(())
}

fn write_run_meta(dir: &Path, command: &str, paths: &[PathBuf], options: serde_json::Value) -> Result<()> {
    let meta = json!({
        "tool": "cedecomp",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "inputs": paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "options": options,
    });
    let text = serde_json::to_string_pretty(&meta).expect("json value") + "\n";
    fs::write(dir.join("run.meta.json"), text)?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

/// CSV writer to `<dir>/<file>`, or to stdout without an output directory.
fn csv_sink(dir: Option<&Path>, file: &str) -> Result<csv::Writer<Box<dyn Write>>> {
    let out: Box<dyn Write> = match dir {
        Some(d) => {
            let path = d.join(file);
            Box::new(BufWriter::new(
                File::create(&path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?,
            ))
        }
        None => Box::new(io::stdout().lock()),
    };
    Ok(csv::Writer::from_writer(out))
}

pub fn cmd_decompose(global: &Global, inputs: &[String], clamp_lns: Option<f64>) -> Result<()> {
    check_clamp(clamp_lns)?;
    let paths = resolve_inputs(inputs)?;
    require_inputs(&paths)?;
    let opts = LoadOptions {
        clamp_lns,
        ..Default::default()
    };
    let cells = load_all(&paths, &opts, global.jobs, true)?;

    match &global.output_dir {
        Some(dir) => {
            check_unique_names(&cells)?;
            ensure_dir(dir)?;
            for cell in &cells {
                let out = cell.output(global.log_base, clamp_lns);
                let text = serde_json::to_string_pretty(&out).expect("serializable") + "\n";
                fs::write(dir.join(format!("{}.decomposition.json", cell.name)), text)?;
            }
            write_run_meta(
                dir,
                "decompose",
                &paths,
                json!({"log_base": global.log_base.label(), "clamp_lns": clamp_lns}),
            )?;
        }
        None => {
            let mut stdout = io::stdout().lock();
            for cell in &cells {
                let out = cell.output(global.log_base, clamp_lns);
                writeln!(stdout, "{}", serde_json::to_string(&out).expect("serializable"))?;
            }
        }
    }

    let breaches: Vec<&Cell> = cells.iter().filter(|c| !c.decomposition.identity_holds()).collect();
    if let Some(first) = breaches.first() {
        for c in &breaches {
            let d = &c.decomposition;
            eprintln!(
                "identity breach in {}: ce={:?} ee+sa-conf={:?} residual={:?}",
                c.path.display(),
                d.ce,
                d.ee + d.sa - d.conf,
                d.residual
            );
        }
        return Err(CliError::identity(format!(
            "{}: decomposition identity does not hold",
            first.path.display()
        )));
    }
    Ok(())
}

pub fn cmd_fit(global: &Global, inputs: &[String], opts: &FitOptions) -> Result<()> {
    check_clamp(opts.clamp_lns)?;
    let paths = resolve_inputs(inputs)?;
    let load = LoadOptions {
        clamp_lns: opts.clamp_lns,
        ..Default::default()
    };
    let cells = load_all(&paths, &load, global.jobs, false)?;
    if let Some(c) = cells.iter().find(|c| !c.decomposition.identity_holds()) {
        return Err(CliError::identity(format!(
            "{}: decomposition identity does not hold (residual {:?})",
            c.path.display(),
            c.decomposition.residual
        )));
    }

    let pairs: Vec<_> = cells
        .iter()
        .map(|c| (c.manifest.clone(), c.decomposition))
        .collect();
    let report = fit_report(&pairs, opts.group_by, opts.epsilon).map_err(|e| CliError::input(e.to_string()))?;
    for notice in &report.notices {
        eprintln!("warning: {notice}");
    }

    let dir = global.output_dir.as_deref();
    if let Some(d) = dir {
        ensure_dir(d)?;
    }
    {
        let mut w = csv_sink(dir, "fit.csv")?;
        w.write_record(["group", "metric", "slope", "intercept", "r2", "n_points", "delta_abs"])?;
        for row in &report.rows {
            w.write_record([
                row.group.clone(),
                row.metric.to_string(),
                num(row.fit.slope),
                num(row.fit.intercept),
                num(row.fit.r2),
                row.fit.n_points.to_string(),
                row.delta_abs.map(num).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
    }

    if opts.shares {
        if dir.is_none() {
            println!();
        }
        let mut rows: Vec<&Cell> = cells.iter().collect();
        rows.sort_by(|a, b| {
            (a.manifest.nonemb_params, &a.manifest.model_name, &a.manifest.dataset).cmp(&(
                b.manifest.nonemb_params,
                &b.manifest.model_name,
                &b.manifest.dataset,
            ))
        });
        let mut w = csv_sink(dir, "shares.csv")?;
        w.write_record(["model", "nonemb_params", "ee_share", "sa_share", "conf_share"])?;
        for c in rows {
            match component_shares(&c.decomposition) {
                Ok(s) => w.write_record([
                    c.manifest.model_name.clone(),
                    c.manifest.nonemb_params.to_string(),
                    num(s.ee_share),
                    num(s.sa_share),
                    num(s.conf_share),
                ])?,
                Err(e) => eprintln!("warning: {}: {e}", c.manifest.model_name),
            }
        }
        w.flush()?;
    }

    if let Some(d) = dir {
        write_run_meta(
            d,
            "fit",
            &paths,
            json!({
                "group_by": format!("{:?}", opts.group_by).to_lowercase(),
                "epsilon": opts.epsilon,
                "shares": opts.shares,
                "clamp_lns": opts.clamp_lns,
            }),
        )?;
    }
    Ok(())
}

fn write_overlay(dir: &Path, cell: &Cell, agg: &RankAggregate, bins: BinScheme) -> Result<f64> {
    let p = rbe_distribution(agg);
    let q = score_distribution(agg).map_err(|e| CliError::validation(e.to_string()))?;
    let ov = overlay(&p, &q).map_err(|e| CliError::validation(e.to_string()))?;

    let mut w = csv_writer(&dir.join(format!("{}.overlay.csv", cell.name)))?;
    w.write_record(["rank", "p", "q"])?;
    for row in &ov.rows {
        w.write_record([row.rank.to_string(), num(row.p), num(row.q)])?;
    }
    w.flush()?;

    let bp = bin_distribution(&p.p, bins);
    let bq = bin_distribution(&q.q, bins);
    let mut w = csv_writer(&dir.join(format!("{}.overlay.{bins}.csv", cell.name)))?;
    w.write_record(["rank_lo", "rank_hi", "p", "q"])?;
    for (a, b) in bp.bins.iter().zip(&bq.bins) {
        w.write_record([a.lo.to_string(), a.hi.to_string(), num(a.mass), num(b.mass)])?;
    }
    w.flush()?;
    Ok(ov.tv)
}

pub fn cmd_report(global: &Global, inputs: &[String], opts: &ReportOptions) -> Result<()> {
    check_clamp(opts.clamp_lns)?;
    if !opts.overlay && !opts.dynamics && opts.score_by_rank.is_none() {
        return Err(CliError::input(
            "nothing to report: pass --overlay, --dynamics or --score-by-rank",
        ));
    }
    let paths = resolve_inputs(inputs)?;
    require_inputs(&paths)?;
    let records_only = opts.overlay || opts.score_by_rank.is_some();
    let load = LoadOptions {
        clamp_lns: opts.clamp_lns,
        score_by_rank: opts.score_by_rank.map(|e| (e, opts.top_k)),
    };
    let cells = load_all(&paths, &load, global.jobs, records_only)?;
    let dir = global.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    ensure_dir(&dir)?;
    if records_only {
        check_unique_names(&cells)?;
    }

    if opts.overlay {
        for cell in &cells {
            let agg = cell.aggregate.as_ref().expect("record cells carry aggregates");
            let tv = write_overlay(&dir, cell, agg, opts.bins)?;
            println!("{}\ttv={}", cell.name, num(tv));
        }
    }

    if let Some(rbe) = opts.score_by_rank {
        for cell in &cells {
            let profile = cell.profile.as_ref().expect("profile requested at load");
            if profile.skipped > 0 {
                eprintln!(
                    "warning: {}: {} record(s) at rbe={rbe} had no usable top-k profile",
                    cell.name, profile.skipped
                );
            }
            let mut w = csv_writer(&dir.join(format!("{}.score_by_rank.rbe{rbe}.csv", cell.name)))?;
            w.write_record(["position", "mean_score_arithmetic"])?;
            for (i, s) in profile.mean_score.iter().enumerate() {
                w.write_record([(i + 1).to_string(), num(*s)])?;
            }
            w.flush()?;
        }
    }

    if opts.dynamics {
        let pairs: Vec<_> = cells
            .iter()
            .map(|c| (c.manifest.clone(), c.decomposition))
            .collect();
        let series = dynamics_series(&pairs).map_err(|e| CliError::validation(e.to_string()))?;
        let mut w = csv_writer(&dir.join("dynamics.csv"))?;
        w.write_record(["step", "ce", "ee", "sa", "conf"])?;
        let k = match global.log_base {
            LogBase::E => 1.0,
            other => other.base().ln(),
        };
        for r in &series.rows {
            w.write_record([
                r.step.to_string(),
                num(r.ce / k),
                num(r.ee / k),
                num(r.sa / k),
                num(r.conf / k),
            ])?;
        }
        w.flush()?;
    }

    write_run_meta(
        &dir,
        "report",
        &paths,
        json!({
            "overlay": opts.overlay,
            "dynamics": opts.dynamics,
            "score_by_rank": opts.score_by_rank,
            "top_k": opts.top_k,
            "bins": opts.bins.to_string(),
            "log_base": global.log_base.label(),
            "clamp_lns": opts.clamp_lns,
        }),
    )
}

fn read_spec<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

pub fn cmd_synth(global: &Global, corpus: Option<&Path>, series: Option<&Path>) -> Result<()> {
    let corpora: Vec<SynthCorpus> = match (corpus, series) {
        (Some(p), None) => {
            let spec: SynthSpec = read_spec(p)?;
            vec![gen_corpus(&spec).map_err(|e| CliError::validation(e.to_string()))?]
        }
        (None, Some(p)) => {
            let spec: SeriesSpec = read_spec(p)?;
            gen_scaling_series(&spec).map_err(|e| CliError::validation(e.to_string()))?
        }
        _ => return Err(CliError::input("pass exactly one of --corpus or --series")),
    };
    let dir = global.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    ensure_dir(&dir)?;
    for c in &corpora {
        let path = save_corpus(&dir, &c.manifest.model_name, &c.records, &c.manifest)
            .map_err(|e| CliError::input(e.to_string()))?;
        println!("{}", path.display());
    }
    Ok(())
}

/// Per-file outcome of `validate`.
struct FileSummary {
    lines: Vec<String>,
    errors: u64,
    warnings: u64,
}

const MAX_LISTED: usize = 50;

fn validate_file(path: &Path) -> Result<FileSummary> {
    if is_decomposition_file(path) {
        return Err(CliError::input(format!("{}: not a record file", path.display())));
    }
    let (manifest, mut reader) = match open_record_file(path) {
        Ok(x) => x,
        Err(e @ RecordError::Io(_)) => return Err(CliError::input(format!("{}: {e}", path.display()))),
        Err(e) => {
            return Ok(FileSummary {
                lines: vec![format!("  error: {e}")],
                errors: 1,
                warnings: 0,
            })
        }
    };
    let mut s = FileSummary {
        lines: Vec::new(),
        errors: 0,
        warnings: 0,
    };
    let mut listed = 0usize;
    let mut note = |s: &mut FileSummary, text: String| {
        if listed < MAX_LISTED {
            s.lines.push(text);
        }
        listed += 1;
    };
    let mut agg = RankAggregate::new();
    while let Some(item) = reader.next_located() {
        match item {
            Ok((line, record)) => {
                let report = validate_record(&record, &manifest);
                for issue in &report.errors {
                    s.errors += 1;
                    note(&mut s, format!("  line {line}: error: {issue}"));
                }
                for issue in &report.warnings {
                    s.warnings += 1;
                    note(&mut s, format!("  line {line}: warning: {issue}"));
                }
                agg.push_record(&record);
            }
            Err(RecordError::Io(e)) => return Err(CliError::input(format!("{}: {e}", path.display()))),
            Err(e) => {
                s.errors += 1;
                note(&mut s, format!("  error: {e}"));
            }
        }
    }
    if s.errors == 0 && !agg.is_empty() {
        if let Ok(d) = cedecomp::decompose(&agg) {
            let bound = harmonic_conf_bound(&agg);
            if d.conf > bound {
                s.warnings += 1;
                note(
                    &mut s,
                    format!("  warning: confidence {:?} exceeds the harmonic bound {:?}", d.conf, bound),
                );
            }
        }
    }
    if listed > MAX_LISTED {
        s.lines.push(format!("  ... {} more", listed - MAX_LISTED));
    }
    Ok(s)
}

pub fn cmd_validate(global: &Global, inputs: &[String]) -> Result<()> {
    let paths = resolve_inputs(inputs)?;
    require_inputs(&paths)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(global.jobs.max(1))
        .build()
        .map_err(|e| CliError::input(e.to_string()))?;
    let results: Vec<Result<FileSummary>> = pool.install(|| paths.par_iter().map(|p| validate_file(p)).collect());

    let mut stdout = io::stdout().lock();
    let mut total_errors = 0;
    let mut first_io = None;
    for (path, r) in paths.iter().zip(results) {
        match r {
            Ok(s) => {
                writeln!(stdout, "{}: {} errors, {} warnings", path.display(), s.errors, s.warnings)?;
                for l in &s.lines {
                    writeln!(stdout, "{l}")?;
                }
                total_errors += s.errors;
            }
            Err(e) => {
                eprintln!("error: {e}");
                first_io.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_io {
        return Err(e);
    }
    if total_errors > 0 {
        return Err(CliError::validation(format!("{total_errors} hard error(s)")));
    }
    Ok(())
}
