//! Prediction records, corpus manifests and the JSON Lines wire format.
//!
//! A record file holds one JSON object per scored token:
//!
//! ```text
//! {"doc":0,"pos":5,"gt":1234,"lns":-1.3862943611198906,"rbe":1}
//! {"doc":0,"pos":6,"gt":17,"lns":-0.1,"rbe":0,"topk_lns":[-0.1,-2.5,-3.0]}
//! ```
//!
//! Floats are written as the shortest decimal that parses back to the same
//! binary64 value, so write → read is bit-exact. A zero probability score
//! (`lns = -inf`) has no JSON literal; it is written as `null`, and the
//! non-standard token `-Infinity` is accepted on input as the same value.
//!
//! Each record file `<name>.jsonl` is paired with a sidecar manifest
//! `<name>.manifest.json` describing the model and corpus.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

/// Errors raised while reading or writing record files and manifests.
#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: {message}")]
    Parse {
        line: u64,
        field: Option<&'static str>,
        message: String,
    },
    #[error("schema_version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("manifest declares {expected} records but the file holds {found}")]
    CountMismatch { expected: u64, found: u64 },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One scored ground-truth token.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub doc_id: u64,
    pub pos: u64,
    pub gt_token: u64,
    /// Natural log of the probability score of the ground-truth token.
    pub ln_score: f64,
    /// Rank-based error: number of vocabulary entries scored strictly higher.
    pub rbe: u64,
    /// Log-scores of the top-K tokens in rank order, rank 1 first.
    pub topk_ln_scores: Option<Vec<f64>>,
}

impl PredictionRecord {
    pub fn new(doc_id: u64, pos: u64, gt_token: u64, ln_score: f64, rbe: u64) -> Self {
        Self {
            doc_id,
            pos,
            gt_token,
            ln_score,
            rbe,
            topk_ln_scores: None,
        }
    }

    pub fn with_topk(mut self, topk_ln_scores: Vec<f64>) -> Self {
        self.topk_ln_scores = Some(topk_ln_scores);
        self
    }

    /// Bitwise equality, including the float payloads.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let topk_eq = match (&self.topk_ln_scores, &other.topk_ln_scores) {
            (None, None) => true,
            (Some(a), Some(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        };
        self.doc_id == other.doc_id
            && self.pos == other.pos
            && self.gt_token == other.gt_token
            && self.ln_score.to_bits() == other.ln_score.to_bits()
            && self.rbe == other.rbe
            && topk_eq
    }
}

/// Metadata for one corpus × model × checkpoint cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub model_name: String,
    pub family: String,
    /// Non-embedding parameter count, the size variable of scaling fits.
    pub nonemb_params: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_step: Option<u64>,
    pub dataset: String,
    pub vocab_size: u64,
    pub num_records: u64,
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Requested profile length when records carry `topk_lns`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u64>,
    /// Producer-specific metadata (context length, precision, ...), echoed verbatim.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl CorpusManifest {
    pub fn new(
        model_name: impl Into<String>,
        family: impl Into<String>,
        nonemb_params: u64,
        dataset: impl Into<String>,
        vocab_size: u64,
        num_records: u64,
    ) -> Self {
        Self {
            model_name: model_name.into(),
            family: family.into(),
            nonemb_params,
            checkpoint_step: None,
            dataset: dataset.into(),
            vocab_size,
            num_records,
            schema_version: SCHEMA_VERSION,
            seed: None,
            top_k: None,
            extra: BTreeMap::new(),
        }
    }

    /// Checks the manifest-level invariants.
    pub fn check(&self) -> Result<(), RecordError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(RecordError::SchemaVersion {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        if self.vocab_size < 2 {
            return Err(RecordError::Manifest(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.nonemb_params == 0 {
            return Err(RecordError::Manifest("nonemb_params must be positive".into()));
        }
        Ok(())
    }

    pub fn from_reader<R: io::Read>(reader: R) -> Result<Self, RecordError> {
        let manifest: CorpusManifest = serde_json::from_reader(reader)
            .map_err(|e| RecordError::Manifest(e.to_string()))?;
        manifest.check()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self, RecordError> {
        let file = File::open(path).map_err(|e| {
            io::Error::new(e.kind(), format!("{}: {e}", path.display()))
        })?;
        Self::from_reader(BufReader::new(file))
            .map_err(|e| match e {
                RecordError::Manifest(m) => {
                    RecordError::Manifest(format!("{}: {m}", path.display()))
                }
                other => other,
            })
    }

    pub fn save(&self, path: &Path) -> Result<(), RecordError> {
        let mut file = File::create(path)?;
        serde_json::to_writer_pretty(&mut file, self)
            .map_err(|e| RecordError::Io(e.into()))?;
        file.write_all(b"\n")?;
        Ok(())
    }
}

/// `foo/bar.jsonl` → `foo/bar.manifest.json`.
pub fn manifest_path_for(records_path: &Path) -> PathBuf {
    let stem = records_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    records_path.with_file_name(format!("{stem}.manifest.json"))
}

// ---------------------------------------------------------------------------
// Wire format

#[derive(Serialize)]
struct WireRecord<'a> {
    doc: u64,
    pos: u64,
    gt: u64,
    // serde_json writes non-finite floats as `null`
    lns: f64,
    rbe: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    topk_lns: Option<&'a [f64]>,
}

/// Serializes one record as a single JSON line (without the newline).
pub fn record_to_line(record: &PredictionRecord) -> String {
    let wire = WireRecord {
        doc: record.doc_id,
        pos: record.pos,
        gt: record.gt_token,
        lns: record.ln_score,
        rbe: record.rbe,
        topk_lns: record.topk_ln_scores.as_deref(),
    };
    serde_json::to_string(&wire).expect("record serialization is infallible")
}

/// Writes records as JSON Lines and returns the number of bytes written.
pub fn write_records<'a, I, W>(records: I, mut out: W) -> io::Result<u64>
where
    I: IntoIterator<Item = &'a PredictionRecord>,
    W: Write,
{
    let mut bytes = 0u64;
    for record in records {
        let line = record_to_line(record);
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        bytes += line.len() as u64 + 1;
    }
    out.flush()?;
    Ok(bytes)
}

fn parse_error(line: u64, field: Option<&'static str>, message: impl Into<String>) -> RecordError {
    RecordError::Parse {
        line,
        field,
        message: message.into(),
    }
}

fn describe(value: &Value) -> String {
    let s = value.to_string();
    if s.len() > 40 {
        format!("{}...", &s[..37])
    } else {
        s
    }
}

fn take_u64(map: &mut Map<String, Value>, key: &'static str, line: u64) -> Result<u64, RecordError> {
    match map.remove(key) {
        None => Err(parse_error(line, Some(key), format!("missing field `{key}`"))),
        Some(v) => v.as_u64().ok_or_else(|| {
            parse_error(
                line,
                Some(key),
                format!("field `{key}`: expected a non-negative integer, found {}", describe(&v)),
            )
        }),
    }
}

fn as_ln_score(value: &Value) -> Option<f64> {
    match value {
        Value::Null => Some(f64::NEG_INFINITY),
        Value::Number(n) => n.as_f64(),
        _ => None,
    }
}

/// Parses one wire line. `line` is the 1-based physical line number used in errors.
pub fn parse_record_line(text: &str, line: u64) -> Result<PredictionRecord, RecordError> {
    let patched;
    let text = if text.contains("-Infinity") {
        patched = text.replace("-Infinity", "null");
        patched.as_str()
    } else {
        text
    };
    let value: Value = serde_json::from_str(text)
        .map_err(|e| parse_error(line, None, format!("invalid JSON: {e}")))?;
    let Value::Object(mut map) = value else {
        return Err(parse_error(line, None, "expected a JSON object"));
    };

    let doc_id = take_u64(&mut map, "doc", line)?;
    let pos = take_u64(&mut map, "pos", line)?;
    let gt_token = take_u64(&mut map, "gt", line)?;
    let rbe = take_u64(&mut map, "rbe", line)?;
    let ln_score = match map.remove("lns") {
        None => return Err(parse_error(line, Some("lns"), "missing field `lns`")),
        Some(v) => as_ln_score(&v).ok_or_else(|| {
            parse_error(
                line,
                Some("lns"),
                format!("field `lns`: expected a number, found {}", describe(&v)),
            )
        })?,
    };
    let topk_ln_scores = match map.remove("topk_lns") {
        None => None,
        Some(Value::Array(items)) => {
            let mut out = Vec::with_capacity(items.len());
            for (i, item) in items.iter().enumerate() {
                let x = as_ln_score(item).ok_or_else(|| {
                    parse_error(
                        line,
                        Some("topk_lns"),
                        format!("field `topk_lns[{i}]`: expected a number, found {}", describe(item)),
                    )
                })?;
                out.push(x);
            }
            Some(out)
        }
        Some(v) => {
            return Err(parse_error(
                line,
                Some("topk_lns"),
                format!("field `topk_lns`: expected an array, found {}", describe(&v)),
            ))
        }
    };
    if let Some(key) = map.keys().next() {
        return Err(parse_error(line, None, format!("unknown field `{key}`")));
    }

    Ok(PredictionRecord {
        doc_id,
        pos,
        gt_token,
        ln_score,
        rbe,
        topk_ln_scores,
    })
}

/// Streaming reader over a record file.
///
/// Yields records in file order together with their line numbers. Once the
/// input is exhausted the number of records read is compared against the
/// expected count and a [`RecordError::CountMismatch`] is yielded on
/// disagreement. After the first error the iterator is fused.
pub struct RecordReader<R> {
    lines: io::Lines<R>,
    expected: u64,
    read: u64,
    line_no: u64,
    done: bool,
}

impl<R: BufRead> RecordReader<R> {
    pub fn new(reader: R, expected: u64) -> Self {
        Self {
            lines: reader.lines(),
            expected,
            read: 0,
            line_no: 0,
            done: false,
        }
    }

    /// Line number of the most recently yielded record.
    pub fn line_number(&self) -> u64 {
        self.line_no
    }

    pub fn records_read(&self) -> u64 {
        self.read
    }

    /// Like `next`, but also returns the 1-based line number of the record.
    pub fn next_located(&mut self) -> Option<Result<(u64, PredictionRecord), RecordError>> {
        self.next().map(|r| r.map(|rec| (self.line_no, rec)))
    }
}

impl<R: BufRead> Iterator for RecordReader<R> {
    type Item = Result<PredictionRecord, RecordError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            match self.lines.next() {
                None => {
                    self.done = true;
                    if self.read != self.expected {
                        return Some(Err(RecordError::CountMismatch {
                            expected: self.expected,
                            found: self.read,
                        }));
                    }
                    return None;
                }
                Some(Err(e)) => {
                    self.done = true;
                    let line = self.line_no + 1;
                    return Some(Err(if e.kind() == io::ErrorKind::InvalidData {
                        parse_error(line, None, "invalid UTF-8")
                    } else {
                        RecordError::Io(e)
                    }));
                }
                Some(Ok(text)) => {
                    self.line_no += 1;
                    if text.trim().is_empty() {
                        continue;
                    }
                    let parsed = parse_record_line(&text, self.line_no);
                    match parsed {
                        Ok(record) => {
                            self.read += 1;
                            if self.read > self.expected {
                                self.done = true;
                                let mut found = self.read;
                                for line in self.lines.by_ref() {
                                    match line {
                                        Ok(l) if !l.trim().is_empty() => found += 1,
                                        _ => {}
                                    }
                                }
                                return Some(Err(RecordError::CountMismatch {
                                    expected: self.expected,
                                    found,
                                }));
                            }
                            return Some(Ok(record));
                        }
                        Err(e) => {
                            self.done = true;
                            return Some(Err(e));
                        }
                    }
                }
            }
        }
    }
}

/// Streams the records of `reader` after checking the manifest's schema version.
pub fn read_records<R: BufRead>(
    reader: R,
    manifest: &CorpusManifest,
) -> Result<RecordReader<R>, RecordError> {
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(RecordError::SchemaVersion {
            found: manifest.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(RecordReader::new(reader, manifest.num_records))
}

/// Opens `<path>` and its sidecar manifest.
pub fn open_record_file(
    path: &Path,
) -> Result<(CorpusManifest, RecordReader<BufReader<File>>), RecordError> {
    let manifest = CorpusManifest::load(&manifest_path_for(path))?;
    let file = File::open(path)
        .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let reader = read_records(BufReader::new(file), &manifest)?;
    Ok((manifest, reader))
}

/// Writes `<dir>/<name>.jsonl` and `<dir>/<name>.manifest.json`. Returns the record path.
pub fn save_corpus(
    dir: &Path,
    name: &str,
    records: &[PredictionRecord],
    manifest: &CorpusManifest,
) -> Result<PathBuf, RecordError> {
    let path = dir.join(format!("{name}.jsonl"));
    let file = File::create(&path)?;
    write_records(records, io::BufWriter::new(file))?;
    manifest.save(&manifest_path_for(&path))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Outcome of checking one record: hard errors and soft warnings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn is_clean(&self) -> bool {
        self.errors.is_empty() && self.warnings.is_empty()
    }

    fn error(&mut self, field: &'static str, message: impl Into<String>) {
        self.errors.push(Issue {
            field,
            message: message.into(),
        });
    }

    fn warn(&mut self, field: &'static str, message: impl Into<String>) {
        self.warnings.push(Issue {
            field,
            message: message.into(),
        });
    }
}

/// Formats a probability with at most six decimals and no trailing zeros.
fn short_prob(p: f64) -> String {
    let s = format!("{p:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

/// Checks a record against the record and manifest invariants.
///
/// The bound `ln_score <= -ln(rbe + 1)` (a token at rank `e+1` cannot hold more
/// than `1/(e+1)` of a proper probability simplex) is reported as a warning only.
pub fn validate_record(record: &PredictionRecord, manifest: &CorpusManifest) -> ValidationReport {
    let mut report = ValidationReport::default();
    let lns = record.ln_score;

    if lns.is_nan() {
        report.error("lns", "ln_score is NaN");
    } else if lns > 0.0 {
        report.error("lns", "ln_score > 0");
    } else if lns == f64::NEG_INFINITY {
        report.error("lns", "zero probability score (ln_score = -inf)");
    } else if record.rbe > 0 {
        let bound = -((record.rbe as f64) + 1.0).ln();
        // relative slack absorbs rounding in ln() for scores sitting exactly on the bound
        if lns > bound + 1e-12 * bound.abs() {
            report.warn(
                "lns",
                format!(
                    "score {} > 1/{} bound",
                    short_prob(lns.exp()),
                    record.rbe + 1
                ),
            );
        }
    }

    if record.rbe >= manifest.vocab_size {
        report.error(
            "rbe",
            format!("rbe {} >= vocab_size {}", record.rbe, manifest.vocab_size),
        );
    }
    if record.gt_token >= manifest.vocab_size {
        report.error(
            "gt",
            format!("gt {} >= vocab_size {}", record.gt_token, manifest.vocab_size),
        );
    }

    if let Some(topk) = &record.topk_ln_scores {
        if topk.iter().any(|x| x.is_nan() || *x > 0.0) {
            report.error("topk_lns", "top-k log-scores must be <= 0");
        }
        if topk.windows(2).any(|w| !(w[0] >= w[1])) {
            report.error("topk_lns", "top-k log-scores are not non-increasing");
        }
        let k = manifest.top_k.unwrap_or(topk.len() as u64);
        let required = k.min(record.rbe.saturating_add(1));
        if (topk.len() as u64) < required {
            report.error(
                "topk_lns",
                format!("profile has {} entries, need at least {required}", topk.len()),
            );
        }
        if let Some(at_rank) = usize::try_from(record.rbe).ok().and_then(|i| topk.get(i)) {
            if *at_rank != lns {
                report.error(
                    "topk_lns",
                    format!(
                        "topk_lns[{}] = {at_rank:?} does not equal lns = {lns:?}",
                        record.rbe
                    ),
                );
            }
        }
    }

    report
}
