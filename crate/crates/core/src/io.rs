//! File formats: feature CSVs, raw tabular CSVs (including the UCI wall
//! following robot file), stratified splits, and the binary artifacts for
//! calibrated monitors and reference models.
//!
//! # Feature CSV
//!
//! ```text
//! #format=icpmon-features/1
//! #labels=["Move-Forward","Sharp-Right-Turn"]
//! id,label,e0,e1,z0,z1,p0,p1
//! r0,1,0.25,1.5,-0.3,2.1,0.0831727,0.916827
//! ```
//!
//! Both `#` lines are optional. Column groups appear in the order `e*`
//! (embedding), `z*` (logits), `p*` (probabilities), `x*` (raw inputs), each
//! numbered from zero. Numbers are written with at most 9 significant
//! digits. An empty `label` field marks an unlabeled row.
//!
//! # Artifacts
//!
//! Little-endian binary: 8-byte magic, `u32` version, `u32` section count,
//! then sections of `[u8; 4]` tag, `u64` length and payload.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{CumulativeErrorCurve, CurvePoint, EpsilonRow};
use crate::icp::{CalibratedMonitor, InclusionRule, PredictionResult};
use crate::neighbors::NeighborIndex;
use crate::nonconformity::{softmax, Centroids, NonconformityFunction, NonconformityKind, Score};
use crate::refmodel::{MlpModel, RawExample, TabularDataset};
use crate::types::{
    Dataset, EmbeddingVector, Features, LabelId, LabelUniverse, LabeledExample, LogitVector,
    ProbabilityVector, Role,
};

pub const FEATURE_FORMAT: &str = "icpmon-features";
pub const FEATURE_VERSION: u32 = 1;

pub const MONITOR_MAGIC: &[u8; 8] = b"ICPMON\0\0";
pub const MODEL_MAGIC: &[u8; 8] = b"ICPMLP\0\0";
pub const ARTIFACT_VERSION: u32 = 1;

/// Renders `x` with at most 9 significant digits, shortest form.
pub fn format_number(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    format!("{rounded:?}")
}

// ---------------------------------------------------------------------------
// Feature files
// ---------------------------------------------------------------------------

/// Which column groups a feature file carries and their widths.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnLayout {
    pub embedding: Option<usize>,
    pub logits: Option<usize>,
    pub probs: Option<usize>,
    pub raw: Option<usize>,
}

impl ColumnLayout {
    fn width(&self) -> usize {
        [self.embedding, self.logits, self.probs, self.raw]
            .iter()
            .map(|w| w.unwrap_or(0))
            .sum()
    }

    /// Number of classes implied by logit/probability columns.
    fn implied_classes(&self) -> Option<usize> {
        self.logits.or(self.probs)
    }

    fn column_names(&self) -> Vec<String> {
        let mut cols = vec!["id".to_string(), "label".to_string()];
        for (prefix, width) in [("e", self.embedding), ("z", self.logits), ("p", self.probs), ("x", self.raw)] {
            for i in 0..width.unwrap_or(0) {
                cols.push(format!("{prefix}{i}"));
            }
        }
        cols
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureFileHeader {
    pub version: u32,
    pub layout: ColumnLayout,
    pub labels: Option<Vec<String>>,
}

impl FeatureFileHeader {
    fn parse_columns(fields: &[&str], path: &str, line: usize) -> Result<ColumnLayout> {
        let err = |message: String| Error::Parse {
            path: path.to_string(),
            line,
            message,
        };
        if fields.len() < 3 || fields[0].trim() != "id" || fields[1].trim() != "label" {
            return Err(err("header must start with `id,label` followed by feature columns".into()));
        }
        let mut layout = ColumnLayout::default();
        let order = ['e', 'z', 'p', 'x'];
        let mut current: Option<usize> = None;
        let mut next_index = 0usize;
        for name in &fields[2..] {
            let name = name.trim();
            let bad = || err(format!("unrecognized column `{name}`"));
            let prefix = name.chars().next().ok_or_else(bad)?;
            let index: usize = name[prefix.len_utf8()..].parse().map_err(|_| bad())?;
            let pos = order.iter().position(|c| *c == prefix).ok_or_else(bad)?;
            if current != Some(pos) {
                if current.is_some_and(|c| pos < c) {
                    return Err(err(format!("column `{name}` out of order")));
                }
                current = Some(pos);
                next_index = 0;
            }
            if index != next_index {
                return Err(err(format!("column `{name}` out of sequence (expected {prefix}{next_index})")));
            }
            next_index += 1;
            *layout_slot(&mut layout, pos) = Some(next_index);
        }
        Ok(layout)
    }

    fn metadata_lines(&self) -> Vec<String> {
        let mut lines = vec![format!("#format={FEATURE_FORMAT}/{}", self.version)];
        if let Some(labels) = &self.labels {
            lines.push(format!(
                "#labels={}",
                serde_json::to_string(labels).expect("label names serialize")
            ));
        }
        lines
    }
}

fn layout_slot(layout: &mut ColumnLayout, pos: usize) -> &mut Option<usize> {
    match pos {
        0 => &mut layout.embedding,
        1 => &mut layout.logits,
        2 => &mut layout.probs,
        _ => &mut layout.raw,
    }
}

/// One parsed data row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub id: String,
    pub label: Option<LabelId>,
    pub features: Features,
    pub raw: Option<Vec<f64>>,
    /// 1-based line number in the source.
    pub line: usize,
}

/// Incremental reader for feature CSVs; rows are parsed one at a time so a
/// malformed row can be reported without losing the rest of the stream.
pub struct FeatureReader<R> {
    input: R,
    source: String,
    line: usize,
    header: FeatureFileHeader,
}

impl<R: BufRead> FeatureReader<R> {
    /// Consumes metadata lines and the column header.
    pub fn new(mut input: R, source: &str) -> Result<Self> {
        let mut line_no = 0;
        let mut version = FEATURE_VERSION;
        let mut labels = None;
        let mut buf = String::new();
        loop {
            buf.clear();
            if input.read_line(&mut buf)? == 0 {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: line_no,
                    message: "missing header line".into(),
                });
            }
            line_no += 1;
            let line = buf.trim_end_matches(['\n', '\r']);
            let err = |message: String| Error::Parse {
                path: source.to_string(),
                line: line_no,
                message,
            };
            if let Some(meta) = line.strip_prefix('#') {
                if let Some(fmt) = meta.strip_prefix("format=") {
                    let (name, ver) = fmt
                        .split_once('/')
                        .ok_or_else(|| err(format!("malformed format tag `{fmt}`")))?;
                    if name != FEATURE_FORMAT {
                        return Err(err(format!("unknown format `{name}`")));
                    }
                    version = ver.parse().map_err(|_| err(format!("bad version `{ver}`")))?;
                    if version != FEATURE_VERSION {
                        return Err(err(format!("unsupported feature file version {version}")));
                    }
                } else if let Some(names) = meta.strip_prefix("labels=") {
                    let names: Vec<String> = serde_json::from_str(names)
                        .map_err(|e| err(format!("bad label table: {e}")))?;
                    labels = Some(names);
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let layout = FeatureFileHeader::parse_columns(&fields, source, line_no)?;
            if let (Some(names), Some(c)) = (&labels, layout.implied_classes()) {
                if names.len() != c {
                    return Err(err(format!("label table has {} names but {c} class columns", names.len())));
                }
            }
            if layout.logits.is_some() && layout.probs.is_some() && layout.logits != layout.probs {
                return Err(err("logit and probability column counts differ".into()));
            }
            return Ok(Self {
                input,
                source: source.to_string(),
                line: line_no,
                header: FeatureFileHeader {
                    version,
                    layout,
                    labels,
                },
            });
        }
    }

    pub fn header(&self) -> &FeatureFileHeader {
        &self.header
    }

    /// Next row, `None` at end of input. A parse error consumes its line.
    pub fn next_row(&mut self) -> Option<Result<FeatureRow>> {
        let mut buf = String::new();
        loop {
            buf.clear();
            match self.input.read_line(&mut buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            self.line += 1;
            let line = buf.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            return Some(self.parse_row(line));
        }
    }

    fn parse_row(&self, line: &str) -> Result<FeatureRow> {
        let err = |message: String| Error::Parse {
            path: self.source.clone(),
            line: self.line,
            message,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(line.as_bytes());
        let record = rdr
            .records()
            .next()
            .ok_or_else(|| err("empty row".into()))?
            .map_err(|e| err(e.to_string()))?;
        let layout = &self.header.layout;
        if record.len() != 2 + layout.width() {
            return Err(err(format!(
                "row has {} fields, header declares {}",
                record.len(),
                2 + layout.width()
            )));
        }
        let id = record[0].to_string();
        let label_field = record[1].trim();
        let label = if label_field.is_empty() {
            None
        } else if let Ok(i) = label_field.parse::<usize>() {
            Some(LabelId(i))
        } else {
            let names = self.header.labels.as_ref();
            Some(
                names
                    .and_then(|n| n.iter().position(|x| x == label_field))
                    .map(LabelId)
                    .ok_or_else(|| err(format!("unknown label `{label_field}`")))?,
            )
        };
        if let Some(l) = label {
            let classes = self
                .header
                .labels
                .as_ref()
                .map(Vec::len)
                .or(layout.implied_classes());
            if let Some(c) = classes {
                if l.0 >= c {
                    return Err(err(format!("unknown label {l} (universe has {c} classes)")));
                }
            }
        }
        let mut values = Vec::with_capacity(layout.width());
        for (i, f) in record.iter().skip(2).enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| err(format!("column {} is not a number: `{f}`", i + 2)))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value in column {}", i + 2)));
            }
            values.push(v);
        }
        let mut rest = values.as_slice();
        let mut take = |w: Option<usize>| {
            w.map(|w| {
                let (head, tail) = rest.split_at(w);
                rest = tail;
                head.to_vec()
            })
        };
        let embedding = take(layout.embedding).map(EmbeddingVector);
        let logits = take(layout.logits).map(LogitVector);
        let mut probs = take(layout.probs).map(ProbabilityVector);
        let raw = take(layout.raw);
        if let Some(z) = &logits {
            if probs.is_some() {
                probs = Some(softmax(z.as_slice()));
            }
        }
        Ok(FeatureRow {
            id,
            label,
            features: Features {
                embedding,
                probs,
                logits,
            },
            raw,
            line: self.line,
        })
    }

    /// Reads every remaining row, failing on the first bad one.
    pub fn read_all(mut self) -> Result<(FeatureFileHeader, Vec<FeatureRow>)> {
        let mut rows = Vec::new();
        while let Some(row) = self.next_row() {
            rows.push(row?);
        }
        Ok((self.header, rows))
    }
}

fn open_reader(path: &Path) -> Result<FeatureReader<BufReader<fs::File>>> {
    let file = fs::File::open(path)?;
    FeatureReader::new(BufReader::new(file), &path.display().to_string())
}

fn universe_for(header: &FeatureFileHeader, rows: &[FeatureRow]) -> Result<LabelUniverse> {
    if let Some(names) = &header.labels {
        return LabelUniverse::new(names.clone());
    }
    let from_labels = rows.iter().filter_map(|r| r.label).map(|l| l.0 + 1).max().unwrap_or(0);
    let classes = header.layout.implied_classes().unwrap_or(0).max(from_labels).max(2);
    LabelUniverse::anonymous(classes)
}

fn require_label(row: &FeatureRow, path: &Path) -> Result<LabelId> {
    row.label.ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        line: row.line,
        message: "missing label".into(),
    })
}

/// Loads and validates a labeled feature file.
pub fn load_feature_file(path: impl AsRef<Path>, role: Role) -> Result<Dataset> {
    let path = path.as_ref();
    let (header, rows) = open_reader(path)?.read_all()?;
    if header.layout.raw.is_some() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: "raw input columns in a feature file; use the tabular loader".into(),
        });
    }
    let universe = universe_for(&header, &rows)?;
    let examples = rows
        .iter()
        .map(|r| {
            Ok(LabeledExample {
                id: r.id.clone(),
                features: r.features.clone(),
                label: require_label(r, path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::validated(examples, universe, header.layout.embedding, role)
}

/// Loads feature rows whose labels may be absent (inputs to prediction).
pub fn load_feature_rows(path: impl AsRef<Path>) -> Result<(FeatureFileHeader, Vec<FeatureRow>)> {
    open_reader(path.as_ref())?.read_all()
}

fn write_rows<W: Write>(
    out: W,
    header: &FeatureFileHeader,
    rows: impl Iterator<Item = (String, Option<LabelId>, Vec<f64>)>,
) -> Result<()> {
    let mut out = out;
    for line in header.metadata_lines() {
        writeln!(out, "{line}")?;
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(header.layout.column_names())?;
    for (id, label, values) in rows {
        let mut record = Vec::with_capacity(values.len() + 2);
        record.push(id);
        record.push(label.map(|l| l.to_string()).unwrap_or_default());
        record.extend(values.into_iter().map(format_number));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

fn layout_of(ds: &Dataset) -> ColumnLayout {
    let first = ds.examples.first().map(|e| &e.features);
    ColumnLayout {
        embedding: first.and_then(|f| f.embedding.as_ref().map(EmbeddingVector::len)),
        logits: first.and_then(|f| f.logits.as_ref().map(LogitVector::len)),
        probs: first.and_then(|f| f.probs.as_ref().map(ProbabilityVector::len)),
        raw: None,
    }
}

fn labels_meta(universe: &LabelUniverse) -> Option<Vec<String>> {
    Some(universe.names().to_vec())
}

pub fn write_features<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let header = FeatureFileHeader {
        version: FEATURE_VERSION,
        layout: layout_of(ds),
        labels: labels_meta(&ds.universe),
    };
    let rows = ds.examples.iter().map(|ex| {
        let f = &ex.features;
        let mut values = Vec::new();
        for part in [
            f.embedding.as_ref().map(EmbeddingVector::as_slice),
            f.logits.as_ref().map(LogitVector::as_slice),
            f.probs.as_ref().map(ProbabilityVector::as_slice),
        ]
        .into_iter()
        .flatten()
        {
            values.extend_from_slice(part);
        }
        (ex.id.clone(), Some(ex.label), values)
    });
    write_rows(out, &header, rows)
}

pub fn write_feature_file(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_features(ds, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Raw tabular files
// ---------------------------------------------------------------------------

/// Parses the UCI wall-following robot format: numeric columns followed by a
/// class name, no header. Class names map to indices in order of first
/// appearance.
pub fn parse_uci_tabular<R: Read>(input: R, source: &str, role: Role) -> Result<TabularDataset> {
    let mut names: Vec<String> = Vec::new();
    let mut examples = Vec::new();
    let mut width = None;
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (class, numbers) = fields.split_last().ok_or_else(|| err("empty row".into()))?;
        if numbers.is_empty() {
            return Err(err("row has no numeric columns".into()));
        }
        match width {
            None => width = Some(numbers.len()),
            Some(w) if w != numbers.len() => {
                return Err(err(format!("row has {} numeric columns, expected {w}", numbers.len())))
            }
            _ => {}
        }
        let values = numbers
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("bad numeric value `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let label = match names.iter().position(|n| n == class) {
            Some(p) => p,
            None => {
                names.push(class.to_string());
                names.len() - 1
            }
        };
        examples.push(RawExample {
            id: format!("r{}", examples.len()),
            values,
            label: LabelId(label),
        });
    }
    let ds = TabularDataset {
        examples,
        universe: LabelUniverse::new(names)?,
        role,
    };
    ds.check()?;
    Ok(ds)
}

/// Loads a raw tabular file: either the feature-CSV layout with `x*`
/// columns, or a headerless UCI-style file.
pub fn load_tabular(path: impl AsRef<Path>, role: Role) -> Result<TabularDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if !(first.starts_with('#') || first.starts_with("id,")) {
        return parse_uci_tabular(text.as_bytes(), &path.display().to_string(), role);
    }
    let (header, rows) = FeatureReader::new(text.as_bytes(), &path.display().to_string())?.read_all()?;
    if header.layout.raw.is_none() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: "no raw `x*` columns".into(),
        });
    }
    let universe = universe_for(&header, &rows)?;
    let examples = rows
        .iter()
        .map(|r| {
            Ok(RawExample {
                id: r.id.clone(),
                values: r.raw.clone().unwrap_or_default(),
                label: require_label(r, path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = TabularDataset {
        examples,
        universe,
        role,
    };
    ds.check()?;
    Ok(ds)
}

pub fn write_tabular<W: Write>(ds: &TabularDataset, out: W) -> Result<()> {
    let header = FeatureFileHeader {
        version: FEATURE_VERSION,
        layout: ColumnLayout {
            raw: ds.dim(),
            ..ColumnLayout::default()
        },
        labels: labels_meta(&ds.universe),
    };
    let rows = ds
        .examples
        .iter()
        .map(|ex| (ex.id.clone(), Some(ex.label), ex.values.clone()));
    write_rows(out, &header, rows)
}

pub fn write_tabular_file(ds: &TabularDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_tabular(ds, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub train_fraction_of_rest: f64,
    pub calib_share_of_holdout: f64,
    pub seed: u64,
    /// Use the whole hold-out for calibration and reuse it as validation.
    pub share_calibration_validation: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.10,
            train_fraction_of_rest: 0.80,
            calib_share_of_holdout: 0.50,
            seed: 0,
            share_calibration_validation: false,
        }
    }
}

/// Example indices of each part, in seeded-shuffle order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub calibration: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Splits<T> {
    pub train: T,
    pub calibration: T,
    pub validation: T,
    pub test: T,
}

/// Stratified, seeded partition of `labels` into train/calibration/
/// validation/test.
pub fn split_indices(labels: &[LabelId], cfg: &SplitConfig) -> Result<SplitIndices> {
    for (name, v) in [
        ("test_fraction", cfg.test_fraction),
        ("train_fraction_of_rest", cfg.train_fraction_of_rest),
        ("calib_share_of_holdout", cfg.calib_share_of_holdout),
    ] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::InvalidParameter(format!("{name} must lie in (0, 1), got {v}")));
        }
    }
    let classes = labels.iter().map(|l| l.0 + 1).max().unwrap_or(0);
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, l) in labels.iter().enumerate() {
        strata[l.0].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = SplitIndices {
        train: Vec::new(),
        calibration: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (class, mut members) in strata.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 4 {
            return Err(Error::InvalidParameter(format!(
                "class {class} has {} examples; at least 4 are needed to split",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let n_test = (n as f64 * cfg.test_fraction).round() as usize;
        let rest = n - n_test;
        let n_train = ((rest as f64 * cfg.train_fraction_of_rest).round() as usize).clamp(1, rest);
        let holdout = rest - n_train;
        let n_calib = if cfg.share_calibration_validation {
            holdout
        } else {
            (holdout as f64 * cfg.calib_share_of_holdout).round() as usize
        };
        let (test, tail) = members.split_at(n_test);
        let (train, tail) = tail.split_at(n_train);
        let (calib, val) = tail.split_at(n_calib);
        out.test.extend_from_slice(test);
        out.train.extend_from_slice(train);
        out.calibration.extend_from_slice(calib);
        if cfg.share_calibration_validation {
            out.validation.extend_from_slice(calib);
        } else {
            out.validation.extend_from_slice(val);
        }
    }
    for (name, part) in [
        ("train", &mut out.train),
        ("calibration", &mut out.calibration),
        ("validation", &mut out.validation),
        ("test", &mut out.test),
    ] {
        if part.is_empty() {
            return Err(Error::InvalidParameter(format!("{name} split would be empty")));
        }
        part.shuffle(&mut rng);
    }
    Ok(out)
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

pub fn split_dataset(ds: &Dataset, cfg: &SplitConfig) -> Result<Splits<Dataset>> {
    let labels: Vec<LabelId> = ds.examples.iter().map(|e| e.label).collect();
    let idx = split_indices(&labels, cfg)?;
    let part = |i: &[usize], role| Dataset {
        examples: pick(&ds.examples, i),
        universe: ds.universe.clone(),
        embedding_dim: ds.embedding_dim,
        role,
    };
    Ok(Splits {
        train: part(&idx.train, Role::ProperTraining),
        calibration: part(&idx.calibration, Role::Calibration),
        validation: part(&idx.validation, Role::Validation),
        test: part(&idx.test, Role::Test),
    })
}

pub fn split_tabular(ds: &TabularDataset, cfg: &SplitConfig) -> Result<Splits<TabularDataset>> {
    let labels: Vec<LabelId> = ds.examples.iter().map(|e| e.label).collect();
    let idx = split_indices(&labels, cfg)?;
    let part = |i: &[usize], role| TabularDataset {
        examples: pick(&ds.examples, i),
        universe: ds.universe.clone(),
        role,
    };
    Ok(Splits {
        train: part(&idx.train, Role::ProperTraining),
        calibration: part(&idx.calibration, Role::Calibration),
        validation: part(&idx.validation, Role::Validation),
        test: part(&idx.test, Role::Test),
    })
}

// ---------------------------------------------------------------------------
// Binary artifacts
// ---------------------------------------------------------------------------

#[derive(Default)]
struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|v| self.f64(*v));
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn names(&mut self, u: &LabelUniverse) {
        self.u32(u.len() as u32);
        u.names().iter().for_each(|n| self.str(n));
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Decoder<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, what }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format(format!("truncated {}", self.what)));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, item_bytes: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(item_bytes) > self.buf.len() {
            return Err(Error::Format(format!("truncated {}", self.what)));
        }
        Ok(n)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format(format!("invalid utf-8 in {}", self.what)))
    }
    fn names(&mut self) -> Result<LabelUniverse> {
        let n = self.u32()? as usize;
        if n > self.buf.len() {
            return Err(Error::Format(format!("truncated {}", self.what)));
        }
        LabelUniverse::new((0..n).map(|_| self.str()).collect::<Result<_>>()?)
    }
    fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!("trailing bytes in {}", self.what)))
        }
    }
}

type Section = ([u8; 4], Vec<u8>);

fn encode_container(magic: &[u8; 8], sections: Vec<Section>) -> Vec<u8> {
    let mut e = Encoder::default();
    e.buf.extend_from_slice(magic);
    e.u32(ARTIFACT_VERSION);
    e.u32(sections.len() as u32);
    for (tag, payload) in sections {
        e.buf.extend_from_slice(&tag);
        e.u64(payload.len() as u64);
        e.buf.extend_from_slice(&payload);
    }
    e.buf
}

fn decode_container<'a>(magic: &[u8; 8], bytes: &'a [u8]) -> Result<Vec<([u8; 4], &'a [u8])>> {
    let mut d = Decoder::new(bytes, "artifact header");
    if d.take(8).map_err(|_| Error::Format("file too short for artifact magic".into()))? != magic {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = d.u32()?;
    if version != ARTIFACT_VERSION {
        return Err(Error::VersionMismatch {
            expected: ARTIFACT_VERSION,
            found: version,
        });
    }
    let count = d.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let tag: [u8; 4] = d.take(4)?.try_into().unwrap();
        let n = d.u64()? as usize;
        out.push((tag, d.take(n)?));
    }
    d.finish()?;
    Ok(out)
}

fn find<'a>(sections: &[([u8; 4], &'a [u8])], tag: &[u8; 4]) -> Option<&'a [u8]> {
    sections.iter().find(|(t, _)| t == tag).map(|(_, p)| *p)
}

fn require<'a>(sections: &[([u8; 4], &'a [u8])], tag: &[u8; 4]) -> Result<&'a [u8]> {
    find(sections, tag).ok_or_else(|| {
        Error::Format(format!("missing section {}", String::from_utf8_lossy(tag)))
    })
}

fn encode_index(index: &NeighborIndex) -> Vec<u8> {
    let mut e = Encoder::default();
    e.u64(index.len() as u64);
    e.u32(index.dim() as u32);
    for (p, l) in index.points() {
        e.u32(l.0 as u32);
        e.f64s(p);
    }
    e.buf
}

fn decode_index(bytes: &[u8]) -> Result<NeighborIndex> {
    let mut d = Decoder::new(bytes, "neighbor index section");
    let n = d.u64()? as usize;
    let dim = d.u32()? as usize;
    if n.saturating_mul(4 + 8 * dim) != d.buf.len() {
        return Err(Error::Format("neighbor index section has the wrong length".into()));
    }
    let mut labels = Vec::with_capacity(n);
    let mut coords = Vec::with_capacity(n * dim);
    for _ in 0..n {
        labels.push(LabelId(d.u32()? as usize));
        coords.extend(d.f64s(dim)?);
    }
    d.finish()?;
    NeighborIndex::build(coords.chunks_exact(dim.max(1)).zip(labels))
}

/// Serializes a calibrated monitor; the neighbor index is stored as its
/// points in insertion order and rebuilt identically on load.
pub fn encode_monitor(monitor: &CalibratedMonitor) -> Vec<u8> {
    let f = monitor.function();
    let mut conf = Encoder::default();
    conf.u8(f.kind().code());
    conf.u8(match monitor.inclusion() {
        InclusionRule::Strict => 0,
        InclusionRule::Weak => 1,
    });
    conf.u32(f.k().unwrap_or(0) as u32);
    conf.names(monitor.universe());

    let mut scores = Encoder::default();
    scores.u64(monitor.calibration_size() as u64);
    monitor.calib_scores().iter().for_each(|s| scores.f64(s.value()));

    let mut sections: Vec<Section> = vec![(*b"CONF", conf.buf), (*b"SCOR", scores.buf)];
    if let Some(index) = f.index() {
        sections.push((*b"INDX", encode_index(index)));
    }
    if let Some(c) = f.centroids() {
        let mut e = Encoder::default();
        e.u32(c.len() as u32);
        e.u32(c.dim() as u32);
        c.iter().for_each(|m| e.f64s(m.as_slice()));
        sections.push((*b"CENT", e.buf));
    }
    if let Some(t) = f.temperature() {
        let mut e = Encoder::default();
        e.f64(t);
        sections.push((*b"TEMP", e.buf));
    }
    encode_container(MONITOR_MAGIC, sections)
}

pub fn decode_monitor(bytes: &[u8]) -> Result<CalibratedMonitor> {
    let sections = decode_container(MONITOR_MAGIC, bytes)?;

    let mut d = Decoder::new(require(&sections, b"CONF")?, "config section");
    let kind = NonconformityKind::from_code(d.u8()?)
        .ok_or_else(|| Error::Format("unknown nonconformity kind".into()))?;
    let inclusion = match d.u8()? {
        0 => InclusionRule::Strict,
        1 => InclusionRule::Weak,
        other => return Err(Error::Format(format!("unknown inclusion rule code {other}"))),
    };
    let k = d.u32()? as usize;
    let universe = d.names()?;
    d.finish()?;

    let mut d = Decoder::new(require(&sections, b"SCOR")?, "score section");
    let m = d.len(8)?;
    let scores: Vec<Score> = d.f64s(m)?.into_iter().map(Score::new).collect();
    d.finish()?;

    let temperature = || -> Result<f64> {
        let mut d = Decoder::new(require(&sections, b"TEMP")?, "temperature section");
        let t = d.f64()?;
        d.finish()?;
        Ok(t)
    };
    use crate::nonconformity::SoftmaxMeasure as M;
    let function = match kind {
        NonconformityKind::Knn => NonconformityFunction::knn(decode_index(require(&sections, b"INDX")?)?, k)?,
        NonconformityKind::OneNn => NonconformityFunction::one_nn(decode_index(require(&sections, b"INDX")?)?),
        NonconformityKind::NearestCentroid => {
            let mut d = Decoder::new(require(&sections, b"CENT")?, "centroid section");
            let c = d.u32()? as usize;
            let dim = d.u32()? as usize;
            if c.saturating_mul(dim).saturating_mul(8) != d.buf.len() {
                return Err(Error::Format("centroid section has the wrong length".into()));
            }
            let means = (0..c)
                .map(|_| d.f64s(dim).map(EmbeddingVector))
                .collect::<Result<Vec<_>>>()?;
            d.finish()?;
            NonconformityFunction::nearest_centroid(Centroids::new(means)?)
        }
        NonconformityKind::Hinge => NonconformityFunction::softmax(M::Hinge),
        NonconformityKind::Margin => NonconformityFunction::softmax(M::Margin),
        NonconformityKind::Brier => NonconformityFunction::softmax(M::Brier),
        NonconformityKind::TsHinge => NonconformityFunction::temperature_scaled(M::Hinge, temperature()?)?,
        NonconformityKind::TsMargin => NonconformityFunction::temperature_scaled(M::Margin, temperature()?)?,
        NonconformityKind::TsBrier => NonconformityFunction::temperature_scaled(M::Brier, temperature()?)?,
    };
    CalibratedMonitor::from_parts(function, scores, universe, inclusion)
}

pub fn save_monitor(monitor: &CalibratedMonitor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_monitor(monitor))?;
    Ok(())
}

pub fn load_monitor(path: impl AsRef<Path>) -> Result<CalibratedMonitor> {
    decode_monitor(&fs::read(path)?)
}

pub fn encode_model(model: &MlpModel) -> Vec<u8> {
    let mut dims = Encoder::default();
    dims.u32(model.inputs as u32);
    dims.u32(model.hidden as u32);
    dims.u32(model.classes as u32);
    dims.names(&model.universe);
    let mut norm = Encoder::default();
    norm.f64s(&model.input_mean);
    norm.f64s(&model.input_scale);
    let mut weights = Encoder::default();
    weights.f64s(&model.parameters());
    encode_container(
        MODEL_MAGIC,
        vec![(*b"DIMS", dims.buf), (*b"NORM", norm.buf), (*b"WGHT", weights.buf)],
    )
}

pub fn decode_model(bytes: &[u8]) -> Result<MlpModel> {
    let sections = decode_container(MODEL_MAGIC, bytes)?;
    let mut d = Decoder::new(require(&sections, b"DIMS")?, "model dimensions");
    let inputs = d.u32()? as usize;
    let hidden = d.u32()? as usize;
    let classes = d.u32()? as usize;
    let universe = d.names()?;
    d.finish()?;
    if universe.len() != classes {
        return Err(Error::Format("model label table does not match class count".into()));
    }
    let mut model = MlpModel::init(inputs, hidden, universe, 0)?;

    let mut d = Decoder::new(require(&sections, b"NORM")?, "model normalization");
    model.input_mean = d.f64s(inputs)?;
    model.input_scale = d.f64s(inputs)?;
    d.finish()?;

    let n = model.parameters().len();
    let mut d = Decoder::new(require(&sections, b"WGHT")?, "model weights");
    model.set_parameters(&d.f64s(n)?)?;
    d.finish()?;
    Ok(model)
}

pub fn save_model(model: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpModel> {
    decode_model(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Report and prediction tables
// ---------------------------------------------------------------------------

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

pub fn write_epsilon_rows<W: Write>(rows: &[EpsilonRow], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["epsilon", "error_rate", "multiple_rate", "empty_rate", "single_rate"])?;
    for r in rows {
        w.write_record(
            [r.epsilon, r.error_rate, r.multiple_rate, r.empty_rate, r.single_rate].map(format_number),
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curve<W: Write>(points: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["epsilon", "error_rate", "multiple_rate"])?;
    for p in points {
        w.write_record([p.epsilon, p.error_rate, p.multiple_rate].map(format_number))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cumulative_errors<W: Write>(curves: &[CumulativeErrorCurve], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["epsilon", "index", "cumulative_errors"])?;
    for c in curves {
        let eps = format_number(c.epsilon);
        for (i, e) in c.errors.iter().enumerate() {
            w.write_record([eps.clone(), i.to_string(), e.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Column names of a prediction table for `classes` labels.
pub fn prediction_header(classes: usize) -> Vec<String> {
    let mut cols = vec!["id".to_string(), "verdict".to_string(), "set".to_string()];
    cols.extend((0..classes).map(|j| format!("p{j}")));
    cols
}

/// One prediction row: id, verdict, `;`-joined set members, p-values.
pub fn prediction_record(id: &str, result: &PredictionResult) -> Vec<String> {
    let mut rec = vec![
        id.to_string(),
        result.verdict.to_string(),
        result
            .set
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(";"),
    ];
    rec.extend(result.p_values.iter().map(|p| format!("{p:?}")));
    rec
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonconformity::SoftmaxMeasure;

    #[test]
    fn number_format_is_short_and_nine_digit() {
        assert_eq!(format_number(0.0), "0");
        assert_eq!(format_number(1.0), "1.0");
        assert_eq!(format_number(0.1 + 0.2), "0.3");
        assert_eq!(format_number(std::f64::consts::PI), "3.14159265");
        assert_eq!(format_number(-2.5e-9), "-2.5e-9");
    }

    fn write_text(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_small_embedding_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_text(&dir, "e.csv", "id,label,e0,e1\na,0,1.5,2\nb,1,-3,0.25\nc,1,0,0\n");
        let ds = load_feature_file(&p, Role::Test).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.embedding_dim, Some(2));
        assert_eq!(ds.examples[1].features.embedding.as_ref().unwrap().0, vec![-3.0, 0.25]);
        assert_eq!(ds.classes(), 2);
    }

    #[test]
    fn nan_row_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_text(&dir, "e.csv", "id,label,e0,e1\na,0,1.5,2\nb,1,NaN,0.25\n");
        match load_feature_file(&p, Role::Test) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for (name, text) in [
            ("hdr.csv", "ident,label,e0\na,0,1\n"),
            ("order.csv", "id,label,e1,e0\na,0,1,2\n"),
            ("ragged.csv", "id,label,e0,e1\na,0,1\n"),
            ("unknown.csv", "id,label,z0,z1\na,2,0.1,0.2\n"),
            ("named.csv", "#labels=[\"a\",\"b\"]\nid,label,e0\nx,c,1\n"),
            ("version.csv", "#format=icpmon-features/9\nid,label,e0\nx,0,1\n"),
        ] {
            let p = write_text(&dir, name, text);
            assert!(load_feature_file(&p, Role::Test).is_err(), "{name} should fail");
        }
    }

    #[test]
    fn logits_override_probs_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_text(&dir, "zp.csv", "id,label,z0,z1,p0,p1\na,0,2,0,0.5,0.5\n");
        let ds = load_feature_file(&p, Role::Test).unwrap();
        let probs = &ds.examples[0].features.probs.as_ref().unwrap().0;
        assert_eq!(probs, &softmax(&[2.0, 0.0]).0);
    }

    #[test]
    fn label_names_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_text(&dir, "n.csv", "#labels=[\"left\",\"right\",\"up\"]\nid,label,e0\nx,right,1\ny,0,2\n");
        let ds = load_feature_file(&p, Role::Test).unwrap();
        assert_eq!(ds.classes(), 3);
        assert_eq!(ds.examples[0].label, LabelId(1));
        assert_eq!(ds.universe.name(LabelId(2)), Some("up"));
    }

    fn sample_dataset() -> Dataset {
        let examples = (0..12)
            .map(|i| {
                let z = vec![i as f64 * 0.125, -1.5, 0.3];
                LabeledExample {
                    id: format!("s{i}"),
                    features: Features {
                        embedding: Some(EmbeddingVector(vec![i as f64 / 7.0, 1e-7 * i as f64])),
                        probs: Some(softmax(&z)),
                        logits: Some(LogitVector(z)),
                    },
                    label: LabelId(i % 3),
                }
            })
            .collect();
        Dataset::validated(
            examples,
            LabelUniverse::new(vec!["a".into(), "b, c".into(), "d".into()]).unwrap(),
            Some(2),
            Role::Calibration,
        )
        .unwrap()
    }

    #[test]
    fn write_then_load_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.csv");
        let p2 = dir.path().join("two.csv");
        write_feature_file(&sample_dataset(), &p1).unwrap();
        let first = load_feature_file(&p1, Role::Calibration).unwrap();
        write_feature_file(&first, &p2).unwrap();
        let second = load_feature_file(&p2, Role::Calibration).unwrap();
        assert_eq!(first, second);
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(first.universe.name(LabelId(1)), Some("b, c"));
    }

    #[test]
    fn uci_rows_map_names_by_first_appearance() {
        let text = "0.1,0.2,Slight-Right-Turn\n0.3,0.4,Move-Forward\n0.5,0.6,Slight-Right-Turn\n\
                    0.7,0.8,Sharp-Right-Turn\n";
        let ds = parse_uci_tabular(text.as_bytes(), "mem", Role::ProperTraining).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.universe.names(), &["Slight-Right-Turn", "Move-Forward", "Sharp-Right-Turn"]);
        assert_eq!(ds.examples[2].label, LabelId(0));
        assert_eq!(ds.examples[3].values, vec![0.7, 0.8]);
        assert!(parse_uci_tabular("0.1,x,A\n".as_bytes(), "mem", Role::Test).is_err());
        assert!(parse_uci_tabular("0.1,0.2,A\n0.3,B\n".as_bytes(), "mem", Role::Test).is_err());
    }

    #[test]
    fn tabular_round_trip() {
        let text = "1,2,A\n3,4,B\n5,6,A\n";
        let ds = parse_uci_tabular(text.as_bytes(), "mem", Role::Test).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_tabular_file(&ds, &p).unwrap();
        let back = load_tabular(&p, Role::Test).unwrap();
        assert_eq!(back, ds);
    }

    fn labels(n: usize, classes: usize) -> Vec<LabelId> {
        (0..n).map(|i| LabelId(i % classes)).collect()
    }

    #[test]
    fn split_sizes_for_1000() {
        let idx = split_indices(&labels(1000, 4), &SplitConfig::default()).unwrap();
        let sizes = [idx.train.len(), idx.calibration.len(), idx.validation.len(), idx.test.len()];
        // 4 strata of 250: test 25, train 180, calib round(22.5) = 23, validation 22.
        assert_eq!(sizes, [720, 92, 88, 100]);
        for (got, want) in sizes.iter().zip([720usize, 90, 90, 100]) {
            assert!(got.abs_diff(want) <= 4);
        }
        let single = split_indices(&labels(1000, 1), &SplitConfig::default()).unwrap();
        assert_eq!(
            [single.train.len(), single.calibration.len(), single.validation.len(), single.test.len()],
            [720, 90, 90, 100]
        );
    }

    #[test]
    fn split_is_deterministic_disjoint_and_complete() {
        let l = labels(503, 5);
        let cfg = SplitConfig {
            seed: 99,
            ..SplitConfig::default()
        };
        let a = split_indices(&l, &cfg).unwrap();
        assert_eq!(a, split_indices(&l, &cfg).unwrap());
        let mut all: Vec<usize> = [&a.train, &a.calibration, &a.validation, &a.test]
            .into_iter()
            .flatten()
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..503).collect::<Vec<_>>());
        let other = split_indices(&l, &SplitConfig { seed: 100, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn split_preconditions() {
        let cfg = SplitConfig {
            calib_share_of_holdout: 1.0,
            ..SplitConfig::default()
        };
        assert!(split_indices(&labels(100, 2), &cfg).is_err());
        let mut l = labels(100, 2);
        l.extend([LabelId(2), LabelId(2), LabelId(2)]);
        assert!(split_indices(&l, &SplitConfig::default()).is_err());
    }

    #[test]
    fn shared_calibration_validation() {
        let cfg = SplitConfig {
            share_calibration_validation: true,
            ..SplitConfig::default()
        };
        let idx = split_indices(&labels(1000, 1), &cfg).unwrap();
        assert_eq!(idx.calibration.len(), 180);
        let mut c = idx.calibration.clone();
        let mut v = idx.validation.clone();
        c.sort_unstable();
        v.sort_unstable();
        assert_eq!(c, v);
    }

    fn knn_monitor() -> CalibratedMonitor {
        let pts: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 7) as f64, (i / 7) as f64 * 0.5]).collect();
        let index = NeighborIndex::build(pts.iter().enumerate().map(|(i, p)| (p.as_slice(), LabelId(i % 3)))).unwrap();
        CalibratedMonitor::from_parts(
            NonconformityFunction::knn(index, 5).unwrap(),
            (0..25).map(|i| Score::new((i % 6) as f64)).collect(),
            LabelUniverse::anonymous(3).unwrap(),
            InclusionRule::Strict,
        )
        .unwrap()
    }

    #[test]
    fn monitor_round_trip_preserves_p_values() {
        use rand::{Rng, SeedableRng};
        let m = knn_monitor();
        let bytes = encode_monitor(&m);
        let back = decode_monitor(&bytes).unwrap();
        assert_eq!(back.function().index().unwrap().len(), 40);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let f = Features::from_embedding(vec![rng.random_range(-1.0..8.0), rng.random_range(-1.0..4.0)]);
            let a = m.p_values(&f).unwrap();
            let b = back.p_values(&f).unwrap();
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        assert_eq!(encode_monitor(&back), bytes);
    }

    #[test]
    fn monitor_round_trip_for_other_kinds() {
        let universe = LabelUniverse::anonymous(2).unwrap();
        let scores = vec![Score::new(0.1), Score::INFINITY];
        let fns = vec![
            NonconformityFunction::nearest_centroid(
                Centroids::new(vec![EmbeddingVector(vec![0.0, 1.0]), EmbeddingVector(vec![2.0, 3.0])]).unwrap(),
            ),
            NonconformityFunction::softmax(SoftmaxMeasure::Brier),
            NonconformityFunction::temperature_scaled(SoftmaxMeasure::Margin, 1.7).unwrap(),
        ];
        for f in fns {
            let m = CalibratedMonitor::from_parts(f, scores.clone(), universe.clone(), InclusionRule::Weak).unwrap();
            let back = decode_monitor(&encode_monitor(&m)).unwrap();
            assert_eq!(back.function().kind(), m.function().kind());
            assert_eq!(back.function().temperature(), m.function().temperature());
            assert_eq!(back.function().centroids(), m.function().centroids());
            assert_eq!(back.inclusion(), InclusionRule::Weak);
            assert!(back.calib_scores()[1].is_infinite());
        }
    }

    #[test]
    fn corrupt_artifacts_fail() {
        let bytes = encode_monitor(&knn_monitor());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_monitor(&bad), Err(Error::Format(_))));
        let mut ver = bytes.clone();
        ver[8] = 7;
        assert!(matches!(decode_monitor(&ver), Err(Error::VersionMismatch { found: 7, .. })));
        assert!(matches!(decode_monitor(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(decode_monitor(&bytes[..5]).is_err());
        assert!(decode_model(&bytes).is_err());
    }

    #[test]
    fn model_round_trip() {
        let mut m = MlpModel::init(3, 4, LabelUniverse::anonymous(2).unwrap(), 7).unwrap();
        m.input_mean = vec![1.0, 2.0, 3.0];
        m.input_scale = vec![0.5, 1.0, 2.0];
        let back = decode_model(&encode_model(&m)).unwrap();
        assert_eq!(back, m);
    }
}
