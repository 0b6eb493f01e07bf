//! Datasets: synthetic generation, CSV ingestion and splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::objective::{Record, TaskKind, VerticalPartition};

/// An in-memory dataset whose every record satisfies the task's domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    task: TaskKind,
    d: usize,
    feature_names: Vec<String>,
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(task: TaskKind, feature_names: Vec<String>, records: Vec<Record>) -> Result<Self> {
        let d = feature_names.len();
        for (i, r) in records.iter().enumerate() {
            if r.dim() != d {
                return input(format!("record {i} has {} features, expected {d}", r.dim()));
            }
            r.validate(task)
                .map_err(|e| Error::Input(format!("record {i}: {e}")))?;
        }
        Ok(Dataset {
            task,
            d,
            feature_names,
            records,
        })
    }

    pub fn with_default_names(task: TaskKind, d: usize, records: Vec<Record>) -> Result<Self> {
        Self::new(task, (1..=d).map(|a| format!("x{a}")).collect(), records)
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn column(&self, a: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.features[a]).collect()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.label).collect()
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            task: self.task,
            d: self.d,
            feature_names: self.feature_names.clone(),
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Writes a header row (features then `label`) and one line per record.
    /// Values use the shortest representation that parses back exactly.
    pub fn write_csv<W: Write>(&self, w: W, label: &str) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = self.feature_names.clone();
        header.push(label.to_string());
        out.write_record(&header)?;
        for r in &self.records {
            let mut row: Vec<String> = r.features.iter().map(|v| v.to_string()).collect();
            row.push(r.label.to_string());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n: usize,
    pub d: usize,
    /// Fraction of nonzero feature entries and of nonzero true weights.
    pub sparsity: f64,
    /// Half-width of the uniform label noise (linear task).
    pub label_noise: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(n: usize, d: usize, sparsity: f64, seed: u64) -> Self {
        DatasetSpec {
            n,
            d,
            sparsity,
            label_noise: 0.1,
            seed,
        }
    }

    pub fn nonzeros(&self) -> usize {
        (self.sparsity * self.d as f64).ceil() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return input("synthetic dataset needs n >= 1 and d >= 1");
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return input(format!("sparsity {} outside (0, 1]", self.sparsity));
        }
        if self.sparsity * (self.d as f64) < 1.0 {
            return input(format!(
                "sparsity {} leaves no nonzero weights for d = {}",
                self.sparsity, self.d
            ));
        }
        if !(self.label_noise >= 0.0 && self.label_noise.is_finite()) {
            return input("label noise must be non-negative");
        }
        Ok(())
    }
}

/// Target logit spread of the logistic generator.
const LOGIT_SPREAD: f64 = 3.0;

/// Draws a sparse dataset and the true weight vector that generated it.
pub fn gen_synthetic(spec: &DatasetSpec, task: TaskKind) -> Result<(Dataset, Vec<f64>)> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let (n, d, k) = (spec.n, spec.d, spec.nonzeros());

    let mut w = vec![0.0; d];
    for a in index::sample(&mut rng, d, k) {
        // Nonzero by construction: resample the measure-zero exact zero.
        w[a] = loop {
            let v: f64 = rng.gen_range(-1.0..=1.0);
            if v != 0.0 {
                break v;
            }
        };
    }
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    let l2sq: f64 = w.iter().map(|v| v * v).sum();
    // Standard deviation of x.w for the generator's feature law.
    let spread = (spec.sparsity * l2sq / 3.0).sqrt().max(f64::MIN_POSITIVE);

    let records = (0..n)
        .map(|_| {
            let mut x = vec![0.0; d];
            for a in index::sample(&mut rng, d, k) {
                x[a] = rng.gen_range(-1.0..=1.0);
            }
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            let y = match task {
                TaskKind::Linear => {
                    let noise = if spec.label_noise > 0.0 {
                        rng.gen_range(-spec.label_noise..=spec.label_noise)
                    } else {
                        0.0
                    };
                    (z / l1 + noise).clamp(-1.0, 1.0)
                }
                TaskKind::Logistic => {
                    let p = crate::solver::sigmoid(LOGIT_SPREAD * z / spread);
                    if rng.gen_bool(p) {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            Record::new_unchecked(x, y)
        })
        .collect();
    let ds = Dataset::with_default_names(task, d, records)?;
    let truth = match task {
        TaskKind::Linear => w.iter().map(|v| v / l1).collect(),
        TaskKind::Logistic => w.iter().map(|v| LOGIT_SPREAD * v / spread).collect(),
    };
    Ok((ds, truth))
}

/// Per-column description written to the metadata sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnEncoding {
    Numeric { min: f64, max: f64, constant: bool },
    OneHot { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub n: usize,
    pub d: usize,
    pub task: TaskKind,
    pub label_column: String,
    pub normalized: bool,
    pub dropped_rows: usize,
    pub feature_names: Vec<String>,
    pub columns: BTreeMap<String, ColumnEncoding>,
    /// Original label values mapped to 0 and 1 (logistic task).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label_classes: Option<[String; 2]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub true_weights: Option<Vec<f64>>,
}

impl DatasetMetadata {
    pub fn for_dataset(ds: &Dataset, label_column: &str) -> Self {
        let columns = ds
            .feature_names()
            .iter()
            .enumerate()
            .map(|(a, name)| {
                let col = ds.column(a);
                let min = col.iter().copied().fold(f64::INFINITY, f64::min);
                let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (
                    name.clone(),
                    ColumnEncoding::Numeric {
                        min,
                        max,
                        constant: min == max,
                    },
                )
            })
            .collect();
        DatasetMetadata {
            n: ds.len(),
            d: ds.dim(),
            task: ds.task(),
            label_column: label_column.to_string(),
            normalized: false,
            dropped_rows: 0,
            feature_names: ds.feature_names().to_vec(),
            columns,
            label_classes: None,
            true_weights: None,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub label_column: String,
    pub task: TaskKind,
    /// Min-max scale features (and linear labels) to `[-1, 1]`. When off,
    /// values must already lie in the domain.
    pub normalize: bool,
}

impl IngestOptions {
    pub fn new(label_column: impl Into<String>, task: TaskKind) -> Self {
        IngestOptions {
            label_column: label_column.into(),
            task,
            normalize: true,
        }
    }
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t == "?" || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

fn min_max(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

pub fn ingest_csv(path: &Path, opts: &IngestOptions) -> Result<(Dataset, DatasetMetadata)> {
    let f = std::fs::File::open(path)?;
    ingest_reader(f, opts)
}

/// Parses a headed CSV. Numeric columns (first value parses as a number) are
/// min-max scaled; other columns are one-hot encoded over their sorted
/// distinct values. Rows with missing cells are dropped.
pub fn ingest_reader<R: Read>(reader: R, opts: &IngestOptions) -> Result<(Dataset, DatasetMetadata)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let label_idx = headers
        .iter()
        .position(|h| *h == opts.label_column)
        .ok_or_else(|| Error::Ingest {
            row: 1,
            column: opts.label_column.clone(),
            message: "label column not found in header".into(),
        })?;

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut dropped = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::Ingest {
                row: rows.len() + dropped + 2,
                column: String::new(),
                message: format!("{} cells, header has {}", rec.len(), headers.len()),
            });
        }
        if rec.iter().any(is_missing) {
            dropped += 1;
            continue;
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    if rows.is_empty() {
        return input("CSV contains no complete rows");
    }

    // Decide each column's kind from its first value, then parse strictly.
    let numeric: Vec<bool> = (0..headers.len())
        .map(|c| rows[0][c].parse::<f64>().is_ok())
        .collect();
    let mut parsed: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (c, is_num) in numeric.iter().enumerate() {
        if !is_num {
            continue;
        }
        parsed[c] = rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row[c]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Ingest {
                        row: i + 2,
                        column: headers[c].clone(),
                        message: format!("'{}' is not numeric", row[c]),
                    })
            })
            .collect::<Result<_>>()?;
    }

    let mut feature_names = Vec::new();
    let mut columns = BTreeMap::new();
    // Feature matrix built column by column.
    let mut feature_cols: Vec<Vec<f64>> = Vec::new();
    for (c, name) in headers.iter().enumerate() {
        if c == label_idx {
            continue;
        }
        if numeric[c] {
            let col = &parsed[c];
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let values = if opts.normalize {
                if lo == hi {
                    warn!("column '{name}' is constant; normalized to 0");
                }
                col.iter().map(|&v| min_max(v, lo, hi)).collect()
            } else {
                if let Some(i) = col.iter().position(|v| !(v.abs() <= 1.0)) {
                    return Err(Error::Ingest {
                        row: i + 2,
                        column: name.clone(),
                        message: format!("{} outside [-1, 1] with normalization off", col[i]),
                    });
                }
                col.clone()
            };
            feature_names.push(name.clone());
            feature_cols.push(values);
            columns.insert(
                name.clone(),
                ColumnEncoding::Numeric {
                    min: lo,
                    max: hi,
                    constant: lo == hi,
                },
            );
        } else {
            let cats: BTreeSet<&str> = rows.iter().map(|r| r[c].as_str()).collect();
            let cats: Vec<String> = cats.into_iter().map(str::to_string).collect();
            for cat in &cats {
                let raw = rows.iter().map(|r| if r[c] == *cat { 1.0 } else { 0.0 });
                let values: Vec<f64> = if opts.normalize && cats.len() > 1 {
                    raw.map(|v| min_max(v, 0.0, 1.0)).collect()
                } else {
                    raw.collect()
                };
                feature_names.push(format!("{name}={cat}"));
                feature_cols.push(values);
            }
            columns.insert(name.clone(), ColumnEncoding::OneHot { categories: cats });
        }
    }

    let label_name = &headers[label_idx];
    let (labels, label_classes) = match opts.task {
        TaskKind::Linear => {
            if !numeric[label_idx] {
                return Err(Error::Ingest {
                    row: 2,
                    column: label_name.clone(),
                    message: "linear labels must be numeric".into(),
                });
            }
            let col = &parsed[label_idx];
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let labels = if opts.normalize {
                col.iter().map(|&v| min_max(v, lo, hi)).collect()
            } else {
                if let Some(i) = col.iter().position(|v| !(v.abs() <= 1.0)) {
                    return Err(Error::Ingest {
                        row: i + 2,
                        column: label_name.clone(),
                        message: format!("label {} outside [-1, 1]", col[i]),
                    });
                }
                col.clone()
            };
            (labels, None)
        }
        TaskKind::Logistic => {
            let raw: Vec<&str> = rows.iter().map(|r| r[label_idx].as_str()).collect();
            let classes = logistic_classes(&raw, numeric[label_idx]).map_err(|message| Error::Ingest {
                row: 2,
                column: label_name.clone(),
                message,
            })?;
            let labels = raw
                .iter()
                .map(|v| if same_class(v, &classes[1], numeric[label_idx]) { 1.0 } else { 0.0 })
                .collect();
            (labels, Some(classes))
        }
    };

    let records: Vec<Record> = (0..rows.len())
        .map(|i| Record::new_unchecked(feature_cols.iter().map(|c| c[i]).collect(), labels[i]))
        .collect();
    let ds = Dataset::new(opts.task, feature_names.clone(), records)?;
    let meta = DatasetMetadata {
        n: ds.len(),
        d: ds.dim(),
        task: opts.task,
        label_column: label_name.clone(),
        normalized: opts.normalize,
        dropped_rows: dropped,
        feature_names,
        columns,
        label_classes,
        true_weights: None,
    };
    Ok((ds, meta))
}

fn same_class(v: &str, class: &str, numeric: bool) -> bool {
    if numeric {
        v.parse::<f64>().ok() == class.parse::<f64>().ok()
    } else {
        v == class
    }
}

/// Two sorted classes; the second maps to label 1. A single numeric class of
/// 0 or 1 keeps its value.
fn logistic_classes(raw: &[&str], numeric: bool) -> std::result::Result<[String; 2], String> {
    if numeric {
        let mut vals: Vec<f64> = raw.iter().filter_map(|v| v.parse().ok()).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        return match vals.as_slice() {
            [a, b] => Ok([a.to_string(), b.to_string()]),
            [v] if *v == 0.0 => Ok(["0".into(), "1".into()]),
            [v] if *v == 1.0 => Ok(["0".into(), "1".into()]),
            other => Err(format!("expected two label classes, found {}", other.len())),
        };
    }
    let set: BTreeSet<&str> = raw.iter().copied().collect();
    match set.into_iter().collect::<Vec<_>>().as_slice() {
        [a, b] => Ok([a.to_string(), b.to_string()]),
        other => Err(format!("expected two label classes, found {}", other.len())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitScheme {
    /// Contiguous blocks; party 1 takes the first block and the label.
    Even,
    /// Caller-provided 0-based feature sets, party 1 first.
    Explicit(Vec<Vec<usize>>),
}

pub fn vsplit(d: usize, k: usize, scheme: &SplitScheme) -> Result<VerticalPartition> {
    match scheme {
        SplitScheme::Even => {
            if k == 0 || k > d {
                return input(format!("cannot split {d} features among {k} parties"));
            }
            let (base, extra) = (d / k, d % k);
            let mut start = 0;
            let sets = (0..k)
                .map(|p| {
                    let size = base + usize::from(p < extra);
                    let set: Vec<usize> = (start..start + size).collect();
                    start += size;
                    set
                })
                .collect();
            VerticalPartition::new(d, sets)
        }
        SplitScheme::Explicit(sets) => {
            if sets.len() != k {
                return input(format!("{} feature sets given for {k} parties", sets.len()));
            }
            VerticalPartition::new(d, sets.clone())
        }
    }
}

/// Seeded shuffle followed by a `ratio` train split.
pub fn split_train_test(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if ds.len() < 5 {
        return input(format!("need at least 5 records to split, have {}", ds.len()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return input(format!("train ratio {ratio} outside (0, 1)"));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let cut = ((ratio * ds.len() as f64).round() as usize).clamp(1, ds.len() - 1);
    Ok((ds.subset(&idx[..cut]), ds.subset(&idx[cut..])))
}
