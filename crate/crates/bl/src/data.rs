//! Tabular dataset ingestion, preprocessing, splitting, metrics, and the
//! synthetic datasets used by the desk-scale experiments.
//!
//! The preprocessing protocol: ordinal categoricals map to integer levels in
//! their declared order, nominal categoricals one-hot encode, continuous
//! columns standardize to zero mean and unit variance. All statistics are
//! fitted on the train split only and applied to every split. Rows shuffle
//! once by seed and partition by the configured ratios (default 7:1:2).

use crate::error::{BlError, Result};
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Ordinal,
    Nominal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Label,
    Continuous,
}

/// Declared shape of the input table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    /// Feature columns in model order.
    pub columns: Vec<ColumnDecl>,
    pub target: String,
    pub target_kind: TargetKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnDecl {
    pub name: String,
    pub kind: ColumnKind,
    /// Ordinal level order, low to high. Required for ordinal columns.
    #[serde(default)]
    pub levels: Vec<String>,
}

/// A parsed but not yet encoded table.
#[derive(Clone, Debug)]
pub struct RawTable {
    pub schema: Schema,
    pub columns: Vec<RawColumn>,
    pub target: RawTarget,
    pub n_rows: usize,
}

#[derive(Clone, Debug)]
pub enum RawColumn {
    Continuous(Vec<f64>),
    /// Category strings plus first-appearance order.
    Categorical {
        values: Vec<String>,
        seen_order: Vec<String>,
    },
}

#[derive(Clone, Debug)]
pub enum RawTarget {
    Labels(Vec<String>),
    Continuous(Vec<f64>),
}

/// Fitted per-column encoder state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// Nominal: one-hot category order. Ordinal: declared level order.
    pub categories: Vec<String>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Labels {
        values: Vec<usize>,
        classes: Vec<String>,
    },
    Continuous {
        values: Vec<Vec<f64>>,
        mean: Vec<f64>,
        std: Vec<f64>,
    },
}

impl Targets {
    pub fn n_classes(&self) -> Option<usize> {
        match self {
            Targets::Labels { classes, .. } => Some(classes.len()),
            Targets::Continuous { .. } => None,
        }
    }
}

/// Encoded dataset with its split and fitted encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub feature_names: Vec<String>,
    pub targets: Targets,
    pub column_specs: Vec<ColumnSpec>,
    pub split: Split,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.features.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn rows(&self, idx: &[usize]) -> Vec<Vec<f64>> {
        idx.iter().map(|&i| self.features[i].clone()).collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Option<Vec<usize>> {
        match &self.targets {
            Targets::Labels { values, .. } => Some(idx.iter().map(|&i| values[i]).collect()),
            _ => None,
        }
    }

    pub fn continuous_targets(&self, idx: &[usize]) -> Option<Vec<Vec<f64>>> {
        match &self.targets {
            Targets::Continuous { values, .. } => {
                Some(idx.iter().map(|&i| values[i].clone()).collect())
            }
            _ => None,
        }
    }
}

/// Minimal RFC-4180 reader: quoted fields, doubled quotes, CRLF endings.
fn parse_csv_line(line: &str, row: usize) -> Result<Vec<String>> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut chars = line.chars().peekable();
    let mut in_quotes = false;
    while let Some(c) = chars.next() {
        if in_quotes {
            match c {
                '"' => {
                    if chars.peek() == Some(&'"') {
                        chars.next();
                        cur.push('"');
                    } else {
                        in_quotes = false;
                    }
                }
                _ => cur.push(c),
            }
        } else {
            match c {
                '"' if cur.is_empty() => in_quotes = true,
                ',' => {
                    fields.push(std::mem::take(&mut cur));
                }
                '\r' => {}
                _ => cur.push(c),
            }
        }
    }
    if in_quotes {
        return Err(BlError::Parse {
            row,
            col: "<line>".into(),
            message: "unterminated quoted field".into(),
        });
    }
    fields.push(cur);
    Ok(fields)
}

/// Load a CSV file under a schema. Header row required; missing cells and
/// unparseable continuous values are rejected with their position.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<RawTable> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| BlError::Config("empty CSV file".into()))??;
    let header = parse_csv_line(&header_line, 0)?;
    let col_index: BTreeMap<&str, usize> = header
        .iter()
        .enumerate()
        .map(|(i, name)| (name.as_str(), i))
        .collect();

    let mut feature_idx = Vec::with_capacity(schema.columns.len());
    for decl in &schema.columns {
        let idx = col_index.get(decl.name.as_str()).ok_or_else(|| {
            BlError::Config(format!("column '{}' not found in CSV header", decl.name))
        })?;
        if decl.kind == ColumnKind::Ordinal && decl.levels.is_empty() {
            return Err(BlError::Config(format!(
                "ordinal column '{}' needs declared levels",
                decl.name
            )));
        }
        feature_idx.push(*idx);
    }
    let target_idx = *col_index
        .get(schema.target.as_str())
        .ok_or_else(|| BlError::Config(format!("missing target column '{}'", schema.target)))?;

    let mut columns: Vec<RawColumn> = schema
        .columns
        .iter()
        .map(|d| match d.kind {
            ColumnKind::Continuous => RawColumn::Continuous(Vec::new()),
            _ => RawColumn::Categorical {
                values: Vec::new(),
                seen_order: Vec::new(),
            },
        })
        .collect();
    let mut target = match schema.target_kind {
        TargetKind::Label => RawTarget::Labels(Vec::new()),
        TargetKind::Continuous => RawTarget::Continuous(Vec::new()),
    };

    let mut n_rows = 0usize;
    for (row_no, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = row_no + 1;
        let fields = parse_csv_line(&line, row)?;
        if fields.len() != header.len() {
            return Err(BlError::Parse {
                row,
                col: "<row>".into(),
                message: format!("expected {} fields, got {}", header.len(), fields.len()),
            });
        }
        for (decl, (&fi, col)) in schema
            .columns
            .iter()
            .zip(feature_idx.iter().zip(columns.iter_mut()))
        {
            let cell = fields[fi].trim();
            if cell.is_empty() {
                return Err(BlError::Parse {
                    row,
                    col: decl.name.clone(),
                    message: "missing value".into(),
                });
            }
            match col {
                RawColumn::Continuous(vals) => {
                    let v: f64 = cell.parse().map_err(|_| BlError::Parse {
                        row,
                        col: decl.name.clone(),
                        message: format!("'{cell}' is not a number"),
                    })?;
                    vals.push(v);
                }
                RawColumn::Categorical { values, seen_order } => {
                    if !seen_order.iter().any(|s| s == cell) {
                        seen_order.push(cell.to_string());
                    }
                    values.push(cell.to_string());
                }
            }
        }
        let cell = fields[target_idx].trim();
        if cell.is_empty() {
            return Err(BlError::Parse {
                row,
                col: schema.target.clone(),
                message: "missing target".into(),
            });
        }
        match &mut target {
            RawTarget::Labels(vals) => vals.push(cell.to_string()),
            RawTarget::Continuous(vals) => {
                let v: f64 = cell.parse().map_err(|_| BlError::Parse {
                    row,
                    col: schema.target.clone(),
                    message: format!("'{cell}' is not a number"),
                })?;
                vals.push(v);
            }
        }
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(BlError::Config("CSV contains no data rows".into()));
    }
    Ok(RawTable {
        schema: schema.clone(),
        columns,
        target,
        n_rows,
    })
}

/// Shuffle, split, fit encoders on the train split, and encode every row.
pub fn preprocess_and_split(raw: &RawTable, ratios: (f64, f64, f64), seed: u64) -> Result<Dataset> {
    let (rt, rv, rte) = ratios;
    if rt <= 0.0 || rv <= 0.0 || rte <= 0.0 || (rt + rv + rte - 1.0).abs() > 1e-9 {
        return Err(BlError::Config(
            "split ratios must be positive and sum to 1".into(),
        ));
    }
    let n = raw.n_rows;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = StreamRng::new(seed, &[0x5811]);
    rng.shuffle(&mut order);
    let n_train = ((rt * n as f64).floor() as usize).max(1);
    let n_val = ((rv * n as f64).floor() as usize).max(1);
    if n_train + n_val >= n {
        return Err(BlError::Config(
            "dataset too small for the requested split".into(),
        ));
    }
    let split = Split {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };

    let mut warnings = Vec::new();
    let mut specs = Vec::new();
    let mut feature_names = Vec::new();
    // Per original column, the encoded values for all rows.
    let mut encoded_cols: Vec<Vec<Vec<f64>>> = Vec::new();

    for (decl, col) in raw.schema.columns.iter().zip(&raw.columns) {
        match (decl.kind, col) {
            (ColumnKind::Continuous, RawColumn::Continuous(vals)) => {
                let (mean, std) = fit_standardizer(vals, &split.train);
                specs.push(ColumnSpec {
                    name: decl.name.clone(),
                    kind: ColumnKind::Continuous,
                    categories: Vec::new(),
                    mean,
                    std,
                });
                feature_names.push(decl.name.clone());
                encoded_cols.push(vals.iter().map(|v| vec![(v - mean) / std]).collect());
            }
            (ColumnKind::Ordinal, RawColumn::Categorical { values, .. }) => {
                let level_of = |v: &str| -> Result<f64> {
                    decl.levels
                        .iter()
                        .position(|l| l == v)
                        .map(|p| p as f64)
                        .ok_or_else(|| {
                            BlError::Config(format!(
                                "value '{v}' not among declared levels of ordinal column '{}'",
                                decl.name
                            ))
                        })
                };
                let ints: Vec<f64> = values
                    .iter()
                    .map(|v| level_of(v))
                    .collect::<Result<Vec<_>>>()?;
                let (mean, std) = fit_standardizer(&ints, &split.train);
                specs.push(ColumnSpec {
                    name: decl.name.clone(),
                    kind: ColumnKind::Ordinal,
                    categories: decl.levels.clone(),
                    mean,
                    std,
                });
                feature_names.push(decl.name.clone());
                encoded_cols.push(ints.iter().map(|v| vec![(v - mean) / std]).collect());
            }
            (ColumnKind::Nominal, RawColumn::Categorical { values, seen_order }) => {
                // One-hot categories: load order restricted to train-present.
                let categories: Vec<String> = seen_order
                    .iter()
                    .filter(|c| split.train.iter().any(|&i| &values[i] == *c))
                    .cloned()
                    .collect();
                for c in &categories {
                    feature_names.push(format!("{}={}", decl.name, c));
                }
                let mut saw_unseen = false;
                let col_rows: Vec<Vec<f64>> = values
                    .iter()
                    .map(|v| {
                        let mut row = vec![0.0; categories.len()];
                        match categories.iter().position(|c| c == v) {
                            Some(p) => row[p] = 1.0,
                            None => saw_unseen = true,
                        }
                        row
                    })
                    .collect();
                if saw_unseen {
                    warnings.push(format!(
                        "column '{}': categories outside the train split encode as all-zeros",
                        decl.name
                    ));
                }
                specs.push(ColumnSpec {
                    name: decl.name.clone(),
                    kind: ColumnKind::Nominal,
                    categories,
                    mean: 0.0,
                    std: 1.0,
                });
                encoded_cols.push(col_rows);
            }
            _ => unreachable!("column kind and raw storage always agree"),
        }
    }

    let features: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = Vec::with_capacity(feature_names.len());
            for col in &encoded_cols {
                row.extend_from_slice(&col[i]);
            }
            row
        })
        .collect();

    let targets = match &raw.target {
        RawTarget::Labels(vals) => {
            let mut classes: Vec<String> = Vec::new();
            for &i in &split.train {
                if !classes.contains(&vals[i]) {
                    classes.push(vals[i].clone());
                }
            }
            classes.sort();
            let values = vals
                .iter()
                .map(|v| {
                    classes.iter().position(|c| c == v).ok_or_else(|| {
                        BlError::Config(format!("label '{v}' never appears in the train split"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Targets::Labels { values, classes }
        }
        RawTarget::Continuous(vals) => {
            let (mean, std) = fit_standardizer(vals, &split.train);
            Targets::Continuous {
                values: vals.iter().map(|v| vec![(v - mean) / std]).collect(),
                mean: vec![mean],
                std: vec![std],
            }
        }
    };

    Ok(Dataset {
        features,
        feature_names,
        targets,
        column_specs: specs,
        split,
        warnings,
    })
}

fn fit_standardizer(vals: &[f64], train_idx: &[usize]) -> (f64, f64) {
    let n = train_idx.len() as f64;
    let mean = train_idx.iter().map(|&i| vals[i]).sum::<f64>() / n;
    let var = train_idx
        .iter()
        .map(|&i| (vals[i] - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt().max(STD_FLOOR))
}

// ----- metrics --------------------------------------------------------------

pub const ECE_BINS: usize = 15;
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub auc: f64,
    pub ece: f64,
    pub nll: f64,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "accuracy,f1_macro,auc,ece,nll";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.accuracy, self.f1_macro, self.auc, self.ece, self.nll
        )
    }

    pub fn report(&self) -> String {
        format!(
            "accuracy  {:.6}\nf1_macro  {:.6}\nauc       {:.6}\nece       {:.6}\nnll       {:.6}",
            self.accuracy, self.f1_macro, self.auc, self.ece, self.nll
        )
    }
}

/// Classification metrics from labels and a row-stochastic probability
/// matrix.
pub fn metrics(labels: &[usize], probs: &[Vec<f64>]) -> Result<Metrics> {
    if labels.len() != probs.len() || probs.is_empty() {
        return Err(BlError::Shape {
            context: "metrics inputs".into(),
            expected: labels.len(),
            got: probs.len(),
        });
    }
    let m = probs[0].len();
    for (i, p) in probs.iter().enumerate() {
        if p.len() != m {
            return Err(BlError::Shape {
                context: format!("probability row {i}"),
                expected: m,
                got: p.len(),
            });
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(BlError::InvalidArgument(format!(
                "probability row {i} sums to {s}, not 1"
            )));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
        return Err(BlError::InvalidArgument(format!(
            "label {bad} out of range for {m} classes"
        )));
    }

    let n = labels.len();
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let accuracy = pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / n as f64;

    // Macro F1 over all classes; a class with no support contributes 0.
    let mut f1_sum = 0.0;
    for k in 0..m {
        let tp = pred
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == k && l == k)
            .count() as f64;
        let fp = pred
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == k && l != k)
            .count() as f64;
        let fn_ = pred
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p != k && l == k)
            .count() as f64;
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        f1_sum += if prec + rec > 0.0 {
            2.0 * prec * rec / (prec + rec)
        } else {
            0.0
        };
    }
    let f1_macro = f1_sum / m as f64;

    // AUC: binary rank statistic; macro one-vs-rest for multiclass. Classes
    // without both positives and negatives cannot define an AUC and are
    // skipped from the macro average.
    let auc = if m == 2 {
        binary_auc(labels, &probs.iter().map(|p| p[1]).collect::<Vec<_>>(), 1)
    } else {
        let mut total = 0.0;
        let mut counted = 0;
        for k in 0..m {
            let n_pos = labels.iter().filter(|&&l| l == k).count();
            if n_pos == 0 || n_pos == n {
                continue;
            }
            total += binary_auc(labels, &probs.iter().map(|p| p[k]).collect::<Vec<_>>(), k);
            counted += 1;
        }
        if counted > 0 {
            total / counted as f64
        } else {
            0.5
        }
    };

    // Equal-width ECE over the top-class probability.
    let mut bin_n = vec![0usize; ECE_BINS];
    let mut bin_conf = vec![0.0; ECE_BINS];
    let mut bin_acc = vec![0.0; ECE_BINS];
    for i in 0..n {
        let conf = probs[i][pred[i]];
        let b = ((conf * ECE_BINS as f64) as usize).min(ECE_BINS - 1);
        bin_n[b] += 1;
        bin_conf[b] += conf;
        bin_acc[b] += if pred[i] == labels[i] { 1.0 } else { 0.0 };
    }
    let mut ece = 0.0;
    for b in 0..ECE_BINS {
        if bin_n[b] == 0 {
            continue;
        }
        let w = bin_n[b] as f64 / n as f64;
        ece += w * (bin_acc[b] / bin_n[b] as f64 - bin_conf[b] / bin_n[b] as f64).abs();
    }

    let nll = labels
        .iter()
        .zip(probs)
        .map(|(&l, p)| -(p[l].max(PROB_FLOOR)).ln())
        .sum::<f64>()
        / n as f64;

    Ok(Metrics {
        accuracy,
        f1_macro,
        auc,
        ece,
        nll,
    })
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Mann–Whitney AUC with midranks for ties; `positive` is the class index
/// treated as positive.
fn binary_auc(labels: &[usize], scores: &[f64], positive: usize) -> f64 {
    let n = labels.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap());
    let mut rank = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            rank[idx[k]] = avg;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l == positive).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let rank_sum: f64 = (0..n)
        .filter(|&i| labels[i] == positive)
        .map(|i| rank[i])
        .sum();
    (rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64)
}

// ----- synthetic datasets -----------------------------------------------------

/// Two isotropic Gaussian blobs, linearly separable at the default spread.
pub fn make_two_blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = StreamRng::new(seed, &[0xB10B]);
    let mut xs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let center = if label == 0 { (-2.0, -2.0) } else { (2.0, 2.0) };
        xs.push(vec![
            center.0 + 0.8 * rng.gauss(),
            center.1 + 0.8 * rng.gauss(),
        ]);
        labels.push(label);
    }
    (xs, labels)
}

/// Two interleaved arcs ("moons") with Gaussian jitter; not linearly
/// separable.
pub fn make_two_arcs(n: usize, seed: u64, noise: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = StreamRng::new(seed, &[0xA2C5]);
    let mut xs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let t = std::f64::consts::PI * rng.uniform();
        let (mut px, mut py) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        px += noise * rng.gauss();
        py += noise * rng.gauss();
        xs.push(vec![px, py]);
        labels.push(label);
    }
    (xs, labels)
}

/// Write a classification table as CSV (`x1,...,xd,label`).
pub fn write_classification_csv(path: &Path, xs: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = xs.first().map_or(0, |r| r.len());
    let header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    writeln!(f, "{},label", header.join(","))?;
    for (row, label) in xs.iter().zip(labels) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{},c{label}", cells.join(","))?;
    }
    Ok(())
}

/// Schema for the synthetic classification CSVs above.
pub fn classification_schema(d: usize) -> Schema {
    Schema {
        columns: (1..=d)
            .map(|i| ColumnDecl {
                name: format!("x{i}"),
                kind: ColumnKind::Continuous,
                levels: Vec::new(),
            })
            .collect(),
        target: "label".into(),
        target_kind: TargetKind::Label,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn simple_schema() -> Schema {
        Schema {
            columns: vec![ColumnDecl {
                name: "a".into(),
                kind: ColumnKind::Continuous,
                levels: Vec::new(),
            }],
            target: "label".into(),
            target_kind: TargetKind::Label,
        }
    }

    #[test]
    fn loads_continuous_column() {
        let f = write_tmp("a,label\n1,p\n2,q\n3,p\n");
        let raw = load_csv(f.path(), &simple_schema()).unwrap();
        match &raw.columns[0] {
            RawColumn::Continuous(v) => assert_eq!(v, &vec![1.0, 2.0, 3.0]),
            _ => panic!("wrong column kind"),
        }
    }

    #[test]
    fn bad_cell_reports_row_and_column() {
        let f = write_tmp("a,label\n1,p\nabc,q\n");
        match load_csv(f.path(), &simple_schema()) {
            Err(BlError::Parse { row, col, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(col, "a");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn nominal_records_first_appearance_order() {
        let schema = Schema {
            columns: vec![ColumnDecl {
                name: "c".into(),
                kind: ColumnKind::Nominal,
                levels: Vec::new(),
            }],
            target: "label".into(),
            target_kind: TargetKind::Label,
        };
        let f = write_tmp("c,label\nred,p\nblue,q\nred,p\n");
        let raw = load_csv(f.path(), &schema).unwrap();
        match &raw.columns[0] {
            RawColumn::Categorical { seen_order, .. } => {
                assert_eq!(seen_order, &vec!["red".to_string(), "blue".to_string()]);
            }
            _ => panic!("wrong column kind"),
        }
    }

    #[test]
    fn rfc4180_quoting() {
        let schema = Schema {
            columns: vec![ColumnDecl {
                name: "c".into(),
                kind: ColumnKind::Nominal,
                levels: Vec::new(),
            }],
            target: "label".into(),
            target_kind: TargetKind::Label,
        };
        let f = write_tmp("c,label\n\"a,b\",p\n\"say \"\"hi\"\"\",q\n");
        let raw = load_csv(f.path(), &schema).unwrap();
        match &raw.columns[0] {
            RawColumn::Categorical { values, .. } => {
                assert_eq!(values[0], "a,b");
                assert_eq!(values[1], "say \"hi\"");
            }
            _ => panic!(),
        }
    }

    #[test]
    fn split_sizes_follow_ratios() {
        let rows: String = (0..10)
            .map(|i| format!("{i},{}\n", if i % 2 == 0 { "p" } else { "q" }))
            .collect();
        let f = write_tmp(&format!("a,label\n{rows}"));
        let raw = load_csv(f.path(), &simple_schema()).unwrap();
        let ds = preprocess_and_split(&raw, (0.7, 0.1, 0.2), 0).unwrap();
        assert_eq!(ds.split.train.len(), 7);
        assert_eq!(ds.split.val.len(), 1);
        assert_eq!(ds.split.test.len(), 2);
        let mut all: Vec<usize> = ds
            .split
            .train
            .iter()
            .chain(&ds.split.val)
            .chain(&ds.split.test)
            .cloned()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn standardization_is_fit_on_train_only() {
        let rows: String = (0..40)
            .map(|i| {
                format!(
                    "{},{}\n",
                    i as f64 * 0.5 - 3.0,
                    if i % 2 == 0 { "p" } else { "q" }
                )
            })
            .collect();
        let f = write_tmp(&format!("a,label\n{rows}"));
        let raw = load_csv(f.path(), &simple_schema()).unwrap();
        let ds = preprocess_and_split(&raw, (0.7, 0.1, 0.2), 3).unwrap();
        let train_vals: Vec<f64> = ds.split.train.iter().map(|&i| ds.features[i][0]).collect();
        let mean: f64 = train_vals.iter().sum::<f64>() / train_vals.len() as f64;
        let var: f64 =
            train_vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / train_vals.len() as f64;
        assert!(mean.abs() < 1e-9, "train mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-9, "train std {}", var.sqrt());
    }

    #[test]
    fn constant_column_gets_std_floor() {
        let rows: String = (0..10)
            .map(|i| format!("5.0,{}\n", if i % 2 == 0 { "p" } else { "q" }))
            .collect();
        let f = write_tmp(&format!("a,label\n{rows}"));
        let raw = load_csv(f.path(), &simple_schema()).unwrap();
        let ds = preprocess_and_split(&raw, (0.7, 0.1, 0.2), 1).unwrap();
        assert_eq!(ds.column_specs[0].std, STD_FLOOR);
        assert!(ds.features.iter().all(|r| r[0] == 0.0));
    }

    #[test]
    fn same_seed_same_split() {
        let rows: String = (0..30)
            .map(|i| format!("{i},{}\n", if i % 2 == 0 { "p" } else { "q" }))
            .collect();
        let f = write_tmp(&format!("a,label\n{rows}"));
        let raw = load_csv(f.path(), &simple_schema()).unwrap();
        let a = preprocess_and_split(&raw, (0.7, 0.1, 0.2), 42).unwrap();
        let b = preprocess_and_split(&raw, (0.7, 0.1, 0.2), 42).unwrap();
        assert_eq!(a.split, b.split);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn encoding_is_idempotent_on_train() {
        let rows: String = (0..30)
            .map(|i| format!("{i},{}\n", if i % 2 == 0 { "p" } else { "q" }))
            .collect();
        let f = write_tmp(&format!("a,label\n{rows}"));
        let raw = load_csv(f.path(), &simple_schema()).unwrap();
        let a = preprocess_and_split(&raw, (0.7, 0.1, 0.2), 7).unwrap();
        let b = preprocess_and_split(&raw, (0.7, 0.1, 0.2), 7).unwrap();
        assert_eq!(a.rows(&a.split.train), b.rows(&b.split.train));
    }

    #[test]
    fn ordinal_respects_declared_order() {
        let schema = Schema {
            columns: vec![ColumnDecl {
                name: "s".into(),
                kind: ColumnKind::Ordinal,
                levels: vec!["low".into(), "mid".into(), "high".into()],
            }],
            target: "label".into(),
            target_kind: TargetKind::Label,
        };
        let rows: String = (0..12)
            .map(|i| {
                let lvl = ["low", "mid", "high"][i % 3];
                format!("{lvl},{}\n", if i % 2 == 0 { "p" } else { "q" })
            })
            .collect();
        let f = write_tmp(&format!("s,label\n{rows}"));
        let raw = load_csv(f.path(), &schema).unwrap();
        let ds = preprocess_and_split(&raw, (0.7, 0.1, 0.2), 5).unwrap();
        let spec = &ds.column_specs[0];
        let enc = |lvl: usize| (lvl as f64 - spec.mean) / spec.std;
        assert!(enc(0) < enc(1) && enc(1) < enc(2));
    }

    #[test]
    fn perfect_predictions_metrics() {
        let labels = vec![0, 1, 2, 0, 1, 2];
        let probs: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| {
                let mut p = vec![0.0; 3];
                p[l] = 1.0;
                p
            })
            .collect();
        let m = metrics(&labels, &probs).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1_macro, 1.0);
        assert!(m.nll <= 1e-6);
        assert!(m.ece <= 1e-9);
    }

    #[test]
    fn binary_auc_rank_definition() {
        let labels = vec![0, 1];
        let probs = vec![vec![0.6, 0.4], vec![0.4, 0.6]];
        let m = metrics(&labels, &probs).unwrap();
        assert_eq!(m.auc, 1.0);
        let probs_bad = vec![vec![0.4, 0.6], vec![0.6, 0.4]];
        let m2 = metrics(&labels, &probs_bad).unwrap();
        assert_eq!(m2.auc, 0.0);
    }

    #[test]
    fn uniform_four_class_predictor() {
        // Balanced labels, uniform probabilities: nll = ln 4; argmax ties
        // resolve to class 0 so accuracy = 1/4; confidence 0.25 equals
        // accuracy so ece ≈ 0. Verified against the explicit confusion table.
        let labels = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let probs = vec![vec![0.25; 4]; 8];
        let m = metrics(&labels, &probs).unwrap();
        assert!((m.nll - 4.0f64.ln()).abs() < 1e-12);
        assert_eq!(m.accuracy, 0.25);
        assert!(m.ece <= 1e-12);
        assert_eq!(m.auc, 0.5);
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let labels = vec![0, 1, 0, 1, 1, 0, 1];
        let scores = [0.1, 0.8, 0.3, 0.7, 0.4, 0.2, 0.9];
        let to_probs = |f: &dyn Fn(f64) -> f64| -> Vec<Vec<f64>> {
            scores.iter().map(|&s| vec![1.0 - f(s), f(s)]).collect()
        };
        let id = to_probs(&|s| s);
        let squashed = to_probs(&|s| s * s);
        let a = metrics(&labels, &id).unwrap().auc;
        let b = metrics(&labels, &squashed).unwrap().auc;
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_probability_rows_rejected() {
        let labels = vec![0, 1];
        let probs = vec![vec![0.9, 0.2], vec![0.5, 0.5]];
        assert!(metrics(&labels, &probs).is_err());
    }

    #[test]
    fn blobs_and_arcs_are_deterministic() {
        let (a, la) = make_two_blobs(50, 9);
        let (b, lb) = make_two_blobs(50, 9);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = make_two_arcs(50, 9, 0.1);
        let (d, _) = make_two_arcs(50, 9, 0.1);
        assert_eq!(c, d);
    }
}
