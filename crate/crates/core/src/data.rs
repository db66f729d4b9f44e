//! Synthetic datasets, CSV ingestion, label noise and batching.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub splits: Vec<Split>,
    /// Original label strings, indexed by class id.
    pub label_names: Vec<String>,
    pub feature_names: Vec<String>,
}

pub fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (r, &c) in labels.iter().enumerate() {
        m.set(r, c, 1.0);
    }
    m
}

/// Per class: 70% train, 15% val, rest test, after a seeded shuffle.
fn stratified_split(labels: &[usize], classes: usize, rng: &mut RngState) -> Vec<Split> {
    let mut splits = vec![Split::Train; labels.len()];
    for k in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        rng.shuffle(&mut idx);
        let n = idx.len();
        let n_train = (n as f64 * 0.70).round() as usize;
        let n_val = (n as f64 * 0.15).round() as usize;
        for (pos, &i) in idx.iter().enumerate() {
            splits[i] = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    splits
}

impl Dataset {
    fn new(features: Matrix, labels: Vec<usize>, classes: usize, rng: &mut RngState) -> Self {
        let splits = stratified_split(&labels, classes, rng);
        let feature_names = (0..features.cols()).map(|j| format!("x{j}")).collect();
        Dataset {
            features,
            labels,
            classes,
            splits,
            label_names: (0..classes).map(|k| k.to_string()).collect(),
            feature_names,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Features and labels of one split, in row order.
    pub fn subset(&self, split: Split) -> (Matrix, Vec<usize>) {
        let idx = self.indices(split);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (self.features.select_rows(&idx), labels)
    }

    /// Z-scores every feature column with training-split statistics.
    pub fn standardized(&self) -> Result<Dataset> {
        let (train, _) = self.subset(Split::Train);
        if train.rows() == 0 {
            return Err(Error::domain("standardize", "training split is empty"));
        }
        let mean = train.column_means();
        let mut var = vec![0.0; train.cols()];
        for r in 0..train.rows() {
            for ((v, &x), &m) in var.iter_mut().zip(train.row(r)).zip(mean.data()) {
                *v += (x - m) * (x - m);
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|v| {
                let s = (v / train.rows() as f64).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        let mut out = self.clone();
        for r in 0..out.features.rows() {
            for ((x, &m), &s) in out.features.row_mut(r).iter_mut().zip(mean.data()).zip(&std) {
                *x = (*x - m) / s;
            }
        }
        Ok(out)
    }

    /// Writes features, the label and the split tag; the first line is a
    /// header.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = self.feature_names.clone();
        header.push("label".into());
        header.push("split".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.label_names[self.labels[i]].clone());
            rec.push(self.splits[i].as_str().into());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Two-column `label,index` sidecar.
    pub fn write_label_mapping(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["label", "index"])?;
        for (k, name) in self.label_names.iter().enumerate() {
            w.write_record([name.as_str(), &k.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Gaussian clusters (unit std) whose centers are at least `separation`
/// apart.
pub fn gen_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, rng: &mut RngState) -> Result<Dataset> {
    if classes < 2 || dim == 0 {
        return Err(Error::domain("gen_blobs", "need at least 2 classes and 1 dimension"));
    }
    let centers = if classes <= dim {
        // Scaled basis vectors: every pair is exactly `separation` apart.
        let mut c = Matrix::zeros(classes, dim);
        for k in 0..classes {
            c.set(k, k, separation / std::f64::consts::SQRT_2);
        }
        c
    } else {
        let raw = rng.normal(classes, dim, 0.0, 1.0);
        let mut min_d = f64::INFINITY;
        for a in 0..classes {
            for b in a + 1..classes {
                let d: f64 = raw.row(a).iter().zip(raw.row(b)).map(|(x, y)| (x - y).powi(2)).sum();
                min_d = min_d.min(d.sqrt());
            }
        }
        raw.scale(if min_d > 0.0 { separation / min_d } else { 0.0 })
    };
    let n = classes * per_class;
    let mut features = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..per_class {
        for k in 0..classes {
            let r = i * classes + k;
            for j in 0..dim {
                features.set(r, j, centers.get(k, j) + rng.standard_normal());
            }
            labels.push(k);
        }
    }
    Ok(Dataset::new(features, labels, classes, rng))
}

/// Interleaved 2-D spirals. Arm `k` starts at radius 0.1 and angle
/// `2 pi k / K`, growing to radius 1.1 over `turns` revolutions.
pub fn gen_spirals(arms: usize, per_arm: usize, noise: f64, turns: f64, rng: &mut RngState) -> Result<Dataset> {
    if arms < 2 {
        return Err(Error::domain("gen_spirals", "need at least 2 arms"));
    }
    if per_arm == 0 {
        return Err(Error::domain("gen_spirals", "need at least one point per arm"));
    }
    let n = arms * per_arm;
    let mut features = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    let tau = std::f64::consts::TAU;
    for i in 0..per_arm {
        let t = if per_arm == 1 { 0.0 } else { i as f64 / (per_arm - 1) as f64 };
        for k in 0..arms {
            let r = 0.1 + t;
            let theta = tau * k as f64 / arms as f64 + tau * turns * t;
            let row = i * arms + k;
            features.set(row, 0, r * theta.cos() + noise * rng.standard_normal());
            features.set(row, 1, r * theta.sin() + noise * rng.standard_normal());
            labels.push(k);
        }
    }
    Ok(Dataset::new(features, labels, arms, rng))
}

/// Which column holds the class label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

/// Reads numeric features and one label column. Labels that all parse as
/// non-negative integers are used as class ids; otherwise strings are mapped
/// to ids in order of first appearance. A column named `split` holding
/// train/val/test tags is honored; without it rows get a stratified split
/// from a fixed seed.
pub fn load_csv(path: impl AsRef<Path>, label: &LabelColumn, has_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                line: 0,
                detail: format!("{other:?}"),
            },
        })?;
    let mut records = reader.records();

    let header: Option<Vec<String>> = if has_header {
        match records.next() {
            Some(r) => Some(r?.iter().map(|s| s.trim().to_string()).collect()),
            None => return Err(Error::Parse { line: 1, detail: "empty file".into() }),
        }
    } else {
        None
    };

    let mut rows: Vec<(usize, csv::StringRecord)> = Vec::new();
    let first_line = if has_header { 2 } else { 1 };
    for (i, r) in records.enumerate() {
        let r = r?;
        if r.len() == 1 && r.get(0).is_some_and(|s| s.trim().is_empty()) {
            continue;
        }
        rows.push((first_line + i, r));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: first_line,
            detail: "no data rows".into(),
        });
    }
    let width = header.as_ref().map_or(rows[0].1.len(), Vec::len);
    let names: Vec<String> = header.unwrap_or_else(|| (0..width).map(|j| format!("col{j}")).collect());

    let label_idx = match label {
        LabelColumn::Index(i) if *i < width => *i,
        LabelColumn::Index(i) => {
            return Err(Error::Parse {
                line: first_line,
                detail: format!("label column {i} out of range for {width} columns"),
            })
        }
        LabelColumn::Name(n) => names.iter().position(|c| c == n).ok_or_else(|| Error::Parse {
            line: 1,
            detail: format!("no column named {n}"),
        })?,
    };
    let split_idx = names.iter().position(|c| c == "split").filter(|&i| i != label_idx);
    let feature_cols: Vec<usize> = (0..width).filter(|&j| j != label_idx && Some(j) != split_idx).collect();

    let mut data = Vec::with_capacity(rows.len() * feature_cols.len());
    let mut raw_labels = Vec::with_capacity(rows.len());
    let mut tags = Vec::with_capacity(rows.len());
    for (line, rec) in &rows {
        if rec.len() != width {
            return Err(Error::Parse {
                line: *line,
                detail: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for &j in &feature_cols {
            let field = rec[j].trim();
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line: *line,
                detail: format!("column {} holds non-numeric value {field:?}", names[j]),
            })?;
            data.push(v);
        }
        raw_labels.push(rec[label_idx].trim().to_string());
        if let Some(s) = split_idx {
            let tag = Split::parse(rec[s].trim()).ok_or_else(|| Error::Parse {
                line: *line,
                detail: format!("split column holds {:?}", &rec[s]),
            })?;
            tags.push(tag);
        }
    }

    let numeric: Option<Vec<usize>> = raw_labels.iter().map(|s| s.parse::<usize>().ok()).collect();
    let (labels, label_names) = match numeric {
        Some(ids) => {
            let k = ids.iter().copied().max().unwrap_or(0) + 1;
            (ids, (0..k).map(|i| i.to_string()).collect::<Vec<_>>())
        }
        None => {
            let mut map: HashMap<&str, usize> = HashMap::new();
            let mut names = Vec::new();
            let ids = raw_labels
                .iter()
                .map(|s| {
                    *map.entry(s.as_str()).or_insert_with(|| {
                        names.push(s.clone());
                        names.len() - 1
                    })
                })
                .collect();
            (ids, names)
        }
    };
    let classes = label_names.len();
    let features = Matrix::from_vec(rows.len(), feature_cols.len(), data)?;
    let splits = if split_idx.is_some() {
        tags
    } else {
        stratified_split(&labels, classes, &mut RngState::new(0))
    };
    Ok(Dataset {
        features,
        labels,
        classes,
        splits,
        label_names,
        feature_names: feature_cols.iter().map(|&j| names[j].clone()).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub theta: f64,
    pub seed: u64,
}

/// Replaces each training label, with probability `theta`, by a uniformly
/// chosen different class. Returns the noisy dataset and the flip mask.
pub fn inject_label_noise(ds: &Dataset, spec: NoiseSpec) -> Result<(Dataset, Vec<bool>)> {
    if !(0.0..=1.0).contains(&spec.theta) {
        return Err(Error::domain("inject_label_noise", format!("theta {} outside [0,1]", spec.theta)));
    }
    let mut rng = RngState::new(spec.seed);
    let mut out = ds.clone();
    let mut mask = vec![false; ds.len()];
    if spec.theta == 0.0 {
        return Ok((out, mask));
    }
    for i in 0..ds.len() {
        if ds.splits[i] != Split::Train {
            continue;
        }
        if rng.uniform() < spec.theta {
            let shift = 1 + rng.below(ds.classes - 1);
            out.labels[i] = (ds.labels[i] + shift) % ds.classes;
            mask[i] = true;
        }
    }
    Ok((out, mask))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub features: Matrix,
    pub labels: Matrix,
}

/// Splits one split into consecutive batches (last one partial), shuffling
/// row order first when asked.
pub fn batches(ds: &Dataset, split: Split, batch_size: usize, shuffle: bool, rng: &mut RngState) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::domain("batches", "batch size must be positive"));
    }
    let mut idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::domain("batches", format!("{} split is empty", split.as_str())));
    }
    if shuffle {
        rng.shuffle(&mut idx);
    }
    Ok(idx
        .chunks(batch_size)
        .map(|chunk| {
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
            Batch {
                indices: chunk.to_vec(),
                features: ds.features.select_rows(chunk),
                labels: one_hot(&labels, ds.classes),
            }
        })
        .collect())
}
