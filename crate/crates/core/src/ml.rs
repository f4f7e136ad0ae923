//! Workload classification: feature filtering, a CART random forest with
//! balanced class weights, permutation-importance backward elimination, and
//! the random-split, leave-one-participant-out and learning-curve harnesses.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    Low,
    Moderate,
    High,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Low, Condition::Moderate, Condition::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Condition::Low => "Low",
            Condition::Moderate => "Moderate",
            Condition::High => "High",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "low" => Ok(Condition::Low),
            "moderate" => Ok(Condition::Moderate),
            "high" => Ok(Condition::High),
            _ => Err(Error::InvalidConfig(format!("unknown condition '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Session {
    Baseline,
    Experimental,
}

impl Session {
    pub fn name(self) -> &'static str {
        match self {
            Session::Baseline => "baseline",
            Session::Experimental => "experimental",
        }
    }
}

impl fmt::Display for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Session {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Session::Baseline),
            "experimental" => Ok(Session::Experimental),
            _ => Err(Error::InvalidConfig(format!("unknown session '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RowMeta {
    pub participant: String,
    pub session: Session,
    pub condition: Condition,
    pub window_index: usize,
}

pub const META_COLUMNS: [&str; 4] = ["participant", "session", "condition", "window_index"];

/// Labelled rows of features for one or more participants.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    columns: Vec<String>,
    meta: Vec<RowMeta>,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(columns: Vec<String>) -> Self {
        Self {
            columns,
            meta: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn push_row(&mut self, meta: RowMeta, values: &[f64]) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::InvalidParams(format!(
                "row has {} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        self.meta.push(meta);
        self.data.extend_from_slice(values);
        Ok(())
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn meta(&self) -> &[RowMeta] {
        &self.meta
    }

    pub fn n_rows(&self) -> usize {
        self.meta.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_cols();
        &self.data[i * p..(i + 1) * p]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.row(i)[j]).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.meta.iter().map(|m| m.condition.index()).collect()
    }

    /// Sorted distinct participant ids.
    pub fn participants(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.meta.iter().map(|m| m.participant.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut out = Self::new(self.columns.clone());
        for &i in rows {
            out.meta.push(self.meta[i].clone());
            out.data.extend_from_slice(self.row(i));
        }
        out
    }

    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.n_rows() * cols.len());
        for i in 0..self.n_rows() {
            let row = self.row(i);
            data.extend(cols.iter().map(|&j| row[j]));
        }
        Self {
            columns: cols.iter().map(|&j| self.columns[j].clone()).collect(),
            meta: self.meta.clone(),
            data,
        }
    }

    pub fn select_named(&self, names: &[String]) -> Result<Self> {
        let cols = names
            .iter()
            .map(|n| {
                self.column_index(n)
                    .ok_or_else(|| Error::InvalidParams(format!("feature '{n}' not in matrix")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_columns(&cols))
    }

    pub fn rows_where(&self, pred: impl Fn(&RowMeta) -> bool) -> Vec<usize> {
        (0..self.n_rows())
            .filter(|&i| pred(&self.meta[i]))
            .collect()
    }

    pub fn filter_rows(&self, pred: impl Fn(&RowMeta) -> bool) -> Self {
        self.select_rows(&self.rows_where(pred))
    }

    /// Replace the condition labels, e.g. with a permutation.
    pub fn with_labels(&self, labels: &[usize]) -> Result<Self> {
        if labels.len() != self.n_rows() {
            return Err(Error::InvalidParams("label count mismatch".into()));
        }
        let mut out = self.clone();
        for (m, &l) in out.meta.iter_mut().zip(labels) {
            m.condition = Condition::from_index(l)
                .ok_or_else(|| Error::InvalidParams(format!("label {l}")))?;
        }
        Ok(out)
    }

    /// Column-wise concatenation of two matrices with identical row metadata.
    pub fn hstack(&self, other: &FeatureMatrix) -> Result<Self> {
        if self.meta != other.meta {
            return Err(Error::InvalidParams("row metadata differ".into()));
        }
        let mut out = Self::new(self.columns.iter().chain(&other.columns).cloned().collect());
        for i in 0..self.n_rows() {
            let row: Vec<f64> = self.row(i).iter().chain(other.row(i)).copied().collect();
            out.push_row(self.meta[i].clone(), &row)?;
        }
        Ok(out)
    }

    pub fn append(&mut self, other: FeatureMatrix) -> Result<()> {
        if self.columns != other.columns {
            return Err(Error::InvalidParams("column sets differ".into()));
        }
        self.meta.extend(other.meta);
        self.data.extend(other.data);
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        w.write_record(
            META_COLUMNS
                .iter()
                .copied()
                .chain(self.columns.iter().map(String::as_str)),
        )?;
        for (i, m) in self.meta.iter().enumerate() {
            let mut rec = vec![
                m.participant.clone(),
                m.session.to_string(),
                m.condition.to_string(),
                m.window_index.to_string(),
            ];
            rec.extend(self.row(i).iter().map(|v| {
                if v.is_finite() {
                    v.to_string()
                } else {
                    String::new()
                }
            }));
            w.write_record(&rec)?;
        }
        Ok(())
    }

    /// Read a feature CSV. Rows with empty or non-finite values are dropped.
    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::read_csv_with(path, |_| true)
    }

    /// Read only the feature columns accepted by `keep`; rows are dropped
    /// only when a kept column is missing.
    pub fn read_csv_with(path: &Path, keep: impl Fn(&str) -> bool) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.len() < META_COLUMNS.len() || header.iter().zip(META_COLUMNS).any(|(h, m)| h != m)
        {
            return Err(Error::MalformedRow {
                row: 0,
                msg: format!("header must start with {}", META_COLUMNS.join(",")),
            });
        }
        let kept: Vec<usize> = (META_COLUMNS.len()..header.len())
            .filter(|&j| keep(&header[j]))
            .collect();
        let mut out = Self::new(kept.iter().map(|&j| header[j].to_string()).collect());
        let mut dropped = 0usize;
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = k + 1;
            let bad = |msg: String| Error::MalformedRow { row, msg };
            let meta = RowMeta {
                participant: rec[0].to_string(),
                session: rec[1].parse().map_err(|e: Error| bad(e.to_string()))?,
                condition: rec[2].parse().map_err(|e: Error| bad(e.to_string()))?,
                window_index: rec[3].parse().map_err(|_| bad("window_index".into()))?,
            };
            if rec.len() != header.len() {
                return Err(bad(format!(
                    "expected {} fields, got {}",
                    header.len(),
                    rec.len()
                )));
            }
            let values: Option<Vec<f64>> = kept
                .iter()
                .map(|&j| rec[j].trim().parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect();
            match values {
                Some(v) => out.push_row(meta, &v).map_err(|e| bad(e.to_string()))?,
                None => dropped += 1,
            }
        }
        if dropped > 0 {
            log::info!(
                "{}: dropped {dropped} rows with missing values",
                path.display()
            );
        }
        Ok(out)
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    let cov = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / a.len() as f64;
    cov / (va * vb).sqrt()
}

/// Zero-mean unit-variance scaling fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl StandardScaler {
    pub fn fit(m: &FeatureMatrix) -> Self {
        let (mean, scale) = (0..m.n_cols())
            .map(|j| {
                let (mu, var) = mean_var(&m.column(j));
                (mu, if var > 0.0 { var.sqrt() } else { 1.0 })
            })
            .unzip();
        Self { mean, scale }
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn transform(&self, m: &FeatureMatrix) -> Vec<f64> {
        (0..m.n_rows())
            .flat_map(|i| self.transform_row(m.row(i)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeight {
    Balanced,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    /// Features examined per split; `None` means `floor(sqrt(p))`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub class_weight: ClassWeight,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 300,
            max_depth: None,
            max_features: None,
            bootstrap: true,
            class_weight: ClassWeight::Balanced,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidConfig("n_trees must be at least 1".into()));
        }
        Ok(())
    }

    fn features_per_split(&self, p: usize) -> usize {
        self.max_features
            .unwrap_or_else(|| (p as f64).sqrt().floor() as usize)
            .clamp(1, p.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(Vec<f64>),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    fn leaf_probs(&self, x: &[f64]) -> &[f64] {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Leaf(p) => return p,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    k = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], k: usize) -> usize {
            match &nodes[k] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }
}

/// A training sample inside a node: row index, bootstrap count, weight.
#[derive(Clone, Copy)]
struct Sample {
    row: usize,
    count: u32,
    weight: f64,
}

struct TreeBuilder<'a> {
    x: &'a [f64],
    y: &'a [usize],
    p: usize,
    n_classes: usize,
    max_features: usize,
    max_depth: Option<usize>,
}

impl TreeBuilder<'_> {
    fn class_weights(&self, samples: &[Sample]) -> Vec<f64> {
        let mut w = vec![0.0; self.n_classes];
        for s in samples {
            w[self.y[s.row]] += s.weight;
        }
        w
    }

    fn leaf(&self, samples: &[Sample]) -> Node {
        let w = self.class_weights(samples);
        let total: f64 = w.iter().sum();
        Node::Leaf(w.into_iter().map(|v| v / total).collect())
    }

    /// Best split of `samples` as (feature, threshold, left samples, right samples).
    fn best_split(
        &self,
        samples: &[Sample],
        rng: &mut ChaCha8Rng,
    ) -> Option<(usize, f64, Vec<Sample>, Vec<Sample>)> {
        let mut features: Vec<usize> = (0..self.p).collect();
        features.shuffle(rng);
        let total = self.class_weights(samples);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut visited = 0usize;
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(samples.len());
        for &f in &features {
            if visited >= self.max_features && best.is_some() {
                break;
            }
            order.clear();
            order.extend(
                samples
                    .iter()
                    .enumerate()
                    .map(|(k, s)| (self.x[s.row * self.p + f], k)),
            );
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if order[0].0 == order[order.len() - 1].0 {
                continue;
            }
            visited += 1;
            let mut left = vec![0.0; self.n_classes];
            let (mut wl, wt) = (0.0, total.iter().sum::<f64>());
            for k in 0..order.len() - 1 {
                let s = samples[order[k].1];
                left[self.y[s.row]] += s.weight;
                wl += s.weight;
                let (v, next) = (order[k].0, order[k + 1].0);
                if v == next {
                    continue;
                }
                let wr = wt - wl;
                let sl: f64 = left.iter().map(|c| c * c).sum::<f64>() / wl;
                let sr: f64 = left
                    .iter()
                    .zip(&total)
                    .map(|(l, t)| (t - l) * (t - l))
                    .sum::<f64>()
                    / wr;
                let proxy = sl + sr;
                if best.is_none_or(|(b, _, _)| proxy > b) {
                    let mut thr = v + (next - v) / 2.0;
                    if thr >= next {
                        thr = v;
                    }
                    best = Some((proxy, f, thr));
                }
            }
        }
        let (_, f, thr) = best?;
        let (l, r): (Vec<Sample>, Vec<Sample>) = samples
            .iter()
            .partition(|s| self.x[s.row * self.p + f] <= thr);
        Some((f, thr, l, r))
    }

    fn build(&self, root: Vec<Sample>, rng: &mut ChaCha8Rng) -> DecisionTree {
        let mut nodes = vec![Node::Leaf(Vec::new())];
        let mut stack = vec![(0usize, root, 0usize)];
        while let Some((id, samples, depth)) = stack.pop() {
            let counts: u32 = samples.iter().map(|s| s.count).sum();
            let pure = samples
                .iter()
                .all(|s| self.y[s.row] == self.y[samples[0].row]);
            let depth_ok = self.max_depth.is_none_or(|d| depth < d);
            let split = if counts >= 2 && !pure && depth_ok {
                self.best_split(&samples, rng)
            } else {
                None
            };
            match split {
                None => nodes[id] = self.leaf(&samples),
                Some((feature, threshold, l, r)) => {
                    let (left, right) = (nodes.len(), nodes.len() + 1);
                    nodes.push(Node::Leaf(Vec::new()));
                    nodes.push(Node::Leaf(Vec::new()));
                    nodes[id] = Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    };
                    stack.push((right, r, depth + 1));
                    stack.push((left, l, depth + 1));
                }
            }
        }
        DecisionTree { nodes }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    n_features: usize,
    n_classes: usize,
    trees: Vec<DecisionTree>,
}

impl RandomForest {
    /// Fit on row-major `x` (`y.len()` rows of `p` features).
    pub fn fit(x: &[f64], p: usize, y: &[usize], cfg: &ForestConfig) -> Result<Self> {
        cfg.validate()?;
        let n = y.len();
        if n == 0 || x.len() != n * p || p == 0 {
            return Err(Error::EmptyInput);
        }
        let n_classes = y.iter().max().map_or(0, |m| m + 1).max(N_CLASSES);
        let mut support = vec![0usize; n_classes];
        for &c in y {
            support[c] += 1;
        }
        let present = support.iter().filter(|&&c| c > 0).count();
        if present < 2 {
            return Err(Error::SingleClassTraining);
        }
        let class_w: Vec<f64> = support
            .iter()
            .map(|&c| match cfg.class_weight {
                ClassWeight::Balanced if c > 0 => n as f64 / (present * c) as f64,
                _ => 1.0,
            })
            .collect();
        let builder = TreeBuilder {
            x,
            y,
            p,
            n_classes,
            max_features: cfg.features_per_split(p),
            max_depth: cfg.max_depth,
        };
        let trees = (0..cfg.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(t as u64);
                let mut counts = vec![0u32; n];
                if cfg.bootstrap {
                    for _ in 0..n {
                        counts[rng.random_range(0..n)] += 1;
                    }
                } else {
                    counts.fill(1);
                }
                let samples: Vec<Sample> = counts
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(|(row, &count)| Sample {
                        row,
                        count,
                        weight: count as f64 * class_w[y[row]],
                    })
                    .collect();
                builder.build(samples, &mut rng)
            })
            .collect();
        Ok(Self {
            n_features: p,
            n_classes,
            trees,
        })
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    /// Mean of the per-tree leaf class distributions.
    pub fn predict_proba(&self, row: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_classes];
        for t in &self.trees {
            for (a, p) in acc.iter_mut().zip(t.leaf_probs(row)) {
                *a += p;
            }
        }
        let k = self.trees.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        acc
    }

    pub fn predict_row(&self, row: &[f64]) -> usize {
        argmax(&self.predict_proba(row))
    }

    pub fn predict(&self, x: &[f64]) -> Vec<usize> {
        x.chunks_exact(self.n_features)
            .map(|r| self.predict_row(r))
            .collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Scaler and forest fitted on named feature columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub features: Vec<String>,
    pub scaler: StandardScaler,
    pub forest: RandomForest,
}

impl Model {
    pub fn fit(train: &FeatureMatrix, cfg: &ForestConfig) -> Result<Self> {
        let scaler = StandardScaler::fit(train);
        let x = scaler.transform(train);
        let forest = RandomForest::fit(&x, train.n_cols(), &train.labels(), cfg)?;
        Ok(Self {
            features: train.columns().to_vec(),
            scaler,
            forest,
        })
    }

    pub fn predict(&self, m: &FeatureMatrix) -> Result<Vec<usize>> {
        let m = if m.columns() == self.features.as_slice() {
            m.clone()
        } else {
            m.select_named(&self.features)?
        };
        Ok(self.forest.predict(&self.scaler.transform(&m)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub balanced_accuracy: f64,
    pub weighted_f1: f64,
    pub kappa: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<usize>,
    /// Row-normalized percentages; row = true class.
    pub confusion: Vec<Vec<f64>>,
}

pub fn eval_metrics(pred: &[usize], truth: &[usize]) -> Result<EvalReport> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::EmptyInput);
    }
    let k = N_CLASSES.max(pred.iter().chain(truth).max().unwrap() + 1);
    let mut cm = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        cm[t][p] += 1;
    }
    let n = pred.len() as f64;
    let support: Vec<usize> = cm.iter().map(|r| r.iter().sum()).collect();
    let predicted: Vec<usize> = (0..k).map(|c| cm.iter().map(|r| r[c]).sum()).collect();
    let ratio = |a: usize, b: usize| if b > 0 { a as f64 / b as f64 } else { 0.0 };
    let recall: Vec<f64> = (0..k).map(|c| ratio(cm[c][c], support[c])).collect();
    let precision: Vec<f64> = (0..k).map(|c| ratio(cm[c][c], predicted[c])).collect();
    let f1: Vec<f64> = (0..k)
        .map(|c| {
            let s = precision[c] + recall[c];
            if s > 0.0 {
                2.0 * precision[c] * recall[c] / s
            } else {
                0.0
            }
        })
        .collect();
    let present: Vec<usize> = (0..k).filter(|&c| support[c] > 0).collect();
    let balanced_accuracy = present.iter().map(|&c| recall[c]).sum::<f64>() / present.len() as f64;
    let weighted_f1 = (0..k).map(|c| f1[c] * support[c] as f64).sum::<f64>() / n;
    let po = (0..k).map(|c| cm[c][c]).sum::<usize>() as f64 / n;
    let pe: f64 = (0..k)
        .map(|c| (support[c] as f64 / n) * (predicted[c] as f64 / n))
        .sum();
    let kappa = if pe < 1.0 {
        (po - pe) / (1.0 - pe)
    } else if po == 1.0 {
        1.0
    } else {
        0.0
    };
    let confusion = cm
        .iter()
        .zip(&support)
        .map(|(r, &s)| r.iter().map(|&c| 100.0 * ratio(c, s)).collect())
        .collect();
    Ok(EvalReport {
        balanced_accuracy,
        weighted_f1,
        kappa,
        precision,
        recall,
        f1,
        support,
        confusion,
    })
}

/// Mean and sample standard deviation (`n - 1`; zero for one value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                sd: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, sd, n }
    }

    /// `"85.2% ± 1.5%"` for fractions 0.852 and 0.015.
    pub fn percent(&self) -> String {
        format!("{:.1}% ± {:.1}%", 100.0 * self.mean, 100.0 * self.sd)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub balanced_accuracy: MeanSd,
    pub weighted_f1: MeanSd,
    pub kappa: MeanSd,
    /// Element-wise mean of the row-normalized confusion matrices.
    pub confusion: Vec<Vec<f64>>,
}

impl EvalSummary {
    pub fn of(reports: &[EvalReport]) -> Self {
        let pick =
            |f: fn(&EvalReport) -> f64| MeanSd::of(&reports.iter().map(f).collect::<Vec<_>>());
        let k = reports.first().map_or(N_CLASSES, |r| r.confusion.len());
        let mut confusion = vec![vec![0.0; k]; k];
        for r in reports {
            for (acc, row) in confusion.iter_mut().zip(&r.confusion) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v / reports.len() as f64;
                }
            }
        }
        Self {
            balanced_accuracy: pick(|r| r.balanced_accuracy),
            weighted_f1: pick(|r| r.weighted_f1),
            kappa: pick(|r| r.kappa),
            confusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSelectConfig {
    pub var_threshold: f64,
    pub corr_threshold: f64,
    pub elim_fraction: f64,
    pub min_features: usize,
    pub perm_repeats: usize,
    pub cv_folds: usize,
    /// Allowed balanced-accuracy drop below the best step before stopping.
    pub tolerance: f64,
}

impl Default for FeatureSelectConfig {
    fn default() -> Self {
        Self {
            var_threshold: 1e-8,
            corr_threshold: 0.95,
            elim_fraction: 0.20,
            min_features: 5,
            perm_repeats: 3,
            cv_folds: 5,
            tolerance: 0.005,
        }
    }
}

impl FeatureSelectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.var_threshold > 0.0 && self.corr_threshold > 0.0 && self.tolerance >= 0.0) {
            return Err(Error::InvalidConfig(
                "selection thresholds must be positive".into(),
            ));
        }
        if !(self.elim_fraction > 0.0 && self.elim_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "elim_fraction must lie in (0, 1)".into(),
            ));
        }
        if self.min_features == 0 || self.perm_repeats == 0 || self.cv_folds < 2 {
            return Err(Error::InvalidConfig(
                "min_features, perm_repeats >= 1 and cv_folds >= 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RemovalLog {
    pub low_variance: Vec<String>,
    /// (dropped, kept, r)
    pub correlated: Vec<(String, String, f64)>,
}

/// Drop near-constant columns, then the later column of every pair whose
/// absolute correlation exceeds the threshold.
pub fn filter_features(
    m: &FeatureMatrix,
    cfg: &FeatureSelectConfig,
) -> Result<(FeatureMatrix, RemovalLog)> {
    let mut log = RemovalLog::default();
    let cols: Vec<Vec<f64>> = (0..m.n_cols()).map(|j| m.column(j)).collect();
    let mut keep: Vec<usize> = Vec::new();
    for (j, c) in cols.iter().enumerate() {
        if m.n_rows() == 0 || mean_var(c).1 < cfg.var_threshold {
            log.low_variance.push(m.columns()[j].clone());
        } else {
            keep.push(j);
        }
    }
    let mut dropped = vec![false; m.n_cols()];
    for (a, &i) in keep.iter().enumerate() {
        if dropped[i] {
            continue;
        }
        for &j in &keep[a + 1..] {
            if dropped[j] {
                continue;
            }
            let r = pearson(&cols[i], &cols[j]);
            if r.abs() > cfg.corr_threshold {
                dropped[j] = true;
                log.correlated
                    .push((m.columns()[j].clone(), m.columns()[i].clone(), r));
            }
        }
    }
    keep.retain(|&j| !dropped[j]);
    if keep.is_empty() {
        return Err(Error::AllFeaturesDropped);
    }
    Ok((m.select_columns(&keep), log))
}

/// Per-class shuffled indices dealt round-robin into `k` folds.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        for &i in idx.iter() {
            folds[next % k].push(i);
            next += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    folds
}

/// Stratified train/test split; returns sorted (train, test) row indices.
pub fn stratified_split(
    labels: &[usize],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (&c, idx) in by_class.iter_mut() {
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        if n_test == 0 || n_test >= idx.len() {
            let name = Condition::from_index(c).map_or_else(|| c.to_string(), |c| c.to_string());
            return Err(Error::ClassMissingInSplit(name));
        }
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    for c in Condition::ALL {
        if !by_class.contains_key(&c.index()) {
            return Err(Error::ClassMissingInSplit(c.to_string()));
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn complement(n: usize, held: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    for &i in held {
        mask[i] = false;
    }
    (0..n).filter(|&i| mask[i]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvImportance {
    pub balanced_accuracy: f64,
    /// Mean balanced-accuracy drop per column of the input matrix.
    pub importance: Vec<f64>,
}

/// Cross-validated balanced accuracy and permutation importance: each fold's
/// validation column is shuffled `perm_repeats` times.
pub fn permutation_importance(
    m: &FeatureMatrix,
    forest: &ForestConfig,
    cfg: &FeatureSelectConfig,
    seed: u64,
) -> Result<CvImportance> {
    let labels = m.labels();
    let min_class = Condition::ALL
        .iter()
        .map(|c| labels.iter().filter(|&&l| l == c.index()).count())
        .filter(|&c| c > 0)
        .min()
        .unwrap_or(0);
    let k = cfg.cv_folds.min(min_class);
    if k < 2 {
        return Err(Error::InsufficientWindows {
            participant: m.participants().join(","),
            size: min_class,
        });
    }
    let folds = stratified_folds(&labels, k, seed);
    let p = m.n_cols();
    let per_fold: Vec<(f64, Vec<f64>)> = folds
        .par_iter()
        .enumerate()
        .map(|(f, test)| -> Result<(f64, Vec<f64>)> {
            let train = m.select_rows(&complement(m.n_rows(), test));
            let valid = m.select_rows(test);
            let model = Model::fit(
                &train,
                &ForestConfig {
                    seed,
                    ..forest.clone()
                },
            )?;
            let truth = valid.labels();
            let x = model.scaler.transform(&valid);
            let base = eval_metrics(&model.forest.predict(&x), &truth)?.balanced_accuracy;
            let mut drops = vec![0.0; p];
            for (j, drop) in drops.iter_mut().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((f * p + j) as u64) << 8);
                for _ in 0..cfg.perm_repeats {
                    let mut col: Vec<f64> = (0..valid.n_rows()).map(|i| x[i * p + j]).collect();
                    col.shuffle(&mut rng);
                    let mut xs = x.clone();
                    for (i, v) in col.into_iter().enumerate() {
                        xs[i * p + j] = v;
                    }
                    *drop +=
                        base - eval_metrics(&model.forest.predict(&xs), &truth)?.balanced_accuracy;
                }
                *drop /= cfg.perm_repeats as f64;
            }
            Ok((base, drops))
        })
        .collect::<Result<_>>()?;
    let kf = per_fold.len() as f64;
    let balanced_accuracy = per_fold.iter().map(|(b, _)| b).sum::<f64>() / kf;
    let importance = (0..p)
        .map(|j| per_fold.iter().map(|(_, d)| d[j]).sum::<f64>() / kf)
        .collect();
    Ok(CvImportance {
        balanced_accuracy,
        importance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub features: Vec<String>,
    /// (feature count, cross-validated balanced accuracy) per step.
    pub history: Vec<(usize, f64)>,
}

/// Repeatedly drop the least important fraction of features until accuracy
/// falls more than `tolerance` below the best step or `min_features` remain.
pub fn backward_eliminate(
    m: &FeatureMatrix,
    forest: &ForestConfig,
    cfg: &FeatureSelectConfig,
    seed: u64,
) -> Result<Selection> {
    cfg.validate()?;
    let mut current = m.clone();
    let mut scored = permutation_importance(&current, forest, cfg, seed)?;
    let mut best = scored.balanced_accuracy;
    let mut history = vec![(current.n_cols(), best)];
    while current.n_cols() > cfg.min_features {
        let p = current.n_cols();
        let n_drop =
            ((p as f64 * cfg.elim_fraction).floor() as usize).clamp(1, p - cfg.min_features);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| {
            scored.importance[a]
                .total_cmp(&scored.importance[b])
                .then(a.cmp(&b))
        });
        let mut keep: Vec<usize> = order[n_drop..].to_vec();
        keep.sort_unstable();
        let candidate = current.select_columns(&keep);
        let cand = permutation_importance(&candidate, forest, cfg, seed)?;
        history.push((candidate.n_cols(), cand.balanced_accuracy));
        if cand.balanced_accuracy < best - cfg.tolerance {
            break;
        }
        best = best.max(cand.balanced_accuracy);
        current = candidate;
        scored = cand;
    }
    Ok(Selection {
        features: current.columns().to_vec(),
        history,
    })
}

/// Variance/correlation filter followed by backward elimination.
pub fn select_features(
    m: &FeatureMatrix,
    forest: &ForestConfig,
    cfg: &FeatureSelectConfig,
    seed: u64,
) -> Result<Selection> {
    let (filtered, log) = filter_features(m, cfg)?;
    log::debug!(
        "filter removed {} low-variance and {} correlated features",
        log.low_variance.len(),
        log.correlated.len()
    );
    backward_eliminate(&filtered, forest, cfg, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub test_fraction: f64,
    pub select_features: bool,
    pub experimental_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: (1..=15).collect(),
            test_fraction: 0.2,
            select_features: true,
            experimental_only: true,
        }
    }
}

impl EvalConfig {
    fn rows(&self, m: &FeatureMatrix) -> FeatureMatrix {
        if self.experimental_only {
            m.filter_rows(|r| r.session == Session::Experimental)
        } else {
            m.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub seeds: Vec<u64>,
    pub reports: Vec<EvalReport>,
    pub summary: EvalSummary,
    pub features: Vec<String>,
}

/// Stratified random-split evaluation repeated over `cfg.seeds`. Feature
/// selection runs once on the first seed's training rows.
pub fn random_split_eval(
    m: &FeatureMatrix,
    forest: &ForestConfig,
    select: &FeatureSelectConfig,
    cfg: &EvalConfig,
) -> Result<SplitReport> {
    let data = cfg.rows(m);
    let labels = data.labels();
    let first = *cfg.seeds.first().ok_or(Error::EmptyInput)?;
    let features = if cfg.select_features {
        let (train, _) = stratified_split(&labels, cfg.test_fraction, first)?;
        select_features(&data.select_rows(&train), forest, select, first)?.features
    } else {
        data.columns().to_vec()
    };
    let data = data.select_named(&features)?;
    let reports = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (train, test) = stratified_split(&labels, cfg.test_fraction, seed)?;
            let test = data.select_rows(&test);
            let model = Model::fit(
                &data.select_rows(&train),
                &ForestConfig {
                    seed,
                    ..forest.clone()
                },
            )?;
            eval_metrics(&model.predict(&test)?, &test.labels())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitReport {
        seeds: cfg.seeds.clone(),
        summary: EvalSummary::of(&reports),
        reports,
        features,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantEval {
    pub participant: String,
    pub reports: Vec<EvalReport>,
    pub summary: EvalSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LopoReport {
    pub participants: Vec<ParticipantEval>,
    /// Across participants of each participant's seed-mean.
    pub balanced_accuracy: MeanSd,
    pub weighted_f1: MeanSd,
    pub kappa: MeanSd,
}

/// Leave-one-participant-out evaluation on all features; repeats vary only
/// the forest seed.
pub fn lopo_eval(m: &FeatureMatrix, forest: &ForestConfig, cfg: &EvalConfig) -> Result<LopoReport> {
    let data = cfg.rows(m);
    let ids = data.participants();
    if ids.len() < 2 {
        return Err(Error::SingleParticipant);
    }
    let jobs: Vec<(usize, u64)> = (0..ids.len())
        .flat_map(|p| cfg.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let reports = jobs
        .par_iter()
        .map(|&(p, seed)| {
            let held = &ids[p];
            let train = data.filter_rows(|r| &r.participant != held);
            let test = data.filter_rows(|r| &r.participant == held);
            let model = Model::fit(
                &train,
                &ForestConfig {
                    seed,
                    ..forest.clone()
                },
            )?;
            eval_metrics(&model.predict(&test)?, &test.labels())
        })
        .collect::<Result<Vec<_>>>()?;
    let participants: Vec<ParticipantEval> = ids
        .iter()
        .zip(reports.chunks(cfg.seeds.len().max(1)))
        .map(|(id, r)| ParticipantEval {
            participant: id.clone(),
            summary: EvalSummary::of(r),
            reports: r.to_vec(),
        })
        .collect();
    let across = |f: fn(&EvalSummary) -> f64| {
        MeanSd::of(
            &participants
                .iter()
                .map(|p| f(&p.summary))
                .collect::<Vec<_>>(),
        )
    };
    Ok(LopoReport {
        balanced_accuracy: across(|s| s.balanced_accuracy.mean),
        weighted_f1: across(|s| s.weighted_f1.mean),
        kappa: across(|s| s.kappa.mean),
        participants,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningCurveConfig {
    pub train_sizes: Vec<usize>,
    pub buffer: usize,
    pub seeds_per_point: usize,
    pub include_baseline: bool,
    pub baseline_windows_per_condition: usize,
    pub select_features: bool,
}

impl Default for LearningCurveConfig {
    fn default() -> Self {
        Self {
            train_sizes: (2..=11).collect(),
            buffer: 1,
            seeds_per_point: 10,
            include_baseline: false,
            baseline_windows_per_condition: 3,
            select_features: true,
        }
    }
}

impl LearningCurveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buffer == 0 || self.seeds_per_point == 0 || self.train_sizes.is_empty() {
            return Err(Error::InvalidConfig(
                "buffer, seeds_per_point and train_sizes must be nonzero".into(),
            ));
        }
        if self.train_sizes.contains(&0) && !self.include_baseline {
            return Err(Error::InvalidConfig(
                "training size 0 requires include_baseline".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub size: usize,
    /// Balanced accuracy across seeds; `None` when too few windows.
    pub accuracy: Option<MeanSd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantCurve {
    pub participant: String,
    pub features: Vec<String>,
    pub points: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub participants: Vec<ParticipantCurve>,
    /// Across participants of each participant's seed-mean, per size.
    pub population: Vec<(usize, MeanSd)>,
}

/// Row indices of one participant's training and test windows at `size`.
pub fn curve_split(
    m: &FeatureMatrix,
    participant: &str,
    size: usize,
    cfg: &LearningCurveConfig,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in Condition::ALL {
        let mut rows = m.rows_where(|r| {
            r.participant == participant && r.condition == c && r.session == Session::Experimental
        });
        rows.sort_by_key(|&i| m.meta()[i].window_index);
        if rows.len() < size + cfg.buffer + 1 {
            return Err(Error::InsufficientWindows {
                participant: participant.to_string(),
                size,
            });
        }
        train.extend_from_slice(&rows[..size]);
        test.extend_from_slice(&rows[size + cfg.buffer..]);
        if cfg.include_baseline {
            let mut base = m.rows_where(|r| {
                r.participant == participant && r.condition == c && r.session == Session::Baseline
            });
            base.sort_by_key(|&i| m.meta()[i].window_index);
            base.truncate(cfg.baseline_windows_per_condition);
            train.extend(base);
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Participant-specific accuracy against the number of training windows per
/// condition. Selection runs once per participant at the largest size.
pub fn learning_curve(
    m: &FeatureMatrix,
    forest: &ForestConfig,
    select: &FeatureSelectConfig,
    cfg: &LearningCurveConfig,
) -> Result<LearningCurve> {
    cfg.validate()?;
    let largest = *cfg.train_sizes.iter().max().unwrap();
    let curves = m
        .participants()
        .par_iter()
        .map(|id| -> Result<ParticipantCurve> {
            let features = match (cfg.select_features, curve_split(m, id, largest, cfg)) {
                (true, Ok((train, _))) => {
                    select_features(&m.select_rows(&train), forest, select, 1)?.features
                }
                (true, Err(e)) => {
                    log::warn!("{e}; using all features");
                    m.columns().to_vec()
                }
                (false, _) => m.columns().to_vec(),
            };
            let data = m.select_named(&features)?;
            let mut points = Vec::with_capacity(cfg.train_sizes.len());
            for &size in &cfg.train_sizes {
                let (train, test) = match curve_split(&data, id, size, cfg) {
                    Ok(s) => s,
                    Err(e) => {
                        log::warn!("{e}; excluded at this size");
                        points.push(CurvePoint {
                            size,
                            accuracy: None,
                        });
                        continue;
                    }
                };
                let (train, test) = (data.select_rows(&train), data.select_rows(&test));
                let accs = (0..cfg.seeds_per_point as u64)
                    .map(|s| {
                        let model = Model::fit(
                            &train,
                            &ForestConfig {
                                seed: s + 1,
                                ..forest.clone()
                            },
                        )?;
                        Ok(eval_metrics(&model.predict(&test)?, &test.labels())?.balanced_accuracy)
                    })
                    .collect::<Result<Vec<_>>>()?;
                points.push(CurvePoint {
                    size,
                    accuracy: Some(MeanSd::of(&accs)),
                });
            }
            Ok(ParticipantCurve {
                participant: id.clone(),
                features,
                points,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let population = cfg
        .train_sizes
        .iter()
        .enumerate()
        .map(|(k, &size)| {
            let means: Vec<f64> = curves
                .iter()
                .filter_map(|c| c.points[k].accuracy.map(|a| a.mean))
                .collect();
            (size, MeanSd::of(&means))
        })
        .collect();
    Ok(LearningCurve {
        participants: curves,
        population,
    })
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut e = k;
            while e + 1 < idx.len() && x[idx[e + 1]] == x[idx[k]] {
                e += 1;
            }
            let avg = (k + e) as f64 / 2.0 + 1.0;
            for &i in &idx[k..=e] {
                r[i] = avg;
            }
            k = e + 1;
        }
        r
    }
    pearson(&ranks(a), &ranks(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn meta(p: &str, c: usize, w: usize) -> RowMeta {
        RowMeta {
            participant: p.into(),
            session: Session::Experimental,
            condition: Condition::from_index(c).unwrap(),
            window_index: w,
        }
    }

    /// Three Gaussian blobs in the first `informative` columns, noise elsewhere.
    fn blobs(n_per: usize, informative: usize, noise: usize, sep: f64, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let cols = (0..informative)
            .map(|j| format!("inf{j}"))
            .chain((0..noise).map(|j| format!("noise{j}")))
            .collect();
        let mut m = FeatureMatrix::new(cols);
        for c in 0..3 {
            for w in 0..n_per {
                let row: Vec<f64> = (0..informative + noise)
                    .map(|j| {
                        let centre = if j < informative {
                            sep * ((c + j) % 3) as f64
                        } else {
                            0.0
                        };
                        centre + normal.sample(&mut rng)
                    })
                    .collect();
                m.push_row(meta(&format!("p{}", w % 4), c, w), &row)
                    .unwrap();
            }
        }
        m
    }

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 0, 1, 2];
        let r = eval_metrics(&y, &y).unwrap();
        assert_eq!(
            (r.balanced_accuracy, r.kappa, r.weighted_f1),
            (1.0, 1.0, 1.0)
        );
        for (c, row) in r.confusion.iter().enumerate() {
            assert_eq!(row[c], 100.0);
        }
    }

    #[test]
    fn constant_predictor() {
        let y = [0, 1, 2, 0, 1, 2, 0, 1, 2];
        let r = eval_metrics(&[1; 9], &y).unwrap();
        assert!((r.balanced_accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert!(r.kappa.abs() < 1e-15);
    }

    #[test]
    fn kappa_hand_computed() {
        let truth = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
        let pred = [0, 0, 0, 1, 1, 1, 2, 0, 2, 2, 1, 2];
        // Confusion rows (3,1,0) (1,2,1) (0,1,3): po = 8/12; column totals 4,4,4.
        let po = 8.0 / 12.0;
        let pe = 3.0 * (4.0 / 12.0) * (4.0 / 12.0);
        let r = eval_metrics(&pred, &truth).unwrap();
        assert!((r.kappa - (po - pe) / (1.0 - pe)).abs() < 1e-15);
        assert!((r.balanced_accuracy - (0.75 + 0.5 + 0.75) / 3.0).abs() < 1e-15);
        for row in &r.confusion {
            assert!((row.iter().sum::<f64>() - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn eval_rejects_empty() {
        assert!(matches!(eval_metrics(&[], &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn mean_sd_conventions() {
        let one = MeanSd::of(&[0.5]);
        assert_eq!(one.sd, 0.0);
        let two = MeanSd::of(&[0.8, 0.9]);
        assert!((two.sd - (0.005f64).sqrt()).abs() < 1e-15);
        let s = MeanSd {
            mean: 0.852,
            sd: 0.015,
            n: 15,
        };
        assert_eq!(s.percent(), "85.2% ± 1.5%");
    }

    #[test]
    fn separable_blobs_fit_perfectly() {
        let m = blobs(20, 2, 0, 10.0, 3);
        let model = Model::fit(
            &m,
            &ForestConfig {
                n_trees: 50,
                ..Default::default()
            },
        )
        .unwrap();
        let r = eval_metrics(&model.predict(&m).unwrap(), &m.labels()).unwrap();
        assert_eq!(r.balanced_accuracy, 1.0);
    }

    #[test]
    fn single_class_rejected() {
        let mut m = FeatureMatrix::new(vec!["a".into()]);
        for w in 0..5 {
            m.push_row(meta("p", 0, w), &[w as f64]).unwrap();
        }
        assert!(matches!(
            Model::fit(&m, &ForestConfig::default()),
            Err(Error::SingleClassTraining)
        ));
    }

    #[test]
    fn same_seed_same_forest() {
        let m = blobs(15, 3, 3, 1.0, 4);
        let cfg = ForestConfig {
            n_trees: 30,
            seed: 7,
            ..Default::default()
        };
        let a = Model::fit(&m, &cfg).unwrap();
        let b = Model::fit(&m, &cfg).unwrap();
        assert_eq!(a, b);
        let c = Model::fit(&m, &ForestConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.forest, c.forest);
    }

    #[test]
    fn forest_independent_of_threads() {
        let m = blobs(15, 3, 3, 1.0, 5);
        let cfg = ForestConfig {
            n_trees: 40,
            ..Default::default()
        };
        let fit = |n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap()
                .install(|| Model::fit(&m, &cfg).unwrap())
        };
        assert_eq!(fit(1), fit(3));
    }

    #[test]
    fn unlimited_depth_grows_pure_leaves() {
        let m = blobs(10, 1, 2, 0.5, 6);
        let model = Model::fit(
            &m,
            &ForestConfig {
                n_trees: 5,
                bootstrap: false,
                ..Default::default()
            },
        )
        .unwrap();
        for t in model.forest.trees() {
            for node in &t.nodes {
                if let Node::Leaf(p) = node {
                    assert!(p.iter().any(|&v| v == 1.0), "impure leaf {p:?}");
                }
            }
        }
    }

    #[test]
    fn scaler_uses_training_rows_only() {
        let m = blobs(10, 2, 0, 3.0, 8);
        let (train, test) = stratified_split(&m.labels(), 0.2, 1).unwrap();
        let tr = m.select_rows(&train);
        let s = StandardScaler::fit(&tr);
        let col: Vec<f64> = tr.column(0);
        assert_eq!(s.mean[0], col.iter().sum::<f64>() / col.len() as f64);
        // Altering test rows leaves the fitted parameters untouched.
        let mut altered = m.clone();
        for &i in &test {
            let p = altered.n_cols();
            altered.data[i * p] += 1e6;
        }
        assert_eq!(StandardScaler::fit(&altered.select_rows(&train)), s);
    }

    #[test]
    fn filter_drops_constant_and_duplicate() {
        let mut m = FeatureMatrix::new(vec![
            "a".into(),
            "const".into(),
            "a_copy".into(),
            "b".into(),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for w in 0..30 {
            let a: f64 = rng.random();
            let b: f64 = rng.random();
            m.push_row(meta("p", w % 3, w), &[a, 2.0, 3.0 * a + 1.0, b])
                .unwrap();
        }
        let (kept, log) = filter_features(&m, &FeatureSelectConfig::default()).unwrap();
        assert_eq!(kept.columns(), ["a", "b"]);
        assert_eq!(log.low_variance, ["const"]);
        assert_eq!(log.correlated[0].0, "a_copy");
    }

    #[test]
    fn filter_constructed_correlation() {
        // b = r a + sqrt(1 - r^2) e with a, e exactly orthogonal, zero mean, unit variance.
        let n = 40;
        let a: Vec<f64> = (0..n)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let e: Vec<f64> = (0..n)
            .map(|i| if (i / 2) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let r: f64 = 0.96;
        let b: Vec<f64> = a
            .iter()
            .zip(&e)
            .map(|(x, y)| r * x + (1.0 - r * r).sqrt() * y)
            .collect();
        let mut m = FeatureMatrix::new(vec!["a".into(), "b".into(), "e".into()]);
        for i in 0..n {
            m.push_row(meta("p", i % 3, i), &[a[i], b[i], e[i]])
                .unwrap();
        }
        assert!((pearson(&a, &b) - r).abs() < 1e-12);
        let (kept, log) = filter_features(&m, &FeatureSelectConfig::default()).unwrap();
        assert_eq!(kept.columns(), ["a", "e"]);
        assert_eq!(log.correlated.len(), 1);
    }

    #[test]
    fn filter_all_dropped() {
        let mut m = FeatureMatrix::new(vec!["c".into()]);
        for w in 0..6 {
            m.push_row(meta("p", w % 3, w), &[1.0]).unwrap();
        }
        assert!(matches!(
            filter_features(&m, &FeatureSelectConfig::default()),
            Err(Error::AllFeaturesDropped)
        ));
    }

    #[test]
    fn importance_ranks_informative_feature() {
        let m = blobs(30, 1, 4, 4.0, 11);
        let forest = ForestConfig {
            n_trees: 60,
            ..Default::default()
        };
        let imp = permutation_importance(&m, &forest, &FeatureSelectConfig::default(), 1).unwrap();
        let top = argmax(&imp.importance);
        assert_eq!(m.columns()[top], "inf0");
        for j in 1..5 {
            assert!(
                imp.importance[j].abs() < 0.02,
                "{}: {}",
                m.columns()[j],
                imp.importance[j]
            );
        }
        let again =
            permutation_importance(&m, &forest, &FeatureSelectConfig::default(), 1).unwrap();
        assert_eq!(imp, again);
    }

    #[test]
    fn elimination_keeps_informative() {
        let m = blobs(30, 5, 45, 1.5, 12);
        let forest = ForestConfig {
            n_trees: 80,
            ..Default::default()
        };
        let sel = backward_eliminate(&m, &forest, &FeatureSelectConfig::default(), 1).unwrap();
        let hits = sel.features.iter().filter(|f| f.starts_with("inf")).count();
        assert!(hits >= 4, "{:?}", sel.features);
        let five = m.select_columns(&[0, 1, 2, 3, 4]);
        let sel5 = backward_eliminate(&five, &forest, &FeatureSelectConfig::default(), 1).unwrap();
        assert_eq!(sel5.features.len(), 5);
    }

    #[test]
    fn split_is_stratified() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let (train, test) = stratified_split(&labels, 0.2, 3).unwrap();
        assert_eq!(test.len(), 12);
        assert_eq!(train.len(), 48);
        for c in 0..3 {
            assert_eq!(test.iter().filter(|&&i| labels[i] == c).count(), 4);
        }
        assert!(matches!(
            stratified_split(&[0, 0, 1, 1], 0.2, 1),
            Err(Error::ClassMissingInSplit(_))
        ));
    }

    #[test]
    fn lopo_two_participants_two_folds() {
        let m = blobs(12, 2, 1, 5.0, 13)
            .filter_rows(|r| r.participant == "p0" || r.participant == "p1");
        let cfg = EvalConfig {
            seeds: vec![1, 2],
            ..Default::default()
        };
        let r = lopo_eval(
            &m,
            &ForestConfig {
                n_trees: 20,
                ..Default::default()
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(r.participants.len(), 2);
        assert!(r.balanced_accuracy.mean > 0.9);
        let one = m.filter_rows(|r| r.participant == "p0");
        assert!(matches!(
            lopo_eval(&one, &ForestConfig::default(), &cfg),
            Err(Error::SingleParticipant)
        ));
    }

    #[test]
    fn curve_split_arithmetic() {
        let mut m = FeatureMatrix::new(vec!["a".into()]);
        for c in 0..3 {
            for w in 0..14 {
                m.push_row(meta("p", c, w), &[w as f64]).unwrap();
            }
            for w in 0..3 {
                let mut r = meta("p", c, w);
                r.session = Session::Baseline;
                m.push_row(r, &[0.0]).unwrap();
            }
        }
        let mut cfg = LearningCurveConfig::default();
        let (train, test) = curve_split(&m, "p", 2, &cfg).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(test.len(), 3 * 11);
        assert!(test.iter().all(|&i| m.meta()[i].window_index >= 3));
        cfg.include_baseline = true;
        assert_eq!(curve_split(&m, "p", 2, &cfg).unwrap().0.len(), 15);
        let (base_only, _) = curve_split(&m, "p", 0, &cfg).unwrap();
        assert_eq!(base_only.len(), 9);
        assert!(base_only
            .iter()
            .all(|&i| m.meta()[i].session == Session::Baseline));
        assert!(matches!(
            curve_split(&m, "p", 13, &cfg),
            Err(Error::InsufficientWindows { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let m = blobs(3, 2, 1, 1.0, 14);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        m.write_csv(&path).unwrap();
        assert_eq!(FeatureMatrix::read_csv(&path).unwrap(), m);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
