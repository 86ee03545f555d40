//! k-nearest-neighbour collaborative filtering over pre-defined rating
//! similarities (cosine, mean-squared-difference, Pearson, shrunk Pearson)
//! or learned embedding similarities, plus the sweep harness that traces
//! accuracy as a function of the neighbourhood size.
//!
//! Pre-defined metrics are computed over the *common support* of two
//! rating vectors — the entries both sides rated — and pairs with no
//! overlap get similarity 0. This is where such metrics degrade under
//! scarce data, and the learned tables are the drop-in alternative.

use std::fmt::Write as _;
use std::path::Path;

use crate::basenet::{self, NetConfig};
use crate::dataio::{LabelSet, TrainIndex};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::predictor::{metrics, EvalReport};
use crate::tensor::Tensor;

/// Pre-defined rating-vector similarity metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    /// Inverse mean squared difference, `1 / (1 + msd)`.
    Msd,
    Pearson,
    /// Pearson damped by co-rating support, `r · n / (n + shrinkage)`.
    PearsonShrunk,
}

impl Metric {
    pub fn parse(name: &str) -> Result<Metric> {
        match name.to_ascii_lowercase().as_str() {
            "cosine" => Ok(Metric::Cosine),
            "msd" => Ok(Metric::Msd),
            "pearson" => Ok(Metric::Pearson),
            "pearson_shrunk" => Ok(Metric::PearsonShrunk),
            other => Err(Error::Config(format!(
                "unknown metric `{other}` (expected cosine, msd, pearson or pearson_shrunk)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Msd => "msd",
            Metric::Pearson => "pearson",
            Metric::PearsonShrunk => "pearson_shrunk",
        }
    }

    pub const ALL: [Metric; 4] = [Metric::Cosine, Metric::Msd, Metric::Pearson, Metric::PearsonShrunk];
}

/// Which side of the matrix neighbourhoods are formed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    User,
    Item,
}

impl Mode {
    pub fn parse(name: &str) -> Result<Mode> {
        match name.to_ascii_lowercase().as_str() {
            "user" => Ok(Mode::User),
            "item" => Ok(Mode::Item),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected user or item)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::User => "user",
            Mode::Item => "item",
        }
    }
}

/// Where a similarity table came from; names the `source` column of sweep
/// output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Predefined(Metric),
    Learned,
}

impl Source {
    pub fn name(&self) -> &'static str {
        match self {
            Source::Predefined(m) => m.name(),
            Source::Learned => "learned",
        }
    }
}

/// A dense symmetric similarity table over users or items, with the
/// co-rating support count per pair (zero for learned tables, which are
/// not support-based).
pub struct SimilarityTable {
    pub mode: Mode,
    pub source: Source,
    /// `q×q` similarities, unit diagonal.
    pub sim: Tensor,
    /// `q×q` co-rating counts.
    pub support: Vec<u32>,
}

impl SimilarityTable {
    pub fn len(&self) -> usize {
        self.sim.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        self.sim.data()[a * self.len() + b]
    }
}

/// Accumulated per-pair statistics over the common support.
#[derive(Default, Clone, Copy)]
struct PairStats {
    n: usize,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
    sdd: f64,
}

fn common_stats(a: &[(usize, f64)], b: &[(usize, f64)]) -> PairStats {
    let mut st = PairStats::default();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                let (x, y) = (a[i].1, b[j].1);
                st.n += 1;
                st.sx += x;
                st.sy += y;
                st.sxx += x * x;
                st.syy += y * y;
                st.sxy += x * y;
                let d = x - y;
                st.sdd += d * d;
                i += 1;
                j += 1;
            }
        }
    }
    st
}

fn metric_value(metric: Metric, st: &PairStats, shrinkage: f64) -> f64 {
    if st.n == 0 {
        return 0.0;
    }
    match metric {
        Metric::Cosine => {
            let denom2 = st.sxx * st.syy;
            if denom2 <= 0.0 {
                0.0
            } else {
                st.sxy / denom2.sqrt()
            }
        }
        Metric::Msd => 1.0 / (1.0 + st.sdd / st.n as f64),
        Metric::Pearson | Metric::PearsonShrunk => {
            let n = st.n as f64;
            let cov = st.sxy - st.sx * st.sy / n;
            let vx = st.sxx - st.sx * st.sx / n;
            let vy = st.syy - st.sy * st.sy / n;
            if vx <= 1e-12 || vy <= 1e-12 {
                return 0.0;
            }
            let r = cov / (vx * vy).sqrt();
            match metric {
                Metric::PearsonShrunk => r * n / (n + shrinkage),
                _ => r,
            }
        }
    }
}

/// Default Pearson shrinkage.
pub const DEFAULT_SHRINKAGE: f64 = 100.0;

/// Computes a pre-defined similarity table over the training index. Each
/// pair is scored on its common support only; pairs that share no rated
/// entries get similarity 0 and support 0. The diagonal is pinned to 1.
pub fn compute_metric(
    index: &TrainIndex,
    mode: Mode,
    metric: Metric,
    shrinkage: f64,
) -> Result<SimilarityTable> {
    if shrinkage < 0.0 || !shrinkage.is_finite() {
        return Err(Error::Config(format!("shrinkage must be non-negative, got {shrinkage}")));
    }
    let vectors = match mode {
        Mode::User => &index.by_user,
        Mode::Item => &index.by_item,
    };
    let q = vectors.len();
    let mut sim = Tensor::zeros(vec![q, q]);
    let mut support = vec![0u32; q * q];
    let data = sim.data_mut();
    for a in 0..q {
        data[a * q + a] = 1.0;
        support[a * q + a] = vectors[a].len() as u32;
        for b in (a + 1)..q {
            let st = common_stats(&vectors[a], &vectors[b]);
            let v = metric_value(metric, &st, shrinkage);
            data[a * q + b] = v;
            data[b * q + a] = v;
            support[a * q + b] = st.n as u32;
            support[b * q + a] = st.n as u32;
        }
    }
    Ok(SimilarityTable { mode, source: Source::Predefined(metric), sim, support })
}

fn dense_inputs(index: &TrainIndex, mode: Mode) -> Tensor {
    let (q, width, vectors) = match mode {
        Mode::User => (index.n_users, index.n_items, &index.by_user),
        Mode::Item => (index.n_items, index.n_users, &index.by_item),
    };
    let mut dense = Tensor::zeros(vec![q, width]);
    for (i, vec) in vectors.iter().enumerate() {
        let row = dense.row_mut(i);
        for &(j, v) in vec {
            row[j] = v;
        }
    }
    dense
}

/// Builds a learned similarity table by running the trained branch over
/// the full training matrix and taking scaled cosine similarities of the
/// embeddings. Learned tables carry no support counts.
pub fn import_learned(
    store: &ParamStore,
    net: &NetConfig,
    index: &TrainIndex,
    mode: Mode,
) -> Result<SimilarityTable> {
    let prefix = match mode {
        Mode::User => "row",
        Mode::Item => "col",
    };
    let emb = basenet::eval_embeddings(store, prefix, &dense_inputs(index, mode), net)?;
    let sim = basenet::eval_scaled_similarity(&emb)?;
    let q = sim.shape()[0];
    Ok(SimilarityTable { mode, source: Source::Learned, sim, support: vec![0; q * q] })
}

/// Loads a learned similarity table from the text export format.
pub fn import_learned_file(path: &Path, mode: Mode) -> Result<SimilarityTable> {
    let sim = basenet::import_similarity(path)?;
    let q = sim.shape()[0];
    Ok(SimilarityTable { mode, source: Source::Learned, sim, support: vec![0; q * q] })
}

/// Predicts one rating as the similarity-weighted mean of the `k` most
/// similar neighbours that rated the target, ties broken toward the lower
/// index. With no usable neighbours, or total weight indistinguishable
/// from zero, falls back to the global training mean. The result is
/// clamped to the label range.
pub fn knn_predict(
    table: &SimilarityTable,
    index: &TrainIndex,
    labels: &LabelSet,
    user: usize,
    item: usize,
    k: usize,
) -> Result<f64> {
    if user >= index.n_users || item >= index.n_items {
        return Err(Error::Domain(format!(
            "query ({user}, {item}) outside {}×{} matrix",
            index.n_users, index.n_items
        )));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let (this, raters) = match table.mode {
        Mode::User => (user, &index.by_item[item]),
        Mode::Item => (item, &index.by_user[user]),
    };
    let expected = match table.mode {
        Mode::User => index.n_users,
        Mode::Item => index.n_items,
    };
    if table.len() != expected {
        return Err(Error::Shape {
            op: "knn_predict",
            detail: format!("{} table of size {} for {expected} candidates", table.mode.name(), table.len()),
        });
    }
    let mut neighbours: Vec<(f64, usize, f64)> = raters
        .iter()
        .filter(|&&(other, _)| other != this)
        .map(|&(other, value)| (table.similarity(this, other), other, value))
        .collect();
    neighbours.sort_unstable_by(|a, b| {
        b.0.partial_cmp(&a.0).expect("similarities are finite").then(a.1.cmp(&b.1))
    });
    neighbours.truncate(k);

    let mut wsum = 0.0;
    let mut wtot = 0.0;
    for &(s, _, v) in &neighbours {
        wsum += s * v;
        wtot += s;
    }
    let raw = if wtot.abs() < 1e-12 { index.mean } else { wsum / wtot };
    Ok(raw.clamp(labels.min(), labels.max()))
}

/// Predicts every target and reports RMSE/MAE.
pub fn evaluate_knn(
    table: &SimilarityTable,
    index: &TrainIndex,
    labels: &LabelSet,
    targets: &[(usize, usize, f64)],
    k: usize,
) -> Result<EvalReport> {
    if targets.is_empty() {
        return Err(Error::Domain("evaluation split is empty".into()));
    }
    let mut preds = Vec::with_capacity(targets.len());
    let mut actual = Vec::with_capacity(targets.len());
    for &(u, i, v) in targets {
        preds.push(knn_predict(table, index, labels, u, i, k)?);
        actual.push(v);
    }
    let (rmse, mae) = metrics(&preds, &actual)?;
    Ok(EvalReport { rmse, mae, count: targets.len() })
}

/// One line of sweep output.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub source: &'static str,
    pub mode: &'static str,
    pub k: usize,
    pub rmse: f64,
    pub mae: f64,
}

/// Evaluates every table at every neighbourhood size.
pub fn sweep(
    tables: &[SimilarityTable],
    index: &TrainIndex,
    labels: &LabelSet,
    targets: &[(usize, usize, f64)],
    ks: &[usize],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(tables.len() * ks.len());
    for table in tables {
        for &k in ks {
            let report = evaluate_knn(table, index, labels, targets, k)?;
            rows.push(SweepRow {
                source: table.source.name(),
                mode: table.mode.name(),
                k,
                rmse: report.rmse,
                mae: report.mae,
            });
        }
    }
    Ok(rows)
}

/// Writes sweep rows as CSV: `source,mode,k,rmse,mae`.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from("source,mode,k,rmse,mae\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.source, r.mode, r.k, r.rmse, r.mae);
    }
    std::fs::write(path, out)?;
    Ok(())
}
