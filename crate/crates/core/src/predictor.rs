//! Test-time inference and evaluation.
//!
//! Prediction runs the evaluation-mode network once to embed every user
//! and item, then processes the requested cells in grid-shaped chunks:
//! users and items are independently shuffled and cut into blocks, and
//! each (user-block × item-block) grid runs factored mean-field inference
//! (the block's entry similarity is a Kronecker product of the block's
//! user and item similarities, so it is never materialized). A predicted
//! rating is the expectation of the final label distribution; multiple
//! repeats re-draw the partition and average.

use crate::basenet::{
    bilinear_scores, eval_embeddings, scaled_similarity, unary_from_scores, NetConfig,
};
use crate::dataio::{LabelSet, TrainIndex};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::meanfield::{mean_field_factored, MeanFieldConfig};
use crate::params::ParamStore;
use crate::rng::subsystem_rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::path::Path;

/// Inference-time settings. `mf.layers == 0` disables the CRF refinement
/// (predictions come straight from the base network).
#[derive(Debug, Clone, Copy)]
pub struct PredictConfig {
    pub chunk_rows: usize,
    pub chunk_cols: usize,
    /// Number of independent chunk partitions to average over.
    pub repeats: usize,
    pub mf: MeanFieldConfig,
    pub seed: u64,
}

/// Accuracy of a set of predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub rmse: f64,
    pub mae: f64,
    pub count: usize,
}

/// Expected rating under a label distribution: Σ_u L_u · P[u].
pub fn decode_expected(probs: &[f64], labels: &LabelSet) -> Result<f64> {
    if probs.len() != labels.count() {
        return Err(Error::Shape {
            op: "decode_expected",
            detail: format!("{} probabilities for {} labels", probs.len(), labels.count()),
        });
    }
    Ok(probs.iter().zip(labels.values()).map(|(p, l)| p * l).sum())
}

/// RMSE and MAE between matched prediction/target slices.
pub fn metrics(preds: &[f64], actual: &[f64]) -> Result<(f64, f64)> {
    if preds.len() != actual.len() || preds.is_empty() {
        return Err(Error::Domain(format!(
            "metrics need matching non-empty slices, got {} vs {}",
            preds.len(),
            actual.len()
        )));
    }
    let n = preds.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (p, a) in preds.iter().zip(actual) {
        let d = p - a;
        se += d * d;
        ae += d.abs();
    }
    Ok(((se / n).sqrt(), ae / n))
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), c], data).expect("consistent shape")
}

/// Final label distributions for one user-block × item-block grid,
/// flat row-major: cell (local i, local j) at row i·|cols|+j.
fn block_distributions(
    store: &ParamStore,
    u_all: &Tensor,
    v_all: &Tensor,
    rows: &[usize],
    cols: &[usize],
    compat: &Tensor,
    mf: &MeanFieldConfig,
) -> Result<Tensor> {
    let mut g = Graph::new(Mode::Eval);
    let u = g.constant(gather_rows(u_all, rows))?;
    let v = g.constant(gather_rows(v_all, cols))?;
    let scores = bilinear_scores(&mut g, store, u, v)?;
    let (q0, phi) = unary_from_scores(&mut g, scores)?;
    let su = scaled_similarity(&mut g, u)?;
    let sv = scaled_similarity(&mut g, v)?;
    let q0v = g.value(q0).clone();
    let phiv = g.value(phi).clone();
    let suv = g.value(su).clone();
    let svv = g.value(sv).clone();
    drop(g);
    mean_field_factored(&phiv, &q0v, &suv, &svv, compat, mf)
}

/// Predicts a rating for every `(user, item)` query.
///
/// Dense network inputs are assembled from the training index only, so
/// held-out ratings never leak into inference. Results are deterministic
/// for a given (store, config, seed).
pub fn predict(
    store: &ParamStore,
    net: &NetConfig,
    labels: &LabelSet,
    compat: &Tensor,
    index: &TrainIndex,
    queries: &[(usize, usize)],
    cfg: &PredictConfig,
) -> Result<Vec<f64>> {
    let (n, m) = (index.n_users, index.n_items);
    if cfg.chunk_rows == 0 || cfg.chunk_cols == 0 || cfg.repeats == 0 {
        return Err(Error::Config("chunk dimensions and repeats must be positive".into()));
    }
    for &(u, i) in queries {
        if u >= n || i >= m {
            return Err(Error::Domain(format!("query ({u}, {i}) outside {n}×{m} matrix")));
        }
    }
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    // Embed everyone once; evaluation-mode batch norm has no batch
    // coupling, so one big pass equals any chunked pass.
    let mut rows_input = Tensor::zeros(vec![n, m]);
    for (u, list) in index.by_user.iter().enumerate() {
        let dst = rows_input.row_mut(u);
        for &(item, value) in list {
            dst[item] = value;
        }
    }
    let u_all = eval_embeddings(store, "row", &rows_input, net)?;
    drop(rows_input);
    let mut cols_input = Tensor::zeros(vec![m, n]);
    for (i, list) in index.by_item.iter().enumerate() {
        let dst = cols_input.row_mut(i);
        for &(user, value) in list {
            dst[user] = value;
        }
    }
    let v_all = eval_embeddings(store, "col", &cols_input, net)?;
    drop(cols_input);

    let (lo, hi) = (labels.min(), labels.max());
    let mut sums = vec![0.0; queries.len()];
    for rep in 0..cfg.repeats {
        let mut rng = subsystem_rng(cfg.seed, &format!("chunk.rep{rep}"));
        let mut user_order: Vec<usize> = (0..n).collect();
        let mut item_order: Vec<usize> = (0..m).collect();
        user_order.shuffle(&mut rng);
        item_order.shuffle(&mut rng);
        let user_blocks: Vec<&[usize]> = user_order.chunks(cfg.chunk_rows).collect();
        let item_blocks: Vec<&[usize]> = item_order.chunks(cfg.chunk_cols).collect();
        let mut user_pos = vec![(0usize, 0usize); n];
        for (b, blk) in user_blocks.iter().enumerate() {
            for (local, &u) in blk.iter().enumerate() {
                user_pos[u] = (b, local);
            }
        }
        let mut item_pos = vec![(0usize, 0usize); m];
        for (b, blk) in item_blocks.iter().enumerate() {
            for (local, &i) in blk.iter().enumerate() {
                item_pos[i] = (b, local);
            }
        }
        let mut grouped: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (qi, &(u, i)) in queries.iter().enumerate() {
            grouped
                .entry((user_pos[u].0, item_pos[i].0))
                .or_default()
                .push(qi);
        }
        for ((rb, cb), qidx) in grouped {
            let rows = user_blocks[rb];
            let cols = item_blocks[cb];
            let probs = block_distributions(store, &u_all, &v_all, rows, cols, compat, &cfg.mf)?;
            for qi in qidx {
                let (u, i) = queries[qi];
                let flat = user_pos[u].1 * cols.len() + item_pos[i].1;
                let r = decode_expected(probs.row(flat), labels)?;
                sums[qi] += r.clamp(lo, hi);
            }
        }
    }
    Ok(sums.into_iter().map(|s| s / cfg.repeats as f64).collect())
}

/// Predicts every target cell and reports RMSE/MAE against the held-out
/// values. An empty target list is an error: a report over nothing would
/// be meaningless.
pub fn evaluate(
    store: &ParamStore,
    net: &NetConfig,
    labels: &LabelSet,
    compat: &Tensor,
    index: &TrainIndex,
    targets: &[(usize, usize, f64)],
    cfg: &PredictConfig,
) -> Result<EvalReport> {
    if targets.is_empty() {
        return Err(Error::Domain("evaluation split is empty".into()));
    }
    let queries: Vec<(usize, usize)> = targets.iter().map(|&(u, i, _)| (u, i)).collect();
    let actual: Vec<f64> = targets.iter().map(|&(_, _, v)| v).collect();
    let preds = predict(store, net, labels, compat, index, &queries, cfg)?;
    let (rmse, mae) = metrics(&preds, &actual)?;
    Ok(EvalReport { rmse, mae, count: targets.len() })
}

/// Writes predictions as CSV: `user,item,prediction`.
pub fn write_predictions(
    path: &Path,
    queries: &[(usize, usize)],
    preds: &[f64],
) -> Result<()> {
    use std::io::Write;
    if queries.len() != preds.len() {
        return Err(Error::Domain("query/prediction length mismatch".into()));
    }
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "user,item,prediction")?;
    for (&(u, i), p) in queries.iter().zip(preds) {
        writeln!(w, "{u},{i},{p}")?;
    }
    w.flush()?;
    Ok(())
}

/// Renders an evaluation report as flat JSON-like text with the config
/// echo that produced it (escaped as a string literal).
pub fn render_eval_report(report: &EvalReport, config_echo: &str) -> String {
    let escaped: String = config_echo.escape_default().collect();
    format!(
        "{{\"rmse\": {}, \"mae\": {}, \"count\": {}, \"config\": \"{escaped}\"}}\n",
        report.rmse, report.mae, report.count
    )
}

/// Writes the report in the [`render_eval_report`] format.
pub fn write_eval_report(path: &Path, report: &EvalReport, config_echo: &str) -> Result<()> {
    std::fs::write(path, render_eval_report(report, config_echo))?;
    Ok(())
}
