//! The two-branch prediction network.
//!
//! A row branch embeds each user's dense rating row and a column branch
//! embeds each item's dense rating column; both are multilayer perceptrons
//! (affine → batch norm → ReLU → dropout per layer, with ReLU and dropout
//! omitted after the last layer, batch norm kept). A bilinear decoder
//! turns an embedding pair into one score per label:
//!
//! ```text
//! G[(i,j), u] = U_i · B_u · V_jᵀ
//! ```
//!
//! Scores become base label distributions by a row softmax; unary
//! potentials are their negative log, floored and clamped. Learned entry
//! similarities come from cosine similarity between embeddings, rescaled
//! from [−1, 1] to [0, 1] per branch and multiplied per entry pair.

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, NodeId};
use crate::params::ParamStore;
use crate::rng::subsystem_rng;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Probability floor before the log, keeping potentials finite.
pub const PROB_FLOOR: f64 = 1e-12;
/// Hard ceiling on unary potentials.
pub const PHI_MAX: f64 = 50.0;

/// Architecture hyperparameters shared by both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Widths of the MLP layers; the last entry is the embedding size d.
    pub hidden: Vec<usize>,
    /// Dropout rate applied after every non-final layer during training.
    pub dropout: f64,
    pub bn_eps: f64,
    /// Running statistics update: r ← momentum·r + (1−momentum)·batch.
    pub bn_momentum: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { hidden: vec![512, 128], dropout: 0.75, bn_eps: 1e-5, bn_momentum: 0.9 }
    }
}

impl NetConfig {
    pub fn embed_dim(&self) -> usize {
        *self.hidden.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive and non-empty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// Batch statistics one training forward produced, to be folded into the
/// store's running estimates after the optimizer step.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean_name: String,
    pub var_name: String,
    pub mean: Tensor,
    pub var: Tensor,
}

/// Creates every model parameter in the store with deterministic
/// initialization from the `"init"` stream of `seed`.
///
/// Weights use the uniform Glorot bound ±√(6/(fan_in+fan_out)); decoder
/// matrices carry an extra 1/d factor so initial scores stay small (the
/// bilinear form sums d² products). Biases start at zero, batch-norm
/// scale/shift at 1/0, running statistics at 0/1.
///
/// Fill order is fixed: row branch layers, column branch layers, then the
/// decoder matrices in label order.
pub fn init_params(
    store: &mut ParamStore,
    n_users: usize,
    n_items: usize,
    n_labels: usize,
    cfg: &NetConfig,
    seed: u64,
) -> Result<()> {
    cfg.validate()?;
    if n_users == 0 || n_items == 0 || n_labels == 0 {
        return Err(Error::Config("matrix dimensions and label count must be positive".into()));
    }
    let mut rng = subsystem_rng(seed, "init");
    // Row branch reads rating rows (length n_items); column branch reads
    // rating columns (length n_users).
    for (prefix, in_dim) in [("row", n_items), ("col", n_users)] {
        let mut prev = in_dim;
        for (i, &width) in cfg.hidden.iter().enumerate() {
            let bound = glorot_bound(prev, width);
            let w: Vec<f64> = (0..prev * width).map(|_| rng.gen_range(-bound..bound)).collect();
            store.insert(&format!("{prefix}.l{i}.w"), Tensor::new(vec![prev, width], w)?, true);
            store.insert(&format!("{prefix}.l{i}.b"), Tensor::zeros(vec![width]), true);
            store.insert(&format!("{prefix}.l{i}.bn.gamma"), Tensor::full(vec![width], 1.0), true);
            store.insert(&format!("{prefix}.l{i}.bn.beta"), Tensor::zeros(vec![width]), true);
            store.insert(&format!("{prefix}.l{i}.bn.rmean"), Tensor::zeros(vec![width]), false);
            store.insert(&format!("{prefix}.l{i}.bn.rvar"), Tensor::full(vec![width], 1.0), false);
            prev = width;
        }
    }
    let d = cfg.embed_dim();
    let bound = glorot_bound(d, d);
    for u in 0..n_labels {
        let b: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-bound..bound)).collect();
        store.insert(&format!("dec.b{u}"), Tensor::new(vec![d, d], b)?, true);
    }
    Ok(())
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Number of MLP layers the stored parameters describe for a prefix.
fn layer_count(store: &ParamStore, prefix: &str) -> usize {
    let mut n = 0;
    while store.contains(&format!("{prefix}.l{n}.w")) {
        n += 1;
    }
    n
}

/// Number of decoder matrices (= labels) in the store.
pub fn decoder_count(store: &ParamStore) -> usize {
    let mut n = 0;
    while store.contains(&format!("dec.b{n}")) {
        n += 1;
    }
    n
}

/// Runs one branch over a batch of dense inputs, returning the embedding
/// node and (in training mode) the batch statistics every batch-norm
/// layer produced.
pub fn branch_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    input: NodeId,
    cfg: &NetConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(NodeId, Vec<BnBatchStats>)> {
    cfg.validate()?;
    let layers = layer_count(store, prefix);
    if layers != cfg.hidden.len() {
        return Err(Error::Config(format!(
            "store has {layers} `{prefix}` layers but the config describes {}",
            cfg.hidden.len()
        )));
    }
    let mut x = input;
    let mut stats = Vec::new();
    for i in 0..layers {
        let w = g.param(store, &format!("{prefix}.l{i}.w"))?;
        let b = g.param(store, &format!("{prefix}.l{i}.b"))?;
        let gamma = g.param(store, &format!("{prefix}.l{i}.bn.gamma"))?;
        let beta = g.param(store, &format!("{prefix}.l{i}.bn.beta"))?;
        let affine = g.matmul(x, w, false, false)?;
        let affine = g.add_bias(affine, b)?;
        x = match g.mode() {
            Mode::Train => {
                let (y, mean, var) = g.batchnorm_train(affine, gamma, beta, cfg.bn_eps)?;
                stats.push(BnBatchStats {
                    mean_name: format!("{prefix}.l{i}.bn.rmean"),
                    var_name: format!("{prefix}.l{i}.bn.rvar"),
                    mean,
                    var,
                });
                y
            }
            Mode::Eval => {
                let rmean = store.tensor(&format!("{prefix}.l{i}.bn.rmean"))?.clone();
                let rvar = store.tensor(&format!("{prefix}.l{i}.bn.rvar"))?.clone();
                g.batchnorm_eval(affine, gamma, beta, &rmean, &rvar, cfg.bn_eps)?
            }
        };
        if i + 1 < layers {
            x = g.relu(x)?;
            x = g.dropout(x, cfg.dropout, rng)?;
        }
    }
    Ok((x, stats))
}

/// Folds freshly produced batch statistics into the running estimates.
pub fn apply_bn_updates(
    store: &mut ParamStore,
    stats: &[BnBatchStats],
    momentum: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("batch-norm momentum {momentum} outside [0,1]")));
    }
    for s in stats {
        for (name, batch) in [(&s.mean_name, &s.mean), (&s.var_name, &s.var)] {
            let old = store.tensor(name)?;
            if old.shape() != batch.shape() {
                return Err(Error::Shape {
                    op: "bn_update",
                    detail: format!("{name}: {:?} vs {:?}", old.shape(), batch.shape()),
                });
            }
            let merged: Vec<f64> = old
                .data()
                .iter()
                .zip(batch.data())
                .map(|(r, b)| momentum * r + (1.0 - momentum) * b)
                .collect();
            store.set(name, Tensor::new(batch.shape().to_vec(), merged)?)?;
        }
    }
    Ok(())
}

/// Bilinear decoder over all row pairs: embeddings `u` (a×d) and `v`
/// (b×d) become scores of shape (a·b) × p, cell (i,j) at flat row i·b+j.
///
/// Scores are divided by the embedding width d. The decoder family is
/// unchanged (the learned matrix absorbs any constant); the division keeps
/// the per-step score movement of a coordinate-wise optimizer O(1) instead
/// of O(d), without which the softmax saturates within the first few
/// updates and gradients die at the probability floor.
pub fn bilinear_scores(
    g: &mut Graph,
    store: &ParamStore,
    u: NodeId,
    v: NodeId,
) -> Result<NodeId> {
    let p = decoder_count(store);
    if p == 0 {
        return Err(Error::Config("store holds no decoder matrices".into()));
    }
    let d = g.value(u).cols() as f64;
    let mut parts = Vec::with_capacity(p);
    for label in 0..p {
        let b = g.param(store, &format!("dec.b{label}"))?;
        let raw = g.bilinear(u, b, v)?;
        let score = g.mul_scalar(raw, 1.0 / d)?;
        parts.push(score);
    }
    g.stack_cols_flat(&parts)
}

/// Base distributions and unary potentials from raw scores:
/// `Q₀ = softmax_rows(scores)`, `Φ = min(−ln(max(Q₀, 1e-12)), 50)`.
pub fn unary_from_scores(g: &mut Graph, scores: NodeId) -> Result<(NodeId, NodeId)> {
    let q0 = g.softmax_rows(scores)?;
    let logq = g.log_clamped(q0, PROB_FLOOR)?;
    let neg = g.neg(logq)?;
    let phi = g.clamp_max(neg, PHI_MAX)?;
    Ok((q0, phi))
}

/// Cosine similarity between embedding rows, rescaled from [−1, 1] to
/// [0, 1]: s = (cos + 1) / 2. Symmetric with a unit diagonal.
pub fn scaled_similarity(g: &mut Graph, embeddings: NodeId) -> Result<NodeId> {
    let cos = g.cosine_rows(embeddings)?;
    let half = g.mul_scalar(cos, 0.5)?;
    g.add_scalar(half, 0.5)
}

/// Evaluation-mode embeddings for a dense input block (tensor in, tensor
/// out; no training side effects).
pub fn eval_embeddings(
    store: &ParamStore,
    prefix: &str,
    input: &Tensor,
    cfg: &NetConfig,
) -> Result<Tensor> {
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(input.clone())?;
    let mut rng = subsystem_rng(0, "eval-noop");
    let (out, _) = branch_forward(&mut g, store, prefix, x, cfg, &mut rng)?;
    Ok(g.value(out).clone())
}

/// Evaluation-mode scaled cosine similarity over embedding rows.
pub fn eval_scaled_similarity(embeddings: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(embeddings.clone())?;
    let s = scaled_similarity(&mut g, x)?;
    Ok(g.value(s).clone())
}

/// Writes a square similarity matrix as text: a count line, then one
/// space-separated row per line. Values print with enough digits to
/// round-trip f64 exactly.
pub fn export_similarity(path: &Path, sim: &Tensor) -> Result<()> {
    if !sim.is_matrix() || sim.rows() != sim.cols() {
        return Err(Error::Shape {
            op: "export_similarity",
            detail: format!("expected square matrix, got {:?}", sim.shape()),
        });
    }
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", sim.rows())?;
    for i in 0..sim.rows() {
        let row: Vec<String> = sim.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn import_similarity(path: &Path) -> Result<Tensor> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let parse_err = |line: usize, msg: &str| Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    };
    let n: usize = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing size line"))??
        .trim()
        .parse()
        .map_err(|_| parse_err(1, "bad size"))?;
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| parse_err(i + 2, "missing row"))??;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(i + 2, "bad value"))?;
        if row.len() != n {
            return Err(parse_err(i + 2, "wrong row length"));
        }
        data.extend(row);
    }
    Tensor::new(vec![n, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_cfg() -> NetConfig {
        NetConfig { hidden: vec![6, 3], dropout: 0.5, bn_eps: 1e-5, bn_momentum: 0.9 }
    }

    fn tiny_store(seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_params(&mut store, 4, 5, 3, &tiny_cfg(), seed).unwrap();
        store
    }

    #[test]
    fn init_creates_expected_shapes() {
        let store = tiny_store(1);
        // Row branch input = 5 items; col branch input = 4 users.
        assert_eq!(store.tensor("row.l0.w").unwrap().shape(), &[5, 6]);
        assert_eq!(store.tensor("row.l1.w").unwrap().shape(), &[6, 3]);
        assert_eq!(store.tensor("col.l0.w").unwrap().shape(), &[4, 6]);
        assert_eq!(store.tensor("col.l1.bn.gamma").unwrap().shape(), &[3]);
        assert_eq!(store.tensor("dec.b0").unwrap().shape(), &[3, 3]);
        assert_eq!(decoder_count(&store), 3);
        assert!(!store.entry("row.l0.bn.rmean").unwrap().trainable);
        assert!(store.entry("row.l0.bn.gamma").unwrap().trainable);
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let a = tiny_store(7);
        let b = tiny_store(7);
        let c = tiny_store(8);
        for (name, entry) in a.iter() {
            let other = b.tensor(name).unwrap();
            assert_eq!(entry.tensor.data(), other.data(), "{name} differs across same seed");
        }
        assert_ne!(
            a.tensor("row.l0.w").unwrap().data(),
            c.tensor("row.l0.w").unwrap().data(),
            "different seeds must differ"
        );
        let bound = (6.0f64 / (5 + 6) as f64).sqrt();
        for &w in a.tensor("row.l0.w").unwrap().data() {
            assert!(w.abs() < bound);
        }
        let dec_bound = (6.0f64 / 6.0).sqrt();
        for &w in a.tensor("dec.b0").unwrap().data() {
            assert!(w.abs() < dec_bound, "decoder init must stay within its fan bound");
        }
    }

    #[test]
    fn branch_shapes_and_eval_determinism() {
        let store = tiny_store(2);
        let cfg = tiny_cfg();
        let input = Tensor::new(vec![3, 5], (0..15).map(|i| (i % 5) as f64).collect()).unwrap();
        let run = || {
            let mut g = Graph::new(Mode::Eval);
            let x = g.constant(input.clone()).unwrap();
            let mut rng = subsystem_rng(9, "dropout");
            let (out, stats) = branch_forward(&mut g, &store, "row", x, &cfg, &mut rng).unwrap();
            assert!(stats.is_empty(), "eval mode must not emit batch stats");
            g.value(out).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.shape(), &[3, 3]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "evaluation must be bitwise reproducible");
        }
    }

    #[test]
    fn train_mode_emits_stats_and_updates_running_estimates() {
        let mut store = tiny_store(3);
        let cfg = tiny_cfg();
        let input = Tensor::new(vec![4, 5], (0..20).map(|i| i as f64 * 0.1).collect()).unwrap();
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(input).unwrap();
        let mut rng = subsystem_rng(4, "dropout");
        let (_, stats) = branch_forward(&mut g, &store, "row", x, &cfg, &mut rng).unwrap();
        assert_eq!(stats.len(), 2, "one stats record per batch-norm layer");
        let before = store.tensor("row.l0.bn.rmean").unwrap().clone();
        apply_bn_updates(&mut store, &stats, 0.9).unwrap();
        let after = store.tensor("row.l0.bn.rmean").unwrap();
        for ((b, a), batch) in before.data().iter().zip(after.data()).zip(stats[0].mean.data()) {
            assert!((a - (0.9 * b + 0.1 * batch)).abs() < 1e-15);
        }
    }

    #[test]
    fn bilinear_scores_hand_value() {
        // u = [1,0], B = [[0,2],[0,0]], v = [0,1] → u·B·vᵀ/d = 2/2 = 1.
        let mut store = ParamStore::new();
        store.insert("dec.b0", Tensor::new(vec![2, 2], vec![0.0, 2.0, 0.0, 0.0]).unwrap(), true);
        let mut g = Graph::new(Mode::Eval);
        let u = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        let v = g.constant(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
        let scores = bilinear_scores(&mut g, &store, u, v).unwrap();
        assert_eq!(g.value(scores).shape(), &[1, 1]);
        assert_eq!(g.value(scores).data()[0], 1.0);
    }

    #[test]
    fn bilinear_scores_flat_layout_is_row_major() {
        // Distinct per-label constants make the (i,j) → i·b+j layout visible.
        // d = 1, so the width scaling is the identity here.
        let mut store = ParamStore::new();
        store.insert("dec.b0", Tensor::new(vec![1, 1], vec![1.0]).unwrap(), true);
        store.insert("dec.b1", Tensor::new(vec![1, 1], vec![10.0]).unwrap(), true);
        let mut g = Graph::new(Mode::Eval);
        let u = g.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap()).unwrap();
        let v = g.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let scores = bilinear_scores(&mut g, &store, u, v).unwrap();
        let sv = g.value(scores);
        assert_eq!(sv.shape(), &[6, 2]);
        // Cell (1, 2) is flat row 1·3+2 = 5; score = 2·3 = 6 and 60.
        assert_eq!(sv.at(5, 0), 6.0);
        assert_eq!(sv.at(5, 1), 60.0);
        // Cell (0, 1) at flat row 1: 1·2 = 2.
        assert_eq!(sv.at(1, 0), 2.0);
    }

    #[test]
    fn probabilities_from_scores_hand_value() {
        let mut g = Graph::new(Mode::Eval);
        let scores = g
            .constant(Tensor::new(vec![1, 2], vec![(2.0f64).ln(), 0.0]).unwrap())
            .unwrap();
        let (q0, _) = unary_from_scores(&mut g, scores).unwrap();
        let q = g.value(q0);
        assert!((q.at(0, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((q.at(0, 1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn potentials_hand_value() {
        let mut g = Graph::new(Mode::Eval);
        // Scores chosen so the softmax lands on [0.2, 0.8].
        let scores = g
            .constant(Tensor::new(vec![1, 2], vec![(0.2f64).ln(), (0.8f64).ln()]).unwrap())
            .unwrap();
        let (q0, phi) = unary_from_scores(&mut g, scores).unwrap();
        assert!((g.value(q0).at(0, 0) - 0.2).abs() < 1e-12);
        let p = g.value(phi);
        assert!((p.at(0, 0) - 1.6094379124341003).abs() < 1e-10);
        assert!((p.at(0, 1) - 0.22314355131420976).abs() < 1e-10);
    }

    #[test]
    fn potentials_respect_floor_and_ceiling() {
        let mut g = Graph::new(Mode::Eval);
        // An extreme score gap drives one probability to ~0: the floor
        // keeps Φ at −ln(1e-12) ≈ 27.6, under the 50 cap.
        let scores = g
            .constant(Tensor::new(vec![1, 2], vec![100.0, -100.0]).unwrap())
            .unwrap();
        let (_, phi) = unary_from_scores(&mut g, scores).unwrap();
        let p = g.value(phi);
        assert!(p.at(0, 1) <= PHI_MAX);
        assert!((p.at(0, 1) - (-PROB_FLOOR.ln())).abs() < 1e-9);
        assert!(p.at(0, 0).abs() < 1e-9, "the near-certain label has Φ ≈ 0");
    }

    #[test]
    fn scaled_similarity_hand_values() {
        let mut g = Graph::new(Mode::Eval);
        let x = g
            .constant(
                Tensor::new(
                    vec![3, 2],
                    vec![
                        2.0, 0.0, // reference
                        0.0, 3.0, // orthogonal → cos 0 → scaled 0.5
                        -1.0, 0.0, // opposite → cos −1 → scaled 0
                    ],
                )
                .unwrap(),
            )
            .unwrap();
        let s = scaled_similarity(&mut g, x).unwrap();
        let sv = g.value(s);
        assert_eq!(sv.at(0, 0), 1.0, "identical direction scales to 1");
        assert!((sv.at(0, 1) - 0.5).abs() < 1e-15);
        assert!(sv.at(0, 2).abs() < 1e-15);
        for a in 0..3 {
            assert_eq!(sv.at(a, a), 1.0);
            for b in 0..3 {
                assert_eq!(sv.at(a, b), sv.at(b, a));
                assert!((0.0..=1.0).contains(&sv.at(a, b)));
            }
        }
    }

    #[test]
    fn entry_similarity_is_symmetric_with_unit_diagonal() {
        let store = tiny_store(5);
        let cfg = tiny_cfg();
        let rows_in = Tensor::new(vec![3, 5], (0..15).map(|i| ((i * 7) % 5) as f64).collect()).unwrap();
        let cols_in = Tensor::new(vec![2, 4], (0..8).map(|i| ((i * 3) % 4) as f64).collect()).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let mut rng = subsystem_rng(0, "dropout");
        let xr = g.constant(rows_in).unwrap();
        let xc = g.constant(cols_in).unwrap();
        let (u, _) = branch_forward(&mut g, &store, "row", xr, &cfg, &mut rng).unwrap();
        let (v, _) = branch_forward(&mut g, &store, "col", xc, &cfg, &mut rng).unwrap();
        let su = scaled_similarity(&mut g, u).unwrap();
        let sv = scaled_similarity(&mut g, v).unwrap();
        // Cells: the full 3×2 block.
        let rows: Vec<usize> = (0..6).map(|k| k / 2).collect();
        let cols: Vec<usize> = (0..6).map(|k| k % 2).collect();
        let s = g.pair_product_gather(su, sv, &rows, &cols).unwrap();
        let sm = g.value(s);
        for a in 0..6 {
            assert!((sm.at(a, a) - 1.0).abs() < 1e-12, "unit diagonal");
            for b in 0..6 {
                assert_eq!(sm.at(a, b), sm.at(b, a), "symmetry");
                assert!((0.0..=1.0 + 1e-12).contains(&sm.at(a, b)));
            }
        }
    }

    #[test]
    fn similarity_export_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sim.txt");
        let sim = Tensor::new(
            vec![2, 2],
            vec![1.0, 1.0 / 3.0, 0.1234567890123456789, 5e-324],
        )
        .unwrap();
        export_similarity(&path, &sim).unwrap();
        let back = import_similarity(&path).unwrap();
        for (a, b) in sim.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "text round-trip must be exact");
        }
        assert!(export_similarity(&path, &Tensor::zeros(vec![2, 3])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn argmax_of_probabilities_matches_argmin_of_potentials(
            scores in proptest::collection::vec(-5.0f64..5.0, 4),
        ) {
            let mut g = Graph::new(Mode::Eval);
            let s = g.constant(Tensor::new(vec![1, 4], scores).unwrap()).unwrap();
            let (q0, phi) = unary_from_scores(&mut g, s).unwrap();
            let q = g.value(q0);
            let p = g.value(phi);
            let argmax_q = (0..4).max_by(|&a, &b| q.at(0, a).partial_cmp(&q.at(0, b)).unwrap()).unwrap();
            let argmin_phi = (0..4).min_by(|&a, &b| p.at(0, a).partial_cmp(&p.at(0, b)).unwrap()).unwrap();
            prop_assert_eq!(argmax_q, argmin_phi, "−ln is monotone, so the rankings must agree");
        }
    }
}
