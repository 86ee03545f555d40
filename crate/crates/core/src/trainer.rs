//! End-to-end training: batched loss construction, Adam updates under a
//! halving learning-rate schedule, per-epoch validation, best-checkpoint
//! tracking, and the 2×2 mean-field ablation harness.
//!
//! One training step samples a user×item block, runs both network branches
//! in train mode, assembles unary potentials and learned similarities for
//! the observed cells of the block, unfolds mean-field inference over them,
//! and minimizes `L = L_p + β·L_s` where `L_p` is the mean negative
//! log-likelihood of the true labels under the final distributions and
//! `L_s` pulls pairwise similarities toward a label-agreement target
//! `exp(−(L_a−L_b)²/σ²)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::basenet::{self, BnBatchStats, NetConfig, PROB_FLOOR};
use crate::dataio::{
    build_batch, split_dataset, BatchSampler, LabelSet, RatingDataset, RowColBatch, Splits,
    TrainIndex,
};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::graph::{Graph, Mode, NodeId};
use crate::meanfield::{build_compatibility, unfold_mean_field, MeanFieldConfig};
use crate::params::{adam_step, AdamConfig, AdamState, ParamStore};
use crate::predictor::{self, EvalReport, PredictConfig};
use crate::rng::subsystem_rng;
use crate::tensor::Tensor;

/// Complete training-run description. Every field can be set from a flat
/// `key=value` config file (one pair per line, `#` comments) and overridden
/// by command-line flags; [`TrainConfig::to_kv_string`] renders the same
/// format and is embedded in checkpoints as the config echo.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Ordered rating levels an entry may take.
    pub labels: Vec<f64>,
    /// Hidden layer widths of both branches; the last entry is the
    /// embedding dimension.
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Weight of the similarity loss term.
    pub beta: f64,
    /// Pairwise-potential strength.
    pub gamma: f64,
    /// Mean-field layer count T.
    pub layers: usize,
    /// Label-compatibility truncation.
    pub tau: f64,
    /// Bandwidth of the similarity target.
    pub sigma_sq: f64,
    /// Drop self-messages inside mean-field updates (default: keep them,
    /// matching the plain matrix-product formulation).
    pub exclude_self: bool,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub epochs: usize,
    pub lr: f64,
    /// The learning rate is halved every this many epochs.
    pub lr_halve_every: usize,
    pub batch_rows: usize,
    pub batch_cols: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Unfold mean-field layers inside the training loss.
    pub mf_train: bool,
    /// Unfold mean-field layers at prediction time.
    pub mf_test: bool,
    /// Test-time chunk height; `None` selects automatically (whole matrix
    /// when it has at most 4·10⁶ cells, 512 otherwise).
    pub chunk_rows: Option<usize>,
    /// Test-time chunk width; `None` as above.
    pub chunk_cols: Option<usize>,
    /// Independent chunk partitions averaged at prediction time.
    pub repeats: usize,
    /// Square chunk size for per-epoch validation.
    pub val_chunk: usize,
    /// Zero out wall-clock fields in logs so reports are byte-reproducible.
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        movielens()
    }
}

// Batch dimensions are chosen per dataset so that a mini-batch holds ~30
// observed entries on average (~24 under a 75% training split): the pairwise
// message a node receives grows with the number of observed cells in the
// batch, and at initialization (near-uniform similarities and beliefs) that
// message tilts every node toward the central labels. Keeping the batch small
// caps the tilt below the unary scale; oversized batches lock the whole batch
// onto one label early, starve the unary gradients, and stall learning.
fn base_config(
    labels: Vec<f64>,
    tau: f64,
    sigma_sq: f64,
    batch_rows: usize,
    batch_cols: usize,
) -> TrainConfig {
    TrainConfig {
        labels,
        hidden: vec![512, 128],
        dropout: 0.75,
        bn_eps: 1e-5,
        bn_momentum: 0.9,
        beta: 1.5,
        gamma: 0.05,
        layers: 5,
        tau,
        sigma_sq,
        exclude_self: false,
        train_frac: 0.75,
        val_frac: 0.05,
        test_frac: 0.20,
        epochs: 300,
        lr: 0.01,
        lr_halve_every: 25,
        batch_rows,
        batch_cols,
        adam_beta1: 0.9,
        adam_beta2: 0.999,
        adam_eps: 1e-8,
        mf_train: true,
        mf_test: true,
        chunk_rows: None,
        chunk_cols: None,
        repeats: 1,
        val_chunk: AUTO_CHUNK,
        deterministic: false,
        seed: 0,
    }
}

fn movielens() -> TrainConfig {
    // ~6.3% observed; 16x32 batches (matrix is ~1:1.8 users:items) carry ~32
    // observed cells.
    base_config(vec![1.0, 2.0, 3.0, 4.0, 5.0], 12.0, 3.5, 16, 32)
}

fn flixster() -> TrainConfig {
    // ~0.29% observed: 104x104 batches carry ~31 observed cells.
    base_config((1..=10).map(|i| i as f64 * 0.5).collect(), 12.0, 3.5, 104, 104)
}

fn douban() -> TrainConfig {
    // ~1.5% observed: 46x46 batches carry ~32 observed cells.
    base_config(vec![1.0, 2.0, 3.0, 4.0, 5.0], 12.0, 3.5, 46, 46)
}

fn yahoomusic() -> TrainConfig {
    // ~0.06% observed: 232x232 batches carry ~32 observed cells.
    base_config((1..=100).map(|i| i as f64).collect(), 100.0, 3000.0, 232, 232)
}

/// Returns the named per-dataset preset.
pub fn preset(name: &str) -> Result<TrainConfig> {
    match name.to_ascii_lowercase().as_str() {
        "movielens" => Ok(movielens()),
        "flixster" => Ok(flixster()),
        "douban" => Ok(douban()),
        "yahoomusic" => Ok(yahoomusic()),
        other => Err(Error::Config(format!(
            "unknown preset `{other}` (expected movielens, flixster, douban or yahoomusic)"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|tok| parse_num(key, tok))
        .collect()
}

fn parse_chunk(key: &str, value: &str) -> Result<Option<usize>> {
    if value.trim().eq_ignore_ascii_case("auto") {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn chunk_to_string(c: Option<usize>) -> String {
    match c {
        None => "auto".into(),
        Some(v) => v.to_string(),
    }
}

impl TrainConfig {
    /// Sets one field from its config-file key. Unknown keys are rejected.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "labels" => self.labels = parse_list(key, value)?,
            "hidden" => self.hidden = parse_list(key, value)?,
            "dropout" => self.dropout = parse_num(key, value)?,
            "bn_eps" => self.bn_eps = parse_num(key, value)?,
            "bn_momentum" => self.bn_momentum = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "layers" => self.layers = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "sigma_sq" => self.sigma_sq = parse_num(key, value)?,
            "exclude_self" => self.exclude_self = parse_bool(key, value)?,
            "train_frac" => self.train_frac = parse_num(key, value)?,
            "val_frac" => self.val_frac = parse_num(key, value)?,
            "test_frac" => self.test_frac = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "lr_halve_every" => self.lr_halve_every = parse_num(key, value)?,
            "batch_rows" => self.batch_rows = parse_num(key, value)?,
            "batch_cols" => self.batch_cols = parse_num(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_num(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, value)?,
            "adam_eps" => self.adam_eps = parse_num(key, value)?,
            "mf_train" => self.mf_train = parse_bool(key, value)?,
            "mf_test" => self.mf_test = parse_bool(key, value)?,
            "chunk_rows" => self.chunk_rows = parse_chunk(key, value)?,
            "chunk_cols" => self.chunk_cols = parse_chunk(key, value)?,
            "repeats" => self.repeats = parse_num(key, value)?,
            "val_chunk" => self.val_chunk = parse_num(key, value)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key=value` config text (blank lines and `#` comments
    /// are skipped).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Loads `key=value` overrides from a file on top of `self`.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    /// Renders every field in the config-file format, keys sorted. The
    /// result parses back to an identical config via [`apply_text`].
    ///
    /// [`apply_text`]: TrainConfig::apply_text
    pub fn to_kv_string(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let hid = self.hidden.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("batch_cols", self.batch_cols.to_string());
        kv("batch_rows", self.batch_rows.to_string());
        kv("beta", self.beta.to_string());
        kv("bn_eps", self.bn_eps.to_string());
        kv("bn_momentum", self.bn_momentum.to_string());
        kv("chunk_cols", chunk_to_string(self.chunk_cols));
        kv("chunk_rows", chunk_to_string(self.chunk_rows));
        kv("deterministic", self.deterministic.to_string());
        kv("dropout", self.dropout.to_string());
        kv("epochs", self.epochs.to_string());
        kv("exclude_self", self.exclude_self.to_string());
        kv("gamma", self.gamma.to_string());
        kv("hidden", hid);
        kv("labels", join(&self.labels));
        kv("layers", self.layers.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_halve_every", self.lr_halve_every.to_string());
        kv("mf_test", self.mf_test.to_string());
        kv("mf_train", self.mf_train.to_string());
        kv("repeats", self.repeats.to_string());
        kv("seed", self.seed.to_string());
        kv("sigma_sq", self.sigma_sq.to_string());
        kv("tau", self.tau.to_string());
        kv("test_frac", self.test_frac.to_string());
        kv("train_frac", self.train_frac.to_string());
        kv("val_chunk", self.val_chunk.to_string());
        kv("val_frac", self.val_frac.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        LabelSet::new(self.labels.clone())?;
        self.net_config().validate()?;
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("`{name}` must be positive and finite, got {v}")))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("`{name}` must be non-negative and finite, got {v}")))
            }
        };
        non_negative("beta", self.beta)?;
        non_negative("gamma", self.gamma)?;
        positive("tau", self.tau)?;
        positive("sigma_sq", self.sigma_sq)?;
        positive("lr", self.lr)?;
        positive("adam_eps", self.adam_eps)?;
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("`{name}` must lie in [0, 1), got {v}")));
            }
        }
        for (name, v) in [
            ("train_frac", self.train_frac),
            ("val_frac", self.val_frac),
            ("test_frac", self.test_frac),
        ] {
            non_negative(name, v)?;
        }
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("lr_halve_every", self.lr_halve_every),
            ("batch_rows", self.batch_rows),
            ("batch_cols", self.batch_cols),
            ("repeats", self.repeats),
            ("val_chunk", self.val_chunk),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be at least 1")));
            }
        }
        for (name, v) in [("chunk_rows", self.chunk_rows), ("chunk_cols", self.chunk_cols)] {
            if v == Some(0) {
                return Err(Error::Config(format!("`{name}` must be at least 1 or `auto`")));
            }
        }
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            hidden: self.hidden.clone(),
            dropout: self.dropout,
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
        }
    }

    /// Mean-field configuration for one side of the pipeline; `enabled:
    /// false` collapses the stack to zero layers, which reproduces the base
    /// network's softmax distributions exactly.
    pub fn mf_config(&self, enabled: bool) -> MeanFieldConfig {
        MeanFieldConfig {
            gamma: self.gamma,
            layers: if enabled { self.layers } else { 0 },
            exclude_self: self.exclude_self,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Learning rate at a given epoch: the base rate halved once per
    /// `lr_halve_every` completed epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.lr_halve_every) as i32)
    }
}

/// Automatic inference chunk edge. Every cell of a chunk is a CRF node, so
/// the chunk area sets the pairwise message mass a node receives; 6×6 keeps
/// that mass near the training regime, where only the observed cells of a
/// mini-batch (a few dozen) exchange messages. Much larger chunks let the
/// pairwise sum drown the unary term and inference collapses to a single
/// consensus label per chunk.
pub const AUTO_CHUNK: usize = 6;

/// Resolves a [`PredictConfig`] for an `n×m` training matrix. Chunk
/// dimensions left unset fall back to [`AUTO_CHUNK`].
pub fn predict_config(cfg: &TrainConfig, n: usize, m: usize, mf_enabled: bool) -> PredictConfig {
    PredictConfig {
        chunk_rows: cfg.chunk_rows.unwrap_or(AUTO_CHUNK).min(n).max(1),
        chunk_cols: cfg.chunk_cols.unwrap_or(AUTO_CHUNK).min(m).max(1),
        repeats: cfg.repeats,
        mf: cfg.mf_config(mf_enabled),
        seed: cfg.seed,
    }
}

/// Scalar summary of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    /// Mean negative log-likelihood over the batch cells.
    pub l_p: f64,
    /// Mean squared similarity error over ordered off-diagonal cell pairs.
    pub l_s: f64,
    /// `l_p + beta · l_s`.
    pub total: f64,
    /// Observed cells in the batch.
    pub cells: usize,
    /// Unordered distinct cell pairs entering the similarity loss.
    pub pairs: usize,
}

/// Loss graph handles: node ids for backward plus batch-norm statistics
/// that the caller folds into the running estimates after the step.
pub struct LossParts {
    pub loss: NodeId,
    pub l_p: NodeId,
    pub l_s: NodeId,
    pub bn: Vec<BnBatchStats>,
    pub report: LossReport,
}

/// Verifies a learned similarity block: symmetric with a unit diagonal.
fn check_similarity(s: &Tensor) -> Result<()> {
    let c = s.shape()[0];
    let d = s.data();
    for i in 0..c {
        if (d[i * c + i] - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "similarity diagonal entry {i} is {}, expected 1",
                d[i * c + i]
            )));
        }
        for j in (i + 1)..c {
            if (d[i * c + j] - d[j * c + i]).abs() > 1e-12 {
                return Err(Error::Domain(format!(
                    "similarity matrix asymmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Similarity targets `exp(−(L_a−L_b)²/σ²)` for every ordered cell pair.
fn similarity_targets(batch: &RowColBatch, labels: &LabelSet, sigma_sq: f64) -> Tensor {
    let c = batch.cells.len();
    let vals = labels.values();
    let mut t = Tensor::zeros(vec![c, c]);
    let d = t.data_mut();
    for a in 0..c {
        let la = vals[batch.cells[a].label];
        for b in 0..c {
            let lb = vals[batch.cells[b].label];
            let diff = la - lb;
            d[a * c + b] = (-(diff * diff) / sigma_sq).exp();
        }
    }
    t
}

/// Builds the full training loss for one batch in `g`.
///
/// `mf_layers` controls how many mean-field layers the loss sees (zero
/// reproduces the plain softmax likelihood). The caller must skip batches
/// with no observed cells.
pub fn build_loss(
    g: &mut Graph,
    store: &ParamStore,
    batch: &RowColBatch,
    labels: &LabelSet,
    compat: &Tensor,
    cfg: &TrainConfig,
    mf_layers: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossParts> {
    let c = batch.cells.len();
    if c == 0 {
        return Err(Error::Domain("loss is undefined for a batch with no observed cells".into()));
    }
    let net = cfg.net_config();
    let b_len = batch.cols.len();

    let row_in = g.constant(batch.dense_rows.clone())?;
    let col_in = g.constant(batch.dense_cols.clone())?;
    let (u_emb, bn_u) = basenet::branch_forward(g, store, "row", row_in, &net, rng)?;
    let (v_emb, bn_v) = basenet::branch_forward(g, store, "col", col_in, &net, rng)?;

    let scores_all = basenet::bilinear_scores(g, store, u_emb, v_emb)?;
    let flat: Vec<usize> = batch.cells.iter().map(|cell| cell.row * b_len + cell.col).collect();
    let scores = g.gather_rows(scores_all, &flat)?;
    if log::log_enabled!(log::Level::Debug) {
        let sv = g.value(scores);
        let (lo, hi) = sv
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        log::debug!("scores min {lo:.3} max {hi:.3} over {c} cells");
    }
    let (q0, phi) = basenet::unary_from_scores(g, scores)?;

    let su = basenet::scaled_similarity(g, u_emb)?;
    let sv = basenet::scaled_similarity(g, v_emb)?;
    let cell_rows: Vec<usize> = batch.cells.iter().map(|cell| cell.row).collect();
    let cell_cols: Vec<usize> = batch.cells.iter().map(|cell| cell.col).collect();
    let s_tilde = g.pair_product_gather(su, sv, &cell_rows, &cell_cols)?;
    check_similarity(g.value(s_tilde))?;

    let mf = MeanFieldConfig {
        gamma: cfg.gamma,
        layers: mf_layers,
        exclude_self: cfg.exclude_self,
    };
    let compat_node = g.constant(compat.clone())?;
    let q = unfold_mean_field(g, phi, q0, s_tilde, compat_node, &mf)?;

    let targets: Vec<usize> = batch.cells.iter().map(|cell| cell.label).collect();
    let picked = g.pick_per_row(q, &targets)?;
    let logp = g.log_clamped(picked, PROB_FLOOR)?;
    let nll = g.neg(logp)?;
    let l_p = g.mean(nll)?;

    let l_s = if c >= 2 {
        let target = g.constant(similarity_targets(batch, labels, cfg.sigma_sq))?;
        let diff = g.sub(s_tilde, target)?;
        let sq = g.mul(diff, diff)?;
        let off = g.zero_diag(sq)?;
        let total = g.sum(off)?;
        g.mul_scalar(total, 1.0 / (c * (c - 1)) as f64)?
    } else {
        g.constant(Tensor::scalar(0.0))?
    };

    let weighted = g.mul_scalar(l_s, cfg.beta)?;
    let loss = g.add(l_p, weighted)?;

    let mut bn = bn_u;
    bn.extend(bn_v);
    let report = LossReport {
        l_p: g.value(l_p).data()[0],
        l_s: g.value(l_s).data()[0],
        total: g.value(loss).data()[0],
        cells: c,
        pairs: c * (c - 1) / 2,
    };
    Ok(LossParts { loss, l_p, l_s, bn, report })
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Cell-weighted epoch means of the training loss terms.
    pub loss: f64,
    pub l_p: f64,
    pub l_s: f64,
    /// Validation metrics (NaN when the validation split is empty).
    pub val_rmse: f64,
    pub val_mae: f64,
    /// Wall-clock epoch duration (0 in deterministic mode).
    pub seconds: f64,
}

/// Writes the epoch log as CSV.
pub fn write_epoch_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,lr,loss,l_p,l_s,val_rmse,val_mae,seconds\n");
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            l.epoch, l.lr, l.loss, l.l_p, l.l_s, l.val_rmse, l.val_mae, l.seconds
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Everything a finished training run produces.
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation RMSE (the final
    /// parameters when there is no validation split).
    pub best_store: ParamStore,
    /// Optimizer state matching `best_store`.
    pub best_adam: AdamState,
    pub best_epoch: usize,
    /// Best validation RMSE, when a validation split exists.
    pub best_val_rmse: Option<f64>,
    /// Parameters after the last epoch.
    pub final_store: ParamStore,
    pub logs: Vec<EpochLog>,
    /// Config echo embedded in checkpoints.
    pub config_echo: String,
    /// Optimizer steps taken (batches with at least one observed cell).
    pub steps: usize,
}

fn wrap_divergence(e: Error, step: usize, epoch: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            epoch,
            detail: format!("non-finite value produced by `{op}`"),
        },
        other => other,
    }
}

/// Splits the dataset with the configured fractions and seed, then trains.
pub fn train(ds: &RatingDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let splits = split_dataset(ds, (cfg.train_frac, cfg.val_frac, cfg.test_frac), cfg.seed)?;
    train_with_splits(ds, cfg, &splits)
}

/// Trains on a caller-provided split. Model selection uses validation RMSE
/// evaluated with the *training-time* mean-field setting, so the selection
/// signal matches the objective being optimized.
pub fn train_with_splits(
    ds: &RatingDataset,
    cfg: &TrainConfig,
    splits: &Splits,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labels = LabelSet::new(cfg.labels.clone())?;
    let net = cfg.net_config();
    let index = TrainIndex::build(ds, &splits.train)?;
    let compat = build_compatibility(&labels, cfg.tau)?;

    let mut store = ParamStore::new();
    basenet::init_params(&mut store, ds.n_users, ds.n_items, labels.count(), &net, cfg.seed)?;
    let mut adam = AdamState::new(&store);
    let adam_cfg = cfg.adam_config();

    let sampler = BatchSampler::new(ds.n_users, ds.n_items, cfg.batch_rows, cfg.batch_cols)?;
    let mut sampler_rng = subsystem_rng(cfg.seed, "sampler");
    let mut dropout_rng = subsystem_rng(cfg.seed, "dropout");

    let val_targets: Vec<(usize, usize, f64)> = splits
        .val
        .iter()
        .map(|&i| {
            let r = &ds.ratings[i];
            (r.user, r.item, r.value)
        })
        .collect();
    let val_cfg = PredictConfig {
        chunk_rows: cfg.val_chunk.min(ds.n_users).max(1),
        chunk_cols: cfg.val_chunk.min(ds.n_items).max(1),
        repeats: 1,
        mf: cfg.mf_config(cfg.mf_train),
        seed: cfg.seed,
    };
    let mf_layers = if cfg.mf_train { cfg.layers } else { 0 };

    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamStore, AdamState, usize)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut cell_total = 0usize;
        let (mut lp_sum, mut ls_sum, mut loss_sum) = (0.0, 0.0, 0.0);

        for (rows, cols) in sampler.epoch(&mut sampler_rng) {
            let batch = build_batch(&index, &labels, &rows, &cols)?;
            if batch.cells.is_empty() {
                continue;
            }
            step += 1;
            let mut g = Graph::new(Mode::Train);
            let parts = build_loss(&mut g, &store, &batch, &labels, &compat, cfg, mf_layers, &mut dropout_rng)
                .map_err(|e| wrap_divergence(e, step, epoch))?;
            g.backward(parts.loss).map_err(|e| wrap_divergence(e, step, epoch))?;
            let grads = g.take_leaf_grads();
            drop(g);
            adam_step(&mut store, &mut adam, &grads, lr, &adam_cfg)
                .map_err(|e| wrap_divergence(e, step, epoch))?;
            basenet::apply_bn_updates(&mut store, &parts.bn, cfg.bn_momentum)?;

            let w = parts.report.cells as f64;
            cell_total += parts.report.cells;
            lp_sum += parts.report.l_p * w;
            ls_sum += parts.report.l_s * w;
            loss_sum += parts.report.total * w;
        }

        let denom = cell_total as f64;
        let (loss_m, lp_m, ls_m) = if cell_total > 0 {
            (loss_sum / denom, lp_sum / denom, ls_sum / denom)
        } else {
            (f64::NAN, f64::NAN, f64::NAN)
        };

        let (val_rmse, val_mae) = if val_targets.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let report =
                predictor::evaluate(&store, &net, &labels, &compat, &index, &val_targets, &val_cfg)
                    .map_err(|e| wrap_divergence(e, step, epoch))?;
            (report.rmse, report.mae)
        };
        if val_rmse.is_finite() {
            let improved = best.as_ref().map_or(true, |(r, ..)| val_rmse < *r);
            if improved {
                best = Some((val_rmse, store.clone(), adam.clone(), epoch));
            }
        }

        let seconds = if cfg.deterministic { 0.0 } else { started.elapsed().as_secs_f64() };
        logs.push(EpochLog {
            epoch,
            lr,
            loss: loss_m,
            l_p: lp_m,
            l_s: ls_m,
            val_rmse,
            val_mae,
            seconds,
        });
        log::info!(
            "epoch {epoch}: lr {lr:.6} loss {loss_m:.6} (l_p {lp_m:.6}, l_s {ls_m:.6}) val rmse {val_rmse:.4} mae {val_mae:.4}"
        );
    }

    let (best_val_rmse, best_store, best_adam, best_epoch) = match best {
        Some((r, s, a, e)) => (Some(r), s, a, e),
        None => (None, store.clone(), adam.clone(), cfg.epochs - 1),
    };
    Ok(TrainOutcome {
        best_store,
        best_adam,
        best_epoch,
        best_val_rmse,
        final_store: store,
        logs,
        config_echo: cfg.to_kv_string(),
        steps: step,
    })
}

/// Evaluates a trained parameter store on the dataset rows selected by
/// `indices`, with mean field on or off.
pub fn evaluate_indices(
    ds: &RatingDataset,
    cfg: &TrainConfig,
    store: &ParamStore,
    train_index: &TrainIndex,
    indices: &[usize],
    mf_enabled: bool,
) -> Result<EvalReport> {
    let labels = LabelSet::new(cfg.labels.clone())?;
    let compat = build_compatibility(&labels, cfg.tau)?;
    let targets: Vec<(usize, usize, f64)> = indices
        .iter()
        .map(|&i| {
            let r = &ds.ratings[i];
            (r.user, r.item, r.value)
        })
        .collect();
    let pcfg = predict_config(cfg, ds.n_users, ds.n_items, mf_enabled);
    predictor::evaluate(store, &cfg.net_config(), &labels, &compat, train_index, &targets, &pcfg)
}

/// The 2×2 mean-field ablation: train with and without unfolded layers,
/// evaluate each model with and without them, on one shared split and seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationReport {
    pub on_on: EvalReport,
    pub on_off: EvalReport,
    pub off_on: EvalReport,
    pub off_off: EvalReport,
}

impl AblationReport {
    /// Cells in (train_mf, test_mf) order: labels use `with`/`without`.
    pub fn cells(&self) -> [(&'static str, &'static str, EvalReport); 4] {
        [
            ("with", "with", self.on_on),
            ("with", "without", self.on_off),
            ("without", "with", self.off_on),
            ("without", "without", self.off_off),
        ]
    }
}

/// Writes the ablation table as CSV: `train_mf,test_mf,rmse,mae`.
pub fn write_ablation_report(path: &Path, report: &AblationReport) -> Result<()> {
    let mut out = String::from("train_mf,test_mf,rmse,mae\n");
    for (train, test, cell) in report.cells() {
        let _ = writeln!(out, "{train},{test},{},{}", cell.rmse, cell.mae);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Runs the full ablation matrix: two trainings (mean field on/off in the
/// loss) sharing one split, each evaluated on the test split with the
/// mean-field stack enabled and disabled.
pub fn ablation_matrix(ds: &RatingDataset, cfg: &TrainConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let splits = split_dataset(ds, (cfg.train_frac, cfg.val_frac, cfg.test_frac), cfg.seed)?;
    let index = TrainIndex::build(ds, &splits.train)?;

    let mut reports = [EvalReport { rmse: 0.0, mae: 0.0, count: 0 }; 4];
    for (slot, train_mf) in [(0, true), (2, false)] {
        let mut run_cfg = cfg.clone();
        run_cfg.mf_train = train_mf;
        let outcome = train_with_splits(ds, &run_cfg, &splits)?;
        for (offset, test_mf) in [(0, true), (1, false)] {
            reports[slot + offset] =
                evaluate_indices(ds, &run_cfg, &outcome.best_store, &index, &splits.test, test_mf)?;
        }
    }
    Ok(AblationReport {
        on_on: reports[0],
        on_off: reports[1],
        off_on: reports[2],
        off_off: reports[3],
    })
}

/// A tiny fully-specified training problem for gradient checking: 5 users
/// × 6 items with 12 observed cells, hidden sizes [8, 4], three mean-field
/// layers, dropout off.
pub struct ToyProblem {
    pub store: ParamStore,
    pub batch: RowColBatch,
    pub labels: LabelSet,
    pub compat: Tensor,
    pub cfg: TrainConfig,
}

/// Builds the deterministic toy problem for a seed.
pub fn toy_problem(seed: u64) -> Result<ToyProblem> {
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    let (n, m, observed) = (5usize, 6usize, 12usize);
    let mut cfg = TrainConfig::default();
    cfg.hidden = vec![8, 4];
    cfg.dropout = 0.0;
    cfg.layers = 3;
    cfg.beta = 1.5;
    cfg.gamma = 0.05;
    cfg.seed = seed;
    let labels = LabelSet::new(cfg.labels.clone())?;

    let mut rng = subsystem_rng(seed, "toy");
    let mut cells: Vec<usize> = (0..n * m).collect();
    cells.shuffle(&mut rng);
    cells.truncate(observed);
    cells.sort_unstable();
    let ratings = cells
        .iter()
        .map(|&c| crate::dataio::Rating {
            user: c / m,
            item: c % m,
            value: labels.values()[rng.gen_range(0..labels.count())],
        })
        .collect();
    let ds = RatingDataset { n_users: n, n_items: m, ratings };
    let all: Vec<usize> = (0..observed).collect();
    let index = TrainIndex::build(&ds, &all)?;
    let rows: Vec<usize> = (0..n).collect();
    let cols: Vec<usize> = (0..m).collect();
    let batch = build_batch(&index, &labels, &rows, &cols)?;
    let compat = build_compatibility(&labels, cfg.tau)?;

    let mut store = ParamStore::new();
    basenet::init_params(&mut store, n, m, labels.count(), &cfg.net_config(), seed)?;
    Ok(ToyProblem { store, batch, labels, compat, cfg })
}

/// Checks analytic gradients of the full loss on the toy problem against
/// central finite differences over every trainable scalar.
pub fn gradcheck_toy(seed: u64, h: f64, floor: f64) -> Result<GradCheckReport> {
    let ToyProblem { mut store, batch, labels, compat, cfg } = toy_problem(seed)?;
    let mf_layers = cfg.layers;

    let mut g = Graph::new(Mode::Train);
    let mut rng = subsystem_rng(seed, "dropout");
    let parts = build_loss(&mut g, &store, &batch, &labels, &compat, &cfg, mf_layers, &mut rng)?;
    g.backward(parts.loss)?;
    let analytic: BTreeMap<String, Tensor> = g.leaf_grads();
    drop(g);

    let loss_fn = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(Mode::Train);
        let mut rng = subsystem_rng(seed, "dropout");
        let parts = build_loss(&mut g, s, &batch, &labels, &compat, &cfg, mf_layers, &mut rng)?;
        Ok(parts.report.total)
    };
    grad_check(&mut store, &analytic, loss_fn, h, floor)
}
