//! Rating data: loading, label sets, splits, batching, synthetic matrices.
//!
//! The on-disk format is whitespace-separated triplets, one rating per
//! line: `user item rating [extra fields ignored]`. Raw ids are remapped
//! to contiguous 0-based indices in ascending raw-id order.

use crate::error::{Error, Result};
use crate::rng::subsystem_rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// The ordered, distinct label values a dataset can take (L_1 < … < L_p).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    values: Vec<f64>,
}

impl LabelSet {
    /// Sorts the given values; rejects empties, non-finite values, and
    /// duplicates (within 1e-9).
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("label set must not be empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("label values must be finite".into()));
        }
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        if values.windows(2).any(|w| (w[1] - w[0]).abs() < 1e-9) {
            return Err(Error::Domain("label values must be distinct".into()));
        }
        Ok(LabelSet { values })
    }

    /// Distinct rating values present in the dataset.
    pub fn from_data(ds: &RatingDataset) -> Result<Self> {
        let mut vals: Vec<f64> = ds.ratings.iter().map(|r| r.value).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        vals.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        LabelSet::new(vals)
    }

    /// Evenly spaced labels `lo, lo+step, …, hi` (inclusive).
    pub fn evenly_spaced(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if step <= 0.0 || hi < lo {
            return Err(Error::Domain(format!("bad label range {lo}..{hi} step {step}")));
        }
        let n = ((hi - lo) / step).round() as usize + 1;
        LabelSet::new((0..n).map(|i| lo + step * i as f64).collect())
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().expect("non-empty")
    }

    /// Index of the label matching `value` (within 1e-6).
    pub fn index_of(&self, value: f64) -> Result<usize> {
        self.values
            .iter()
            .position(|&l| (l - value).abs() < 1e-6)
            .ok_or_else(|| Error::Domain(format!("rating {value} is not in the label set")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
}

/// A rating matrix in sparse triplet form with contiguous 0-based ids.
#[derive(Debug, Clone)]
pub struct RatingDataset {
    pub n_users: usize,
    pub n_items: usize,
    pub ratings: Vec<Rating>,
}

/// Parses whitespace-separated `user item rating …` triplets.
///
/// Extra per-line fields (timestamps) are ignored, blank lines are
/// skipped, duplicate (user, item) pairs keep the last value seen (with a
/// warning), and a file with no ratings is an error.
pub fn load_movielens_triplets(path: &Path) -> Result<RatingDataset> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut raw: Vec<(u64, u64, f64)> = Vec::new();
    let mut seen: HashMap<(u64, u64), usize> = HashMap::new();
    let mut dupes = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let (u, i, r) = match (parts.next(), parts.next(), parts.next()) {
            (None, _, _) => continue, // blank line
            (Some(u), Some(i), Some(r)) => (u, i, r),
            _ => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: "expected at least `user item rating`".into(),
                })
            }
        };
        let parse_err = |what: &str| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("bad {what}"),
        };
        let u: u64 = u.parse().map_err(|_| parse_err("user id"))?;
        let i: u64 = i.parse().map_err(|_| parse_err("item id"))?;
        let r: f64 = r.parse().map_err(|_| parse_err("rating"))?;
        if !r.is_finite() {
            return Err(parse_err("rating"));
        }
        match seen.get(&(u, i)) {
            Some(&pos) => {
                raw[pos].2 = r;
                dupes += 1;
            }
            None => {
                seen.insert((u, i), raw.len());
                raw.push((u, i, r));
            }
        }
    }
    if dupes > 0 {
        log::warn!("{dupes} duplicate (user, item) pairs in {}; kept last values", path.display());
    }
    if raw.is_empty() {
        return Err(Error::Domain(format!("{} contains no ratings", path.display())));
    }
    let mut users: Vec<u64> = raw.iter().map(|t| t.0).collect();
    users.sort_unstable();
    users.dedup();
    let mut items: Vec<u64> = raw.iter().map(|t| t.1).collect();
    items.sort_unstable();
    items.dedup();
    let umap: HashMap<u64, usize> = users.iter().enumerate().map(|(k, &v)| (v, k)).collect();
    let imap: HashMap<u64, usize> = items.iter().enumerate().map(|(k, &v)| (v, k)).collect();
    let ratings = raw
        .into_iter()
        .map(|(u, i, r)| Rating { user: umap[&u], item: imap[&i], value: r })
        .collect();
    Ok(RatingDataset {
        n_users: users.len(),
        n_items: items.len(),
        ratings,
    })
}

/// Indices into `RatingDataset::ratings`, one list per split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Randomly partitions the ratings into train/validation/test.
///
/// Sizes are `round(f·N)` for train and validation, remainder test. The
/// permutation is drawn from the `"split"` subsystem stream of `seed`, so
/// a given (dataset length, seed) pair always produces the same split.
pub fn split_dataset(ds: &RatingDataset, fractions: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (ft, fv, fs) = fractions;
    if ft < 0.0 || fv < 0.0 || fs < 0.0 || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!(
            "split fractions ({ft}, {fv}, {fs}) must be non-negative and sum to 1"
        )));
    }
    let n = ds.ratings.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = subsystem_rng(seed, "split");
    order.shuffle(&mut rng);
    let n_train = ((ft * n as f64).round() as usize).min(n);
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train);
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut val: Vec<usize> = order[n_train..n_train + n_val].to_vec();
    let mut test: Vec<usize> = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Splits { train, val, test })
}

/// Writes a split to CSV (`index,assignment`) so a run can be audited or
/// reproduced outside this toolkit.
pub fn write_split_manifest(path: &Path, splits: &Splits) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "index,assignment")?;
    for (name, list) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        for &i in list.iter() {
            writeln!(w, "{i},{name}")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_split_manifest(path: &Path) -> Result<Splits> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut splits = Splits { train: vec![], val: vec![], test: vec![] };
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: msg.into(),
        };
        let (idx, name) = line.split_once(',').ok_or_else(|| err("expected `index,assignment`"))?;
        let idx: usize = idx.trim().parse().map_err(|_| err("bad index"))?;
        match name.trim() {
            "train" => splits.train.push(idx),
            "val" => splits.val.push(idx),
            "test" => splits.test.push(idx),
            other => return Err(err(&format!("unknown assignment `{other}`"))),
        }
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    Ok(splits)
}

/// Training ratings indexed both ways for fast row/column assembly.
#[derive(Debug, Clone)]
pub struct TrainIndex {
    pub n_users: usize,
    pub n_items: usize,
    /// Per user: (item, value), ascending by item.
    pub by_user: Vec<Vec<(usize, f64)>>,
    /// Per item: (user, value), ascending by user.
    pub by_item: Vec<Vec<(usize, f64)>>,
    /// Global mean of the indexed ratings.
    pub mean: f64,
    pub count: usize,
}

impl TrainIndex {
    pub fn build(ds: &RatingDataset, indices: &[usize]) -> Result<Self> {
        let mut by_user = vec![Vec::new(); ds.n_users];
        let mut by_item = vec![Vec::new(); ds.n_items];
        let mut sum = 0.0;
        for &idx in indices {
            let r = ds
                .ratings
                .get(idx)
                .ok_or_else(|| Error::Domain(format!("rating index {idx} out of range")))?;
            by_user[r.user].push((r.item, r.value));
            by_item[r.item].push((r.user, r.value));
            sum += r.value;
        }
        for list in by_user.iter_mut() {
            list.sort_unstable_by_key(|&(i, _)| i);
        }
        for list in by_item.iter_mut() {
            list.sort_unstable_by_key(|&(u, _)| u);
        }
        if indices.is_empty() {
            return Err(Error::Domain("training split is empty".into()));
        }
        Ok(TrainIndex {
            n_users: ds.n_users,
            n_items: ds.n_items,
            by_user,
            by_item,
            mean: sum / indices.len() as f64,
            count: indices.len(),
        })
    }

    /// Value of (user, item) if present.
    pub fn get(&self, user: usize, item: usize) -> Option<f64> {
        let list = &self.by_user[user];
        list.binary_search_by_key(&item, |&(i, _)| i)
            .ok()
            .map(|pos| list[pos].1)
    }
}

/// One observed training cell inside a sampled block, in block-local
/// coordinates, with the rating as a label index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
    pub label: usize,
}

/// A sampled block: `rows`/`cols` are global ids; `dense_rows` holds each
/// sampled user's full training row over all items (missing = 0), and
/// `dense_cols` each sampled item's full column over all users.
#[derive(Debug, Clone)]
pub struct RowColBatch {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub dense_rows: Tensor,
    pub dense_cols: Tensor,
    pub cells: Vec<Cell>,
}

/// Assembles the dense branch inputs and the observed-cell list for one
/// (rows × cols) block. Only training ratings enter either.
pub fn build_batch(
    index: &TrainIndex,
    labels: &LabelSet,
    rows: &[usize],
    cols: &[usize],
) -> Result<RowColBatch> {
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::Domain("batch must contain at least one row and one column".into()));
    }
    let (n, m) = (index.n_users, index.n_items);
    let mut dense_rows = Tensor::zeros(vec![rows.len(), m]);
    for (rl, &u) in rows.iter().enumerate() {
        if u >= n {
            return Err(Error::Domain(format!("user {u} out of range")));
        }
        let dst = dense_rows.row_mut(rl);
        for &(item, value) in &index.by_user[u] {
            dst[item] = value;
        }
    }
    let mut dense_cols = Tensor::zeros(vec![cols.len(), n]);
    let mut col_local = vec![usize::MAX; m];
    for (cl, &i) in cols.iter().enumerate() {
        if i >= m {
            return Err(Error::Domain(format!("item {i} out of range")));
        }
        col_local[i] = cl;
        let dst = dense_cols.row_mut(cl);
        for &(user, value) in &index.by_item[i] {
            dst[user] = value;
        }
    }
    let mut cells = Vec::new();
    for (rl, &u) in rows.iter().enumerate() {
        for &(item, value) in &index.by_user[u] {
            let cl = col_local[item];
            if cl != usize::MAX {
                cells.push(Cell { row: rl, col: cl, label: labels.index_of(value)? });
            }
        }
    }
    Ok(RowColBatch { rows: rows.to_vec(), cols: cols.to_vec(), dense_rows, dense_cols, cells })
}

/// Draws row and column blocks for one epoch: both orderings are fresh
/// uniform permutations cut into `batch_rows`/`batch_cols` chunks, and an
/// epoch visits every (row chunk, column chunk) pair once in random order,
/// so each matrix cell — and therefore each observed entry — is covered
/// exactly once per epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pub n_users: usize,
    pub n_items: usize,
    pub batch_rows: usize,
    pub batch_cols: usize,
}

impl BatchSampler {
    pub fn new(n_users: usize, n_items: usize, batch_rows: usize, batch_cols: usize) -> Result<Self> {
        if n_users == 0 || n_items == 0 || batch_rows == 0 || batch_cols == 0 {
            return Err(Error::Domain("sampler dimensions must be positive".into()));
        }
        Ok(BatchSampler { n_users, n_items, batch_rows, batch_cols })
    }

    /// Number of batches every epoch yields.
    pub fn batches_per_epoch(&self) -> usize {
        let row_chunks = self.n_users.div_ceil(self.batch_rows);
        let col_chunks = self.n_items.div_ceil(self.batch_cols);
        row_chunks * col_chunks
    }

    /// The (row ids, col ids) pairs for one epoch.
    pub fn epoch(&self, rng: &mut impl Rng) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut rows: Vec<usize> = (0..self.n_users).collect();
        let mut cols: Vec<usize> = (0..self.n_items).collect();
        rows.shuffle(rng);
        cols.shuffle(rng);
        let row_chunks: Vec<Vec<usize>> = rows.chunks(self.batch_rows).map(<[_]>::to_vec).collect();
        let col_chunks: Vec<Vec<usize>> = cols.chunks(self.batch_cols).map(<[_]>::to_vec).collect();
        let mut batches: Vec<(Vec<usize>, Vec<usize>)> = row_chunks
            .iter()
            .flat_map(|r| col_chunks.iter().map(|c| (r.clone(), c.clone())))
            .collect();
        batches.shuffle(rng);
        batches
    }
}

/// Generates a quantized low-rank rating matrix for tests and demos:
/// a rank-`rank` product is rescaled onto the label range, snapped to the
/// nearest label, and each cell is kept with probability `density`.
pub fn synthetic_lowrank(
    n_users: usize,
    n_items: usize,
    rank: usize,
    labels: &LabelSet,
    density: f64,
    seed: u64,
) -> Result<RatingDataset> {
    if n_users == 0 || n_items == 0 || rank == 0 {
        return Err(Error::Domain("synthetic matrix dimensions must be positive".into()));
    }
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::Domain(format!("density {density} outside [0,1]")));
    }
    let mut rng = subsystem_rng(seed, "synthetic");
    let g1: Vec<f64> = (0..n_users * rank).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let g2: Vec<f64> = (0..n_items * rank).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut full = vec![0.0; n_users * n_items];
    for u in 0..n_users {
        for i in 0..n_items {
            let mut acc = 0.0;
            for r in 0..rank {
                acc += g1[u * rank + r] * g2[i * rank + r];
            }
            full[u * n_items + i] = acc;
        }
    }
    let lo = full.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = full.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let snap = |x: f64| -> f64 {
        let target = labels.min() + (x - lo) / span * (labels.max() - labels.min());
        *labels
            .values()
            .iter()
            .min_by(|a, b| {
                (*a - target).abs().partial_cmp(&(*b - target).abs()).expect("finite")
            })
            .expect("non-empty label set")
    };
    let mut ratings = Vec::new();
    for u in 0..n_users {
        for i in 0..n_items {
            if rng.gen::<f64>() < density {
                ratings.push(Rating { user: u, item: i, value: snap(full[u * n_items + i]) });
            }
        }
    }
    if ratings.is_empty() {
        return Err(Error::Domain("synthetic matrix came out empty; raise density".into()));
    }
    Ok(RatingDataset { n_users, n_items, ratings })
}
