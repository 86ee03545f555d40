//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: each operation appends a node holding the forward
//! value plus whatever the adjoint rule needs. [`Graph::backward`] walks the
//! tape in reverse and accumulates exact gradients of a scalar loss into
//! every upstream node. The tape is rebuilt per training step; nothing is
//! retained across steps except the [`crate::params::ParamStore`].
//!
//! Every op validates shapes and errors on non-finite outputs, so NaN/Inf
//! surfaces at the op that produced it rather than three modules later.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{self, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Handle to a node in one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Forward-pass mode: `Train` enables dropout masks and batch statistics,
/// `Eval` is deterministic and side-effect free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    /// Input or parameter; `name` is set for parameters so gradients can be
    /// collected per name after backward.
    Leaf { name: Option<String> },
    Constant,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    AddScalar { a: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulScalar { a: NodeId, s: f64 },
    Neg { a: NodeId },
    Relu { a: NodeId },
    /// ln(max(x, floor)); gradient flows only where x > floor.
    LogClamped { a: NodeId, floor: f64 },
    /// min(x, hi); gradient flows only where x < hi.
    ClampMax { a: NodeId, hi: f64 },
    SoftmaxRows { a: NodeId },
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, inv_std: Vec<f64> },
    BatchNormEval { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, inv_std: Vec<f64> },
    /// Mask already folded with the 1/keep inverted scaling.
    Dropout { a: NodeId, mask: Vec<f64> },
    /// Pairwise cosine similarity between the rows of one matrix.
    CosineRows { x: NodeId, norms: Vec<f64>, zero_row: Vec<bool> },
    GatherRows { a: NodeId, idx: Vec<usize> },
    /// out[r] = a[r, idx[r]] — one element per row.
    PickPerRow { a: NodeId, idx: Vec<usize> },
    /// S[a,b] = us[rows[a],rows[b]] · vs[cols[a],cols[b]] — the entry
    /// similarity over a list of (row, col) cells.
    PairProductGather { us: NodeId, vs: NodeId, rows: Vec<usize>, cols: Vec<usize> },
    /// p matrices r×c stacked into (r·c) × p, cell (i,j) at flat row i·c+j.
    StackColsFlat { parts: Vec<NodeId>, r: usize, c: usize },
    ZeroDiag { a: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    Mse { a: NodeId, b: NodeId },
}

struct Node {
    // Shared so parameter leaves can alias the store's tensors instead of
    // copying every weight matrix into each per-step tape.
    value: Arc<Tensor>,
    grad: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph { nodes: Vec::new(), mode }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.as_ref()
    }

    /// Gradient accumulated by the latest [`Graph::backward`], if any.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<NodeId> {
        self.push_shared(Arc::new(value), op, needs_grad, name)
    }

    fn push_shared(
        &mut self,
        value: Arc<Tensor>,
        op: Op,
        needs_grad: bool,
        name: &'static str,
    ) -> Result<NodeId> {
        value.check_finite(name)?;
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Non-differentiable input (data, masks, precomputed constants).
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Constant, false, "constant")
    }

    /// Differentiable leaf without a parameter name (used by tests).
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf { name: None }, true, "leaf")
    }

    /// Brings a named parameter into the tape as a differentiable leaf that
    /// aliases the store's tensor (non-trainable parameters enter as fixed
    /// leaves). The alias is sound because the store cannot be mutated while
    /// the graph borrows it, and later store updates replace the Arc rather
    /// than writing through it.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let trainable = store.entry(name)?.trainable;
        self.push_shared(
            store.tensor_shared(name)?,
            Op::Leaf { name: Some(name.to_string()) },
            trainable,
            "param",
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b), ta, tb)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul { a, b, ta, tb }, ng, "matmul")
    }

    /// U · B · Vᵀ — the bilinear form over all row pairs of U and V.
    pub fn bilinear(&mut self, u: NodeId, b: NodeId, v: NodeId) -> Result<NodeId> {
        let ub = self.matmul(u, b, false, false)?;
        self.matmul(ub, v, false, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add { a, b }, ng, "add")
    }

    /// Adds a length-c bias vector to every row of an r×c matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if !va.is_matrix() || vb.shape() != [va.cols()] {
            return Err(Error::Shape {
                op: "add_bias",
                detail: format!("{:?} + bias {:?}", va.shape(), vb.shape()),
            });
        }
        let c = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, bv) in row.iter_mut().zip(vb.data()) {
                *x += bv;
            }
        }
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(bias);
        self.push(v, Op::AddBias { a, bias }, ng, "add_bias")
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + s);
        let ng = self.needs(a);
        self.push(v, Op::AddScalar { a }, ng, "add_scalar")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "sub",
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub { a, b }, ng, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul { a, b }, ng, "mul")
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(v, Op::MulScalar { a, s }, ng, "mul_scalar")
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| -x);
        let ng = self.needs(a);
        self.push(v, Op::Neg { a }, ng, "neg")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu { a }, ng, "relu")
    }

    /// Natural log; errors on non-positive inputs (they produce NaN/−∞).
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.log_clamped(a, 0.0)
    }

    /// ln(max(x, floor)) — the safe log used for unary potentials.
    pub fn log_clamped(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(floor).ln());
        let ng = self.needs(a);
        self.push(v, Op::LogClamped { a, floor }, ng, "log")
    }

    pub fn clamp_max(&mut self, a: NodeId, hi: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.min(hi));
        let ng = self.needs(a);
        self.push(v, Op::ClampMax { a, hi }, ng, "clamp_max")
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::softmax_rows(self.value(a))?;
        let ng = self.needs(a);
        self.push(v, Op::SoftmaxRows { a }, ng, "softmax_rows")
    }

    /// Batch normalization over the batch (row) dimension with per-feature
    /// statistics. Returns `(output, batch_mean, batch_var_unbiased)` so the
    /// caller can fold the batch statistics into its running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Tensor, Tensor)> {
        let vx = self.value(x);
        let (n, f) = bn_dims(vx, self.value(gamma), self.value(beta))?;
        let mut mean = vec![0.0; f];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(vx.row(i)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; f];
        for i in 0..n {
            for ((vv, &v), m) in var.iter_mut().zip(vx.row(i)).zip(&mean) {
                let d = v - m;
                *vv += d * d;
            }
        }
        for vv in var.iter_mut() {
            *vv /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * f];
        for i in 0..n {
            let row = vx.row(i);
            for j in 0..f {
                xhat[i * f + j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let xhat = Tensor::new(vec![n, f], xhat)?;
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            for j in 0..f {
                out[i * f + j] = xhat.at(i, j) * g.data()[j] + b.data()[j];
            }
        }
        let v = Tensor::new(vec![n, f], out)?;
        // Running statistics use the unbiased variance (when defined), the
        // usual convention for evaluation-time estimates.
        let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
        let var_unbiased = Tensor::new(vec![f], var.iter().map(|&v| v * unbias).collect())?;
        let mean_t = Tensor::new(vec![f], mean)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            v,
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std },
            ng,
            "batchnorm",
        )?;
        Ok((id, mean_t, var_unbiased))
    }

    /// Evaluation-mode batch normalization using running statistics — a
    /// per-feature affine map, no batch coupling.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<NodeId> {
        let vx = self.value(x);
        let (n, f) = bn_dims(vx, self.value(gamma), self.value(beta))?;
        if running_mean.shape() != [f] || running_var.shape() != [f] {
            return Err(Error::Shape {
                op: "batchnorm",
                detail: "running statistics do not match feature width".into(),
            });
        }
        let inv_std: Vec<f64> = running_var.data().iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * f];
        for i in 0..n {
            let row = vx.row(i);
            for j in 0..f {
                xhat[i * f + j] = (row[j] - running_mean.data()[j]) * inv_std[j];
            }
        }
        let xhat = Tensor::new(vec![n, f], xhat)?;
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            for j in 0..f {
                out[i * f + j] = xhat.at(i, j) * g.data()[j] + b.data()[j];
            }
        }
        let v = Tensor::new(vec![n, f], out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(v, Op::BatchNormEval { x, gamma, beta, xhat, inv_std }, ng, "batchnorm")
    }

    /// Inverted-scaling dropout: keeps an activation with probability
    /// 1−rate and divides it by the keep probability, so evaluation mode is
    /// exactly the identity (and this method adds no node there).
    pub fn dropout(&mut self, a: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain(format!("dropout rate {rate} outside [0,1)")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let va = self.value(a);
        let mask: Vec<f64> = (0..va.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push(v, Op::Dropout { a, mask }, ng, "dropout")
    }

    /// Pairwise cosine similarity between the rows of `x` (k×d → k×k).
    ///
    /// Norms are clamped below at 1e-8, so an all-zero row yields cosine 0
    /// against every other row; the diagonal is pinned to exactly 1 (cos(x,x) is
    /// identically 1 wherever it is defined, with zero derivative).
    pub fn cosine_rows(&mut self, x: NodeId) -> Result<NodeId> {
        const NORM_FLOOR: f64 = 1e-8;
        let vx = self.value(x);
        let (k, _d) = match vx.shape() {
            [k, d] => (*k, *d),
            s => {
                return Err(Error::Shape {
                    op: "cosine_rows",
                    detail: format!("expected k×d matrix, got {s:?}"),
                })
            }
        };
        let dots = tensor::matmul(vx, vx, false, true)?;
        let mut norms = vec![0.0; k];
        let mut zero_row = vec![false; k];
        for a in 0..k {
            let n = dots.at(a, a).sqrt();
            zero_row[a] = n < NORM_FLOOR;
            norms[a] = n.max(NORM_FLOOR);
        }
        if zero_row.iter().any(|&z| z) {
            log::warn!("cosine_rows: zero-norm embedding row(s); similarity defaults to 0");
        }
        let mut out = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                out[a * k + b] = if a == b {
                    1.0
                } else {
                    (dots.at(a, b) / (norms[a] * norms[b])).clamp(-1.0, 1.0)
                };
            }
        }
        let v = Tensor::new(vec![k, k], out)?;
        let ng = self.needs(x);
        self.push(v, Op::CosineRows { x, norms, zero_row }, ng, "cosine_rows")
    }

    /// out[r, :] = a[idx[r], :].
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("row index {bad} out of {r}"),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(va.row(i));
        }
        let v = Tensor::new(vec![idx.len(), c], data)?;
        let ng = self.needs(a);
        self.push(v, Op::GatherRows { a, idx: idx.to_vec() }, ng, "gather_rows")
    }

    /// out[r] = a[r, idx[r]] — picks one column per row (true-label probe).
    pub fn pick_per_row(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        if idx.len() != r {
            return Err(Error::Shape {
                op: "pick_per_row",
                detail: format!("{} picks for {} rows", idx.len(), r),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Shape {
                op: "pick_per_row",
                detail: format!("column index {bad} out of {c}"),
            });
        }
        let data: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| va.at(i, j)).collect();
        let v = Tensor::new(vec![r], data)?;
        let ng = self.needs(a);
        self.push(v, Op::PickPerRow { a, idx: idx.to_vec() }, ng, "pick_per_row")
    }

    /// Entry similarity over `cells.len()` observed cells:
    /// S[a,b] = us[rows[a], rows[b]] · vs[cols[a], cols[b]].
    pub fn pair_product_gather(
        &mut self,
        us: NodeId,
        vs: NodeId,
        rows: &[usize],
        cols: &[usize],
    ) -> Result<NodeId> {
        if rows.len() != cols.len() {
            return Err(Error::Shape {
                op: "pair_product_gather",
                detail: "rows/cols length mismatch".into(),
            });
        }
        let (vu, vv) = (self.value(us), self.value(vs));
        let (ku, kv) = (vu.rows(), vv.rows());
        if vu.cols() != ku || vv.cols() != kv {
            return Err(Error::Shape {
                op: "pair_product_gather",
                detail: "similarity matrices must be square".into(),
            });
        }
        if rows.iter().any(|&r| r >= ku) || cols.iter().any(|&c| c >= kv) {
            return Err(Error::Shape {
                op: "pair_product_gather",
                detail: "cell index out of bounds".into(),
            });
        }
        let c = rows.len();
        let mut out = vec![0.0; c * c];
        for a in 0..c {
            for b in 0..c {
                out[a * c + b] = vu.at(rows[a], rows[b]) * vv.at(cols[a], cols[b]);
            }
        }
        let v = Tensor::new(vec![c, c], out)?;
        let ng = self.needs(us) || self.needs(vs);
        self.push(
            v,
            Op::PairProductGather { us, vs, rows: rows.to_vec(), cols: cols.to_vec() },
            ng,
            "pair_product_gather",
        )
    }

    /// Stacks p equally-shaped r×c matrices into an (r·c) × p matrix whose
    /// flat row i·c+j carries cell (i,j) of every part.
    pub fn stack_cols_flat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "stack_cols_flat",
                detail: "no parts".into(),
            });
        }
        let (r, c) = (self.value(parts[0]).rows(), self.value(parts[0]).cols());
        for &pid in parts {
            if self.value(pid).shape() != [r, c] {
                return Err(Error::Shape {
                    op: "stack_cols_flat",
                    detail: "parts must share one shape".into(),
                });
            }
        }
        let p = parts.len();
        let mut out = vec![0.0; r * c * p];
        for (u, &pid) in parts.iter().enumerate() {
            let vp = self.value(pid);
            for (flat, &val) in vp.data().iter().enumerate() {
                out[flat * p + u] = val;
            }
        }
        let v = Tensor::new(vec![r * c, p], out)?;
        let ng = parts.iter().any(|&pid| self.needs(pid));
        self.push(v, Op::StackColsFlat { parts: parts.to_vec(), r, c }, ng, "stack_cols_flat")
    }

    /// Zeroes the diagonal of a square matrix (for `exclude_self_messages`).
    pub fn zero_diag(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let k = va.rows();
        if va.cols() != k {
            return Err(Error::Shape {
                op: "zero_diag",
                detail: format!("not square: {:?}", va.shape()),
            });
        }
        let mut v = va.clone();
        for i in 0..k {
            v.set(i, i, 0.0);
        }
        let ng = self.needs(a);
        self.push(v, Op::ZeroDiag { a }, ng, "zero_diag")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, ng, "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::Shape {
                op: "mean",
                detail: "mean of empty tensor".into(),
            });
        }
        let s: f64 = va.data().iter().sum();
        let v = Tensor::scalar(s / va.len() as f64);
        let ng = self.needs(a);
        self.push(v, Op::MeanAll { a }, ng, "mean")
    }

    /// Mean squared error between two same-shape tensors → scalar.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.is_empty() {
            return Err(Error::Shape {
                op: "mse",
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let v = Tensor::scalar(s / va.len() as f64);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mse { a, b }, ng, "mse")
    }

    /// Runs the adjoint rules from `loss` (a scalar node) back to the leaves.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            });
        }
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let contribs = self.node_backward(idx)?;
            for (pid, contrib) in contribs {
                let slot = &mut self.nodes[pid.0].grad;
                match slot {
                    None => *slot = Some(contrib),
                    Some(g) => {
                        for (gv, cv) in g.data_mut().iter_mut().zip(contrib.data()) {
                            *gv += cv;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradients of every named parameter leaf, zero-filled where the loss
    /// did not touch the parameter.
    pub fn leaf_grads(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for node in &self.nodes {
            if let Op::Leaf { name: Some(name) } = &node.op {
                if !node.needs_grad {
                    continue;
                }
                let g = node
                    .grad
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                out.insert(name.clone(), g);
            }
        }
        out
    }

    /// Like [`Graph::leaf_grads`] but moves the gradients out of the tape,
    /// leaving the corresponding slots empty. Preferred on the training hot
    /// path where the tape is discarded right after.
    pub fn take_leaf_grads(&mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for node in self.nodes.iter_mut() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                if !node.needs_grad {
                    continue;
                }
                let g = node
                    .grad
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                out.insert(name.clone(), g);
            }
        }
        out
    }

    /// Adjoint rule dispatch: contributions of node `idx` to its parents.
    fn node_backward(&self, idx: usize) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[idx];
        let g = node.grad.as_ref().expect("checked by caller");
        let mut out: Vec<(NodeId, Tensor)> = Vec::new();
        let mut emit = |id: NodeId, t: Tensor| {
            if self.nodes[id.0].needs_grad {
                out.push((id, t));
            }
        };
        match &node.op {
            Op::Leaf { .. } | Op::Constant => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    // dA = dC·B'ᵀ, transposed back if the forward used Aᵀ.
                    let da = if !*ta {
                        tensor::matmul(g, vb, false, !*tb)?
                    } else {
                        tensor::matmul(vb, g, *tb, true)?
                    };
                    emit(*a, da);
                }
                if self.needs(*b) {
                    let db = if !*tb {
                        tensor::matmul(va, g, !*ta, false)?
                    } else {
                        tensor::matmul(g, va, true, *ta)?
                    };
                    emit(*b, db);
                }
            }
            Op::Add { a, b } => {
                emit(*a, g.clone());
                emit(*b, g.clone());
            }
            Op::AddBias { a, bias } => {
                emit(*a, g.clone());
                if self.needs(*bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    emit(*bias, Tensor::new(vec![c], db)?);
                }
            }
            Op::AddScalar { a } => emit(*a, g.clone()),
            Op::Sub { a, b } => {
                emit(*a, g.clone());
                emit(*b, g.map(|x| -x));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = zip_mul(g, vb)?;
                    emit(*a, da);
                }
                if self.needs(*b) {
                    let db = zip_mul(g, va)?;
                    emit(*b, db);
                }
            }
            Op::MulScalar { a, s } => emit(*a, g.map(|x| x * s)),
            Op::Neg { a } => emit(*a, g.map(|x| -x)),
            Op::Relu { a } => {
                let va = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                emit(*a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::LogClamped { a, floor } => {
                let va = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gv, &x)| if x > *floor { gv / x } else { 0.0 })
                    .collect();
                emit(*a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::ClampMax { a, hi } => {
                let va = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gv, &x)| if x < *hi { gv } else { 0.0 })
                    .collect();
                emit(*a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::SoftmaxRows { a } => {
                // dx = y ⊙ (dy − ⟨dy, y⟩ per row)
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dotv: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - dotv);
                    }
                }
                emit(*a, Tensor::new(vec![r, c], dx)?);
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let (n, f) = (xhat.rows(), xhat.cols());
                let vg = self.value(*gamma);
                // Column sums of dy and dy⊙xhat feed both the parameter
                // gradients and the batch-statistics terms of dx.
                let mut sum_dy = vec![0.0; f];
                let mut sum_dy_xhat = vec![0.0; f];
                for i in 0..n {
                    let gr = &g.data()[i * f..(i + 1) * f];
                    let xr = xhat.row(i);
                    for j in 0..f {
                        sum_dy[j] += gr[j];
                        sum_dy_xhat[j] += gr[j] * xr[j];
                    }
                }
                if self.needs(*x) {
                    let nf = n as f64;
                    let mut dx = vec![0.0; n * f];
                    for i in 0..n {
                        let gr = &g.data()[i * f..(i + 1) * f];
                        let xr = xhat.row(i);
                        for j in 0..f {
                            let dxhat = gr[j] * vg.data()[j];
                            // Consolidated train-mode rule:
                            // dx = (inv_std/n)·(n·dxhat − Σdxhat − xhat·Σ(dxhat⊙xhat))
                            dx[i * f + j] = inv_std[j] / nf
                                * (nf * dxhat
                                    - vg.data()[j] * sum_dy[j]
                                    - xr[j] * vg.data()[j] * sum_dy_xhat[j]);
                        }
                    }
                    emit(*x, Tensor::new(vec![n, f], dx)?);
                }
                if self.needs(*gamma) {
                    emit(*gamma, Tensor::new(vec![f], sum_dy_xhat.clone())?);
                }
                if self.needs(*beta) {
                    emit(*beta, Tensor::new(vec![f], sum_dy.clone())?);
                }
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let (n, f) = (xhat.rows(), xhat.cols());
                let vg = self.value(*gamma);
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * f];
                    for i in 0..n {
                        let gr = &g.data()[i * f..(i + 1) * f];
                        for j in 0..f {
                            dx[i * f + j] = gr[j] * vg.data()[j] * inv_std[j];
                        }
                    }
                    emit(*x, Tensor::new(vec![n, f], dx)?);
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dgamma = vec![0.0; f];
                    let mut dbeta = vec![0.0; f];
                    for i in 0..n {
                        let gr = &g.data()[i * f..(i + 1) * f];
                        let xr = xhat.row(i);
                        for j in 0..f {
                            dgamma[j] += gr[j] * xr[j];
                            dbeta[j] += gr[j];
                        }
                    }
                    emit(*gamma, Tensor::new(vec![f], dgamma)?);
                    emit(*beta, Tensor::new(vec![f], dbeta)?);
                }
            }
            Op::Dropout { a, mask } => {
                let data = g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                emit(*a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::CosineRows { x, norms, zero_row } => {
                let vx = self.value(*x);
                let (k, d) = (vx.rows(), vx.cols());
                let cosv = &node.value;
                // Off-diagonal entries only: the diagonal is a constant 1.
                // dX = (GN + GNᵀ)·X + Σ_b -(G[a,b]+G[b,a])·cos[a,b]/n_a · x_a/n_a
                // with GN[a,b] = G[a,b]/(n_a·n_b).
                let mut gn = vec![0.0; k * k];
                let mut dnorm = vec![0.0; k];
                for a in 0..k {
                    for b in 0..k {
                        if a == b {
                            continue;
                        }
                        let gv = g.at(a, b);
                        if gv == 0.0 {
                            continue;
                        }
                        gn[a * k + b] = gv / (norms[a] * norms[b]);
                        let t = gv * cosv.at(a, b) / norms[a];
                        dnorm[a] -= t;
                        dnorm[b] -= gv * cosv.at(a, b) / norms[b];
                    }
                }
                let gn_t = Tensor::new(vec![k, k], gn)?;
                let mut dx = tensor::matmul(&gn_t, vx, false, false)?;
                let gnt = tensor::matmul(&gn_t, vx, true, false)?;
                for (a, b) in dx.data_mut().iter_mut().zip(gnt.data()) {
                    *a += b;
                }
                for a in 0..k {
                    if zero_row[a] || dnorm[a] == 0.0 {
                        continue;
                    }
                    let scale = dnorm[a] / norms[a];
                    let row = vx.row(a).to_vec();
                    let drow = &mut dx.data_mut()[a * d..(a + 1) * d];
                    for (dv, xv) in drow.iter_mut().zip(row) {
                        *dv += scale * xv;
                    }
                }
                emit(*x, dx);
            }
            Op::GatherRows { a, idx } => {
                let va = self.value(*a);
                let (r, c) = (va.rows(), va.cols());
                let mut da = vec![0.0; r * c];
                for (pos, &src) in idx.iter().enumerate() {
                    let gr = &g.data()[pos * c..(pos + 1) * c];
                    let dr = &mut da[src * c..(src + 1) * c];
                    for (d, &gv) in dr.iter_mut().zip(gr) {
                        *d += gv;
                    }
                }
                emit(*a, Tensor::new(vec![r, c], da)?);
            }
            Op::PickPerRow { a, idx } => {
                let va = self.value(*a);
                let (r, c) = (va.rows(), va.cols());
                let mut da = vec![0.0; r * c];
                for (i, &j) in idx.iter().enumerate() {
                    da[i * c + j] += g.data()[i];
                }
                emit(*a, Tensor::new(vec![r, c], da)?);
            }
            Op::PairProductGather { us, vs, rows, cols } => {
                let (vu, vv) = (self.value(*us), self.value(*vs));
                let c = rows.len();
                if self.needs(*us) {
                    let ku = vu.rows();
                    let mut du = vec![0.0; ku * ku];
                    for a in 0..c {
                        for b in 0..c {
                            du[rows[a] * ku + rows[b]] += g.at(a, b) * vv.at(cols[a], cols[b]);
                        }
                    }
                    emit(*us, Tensor::new(vec![ku, ku], du)?);
                }
                if self.needs(*vs) {
                    let kv = vv.rows();
                    let mut dv = vec![0.0; kv * kv];
                    for a in 0..c {
                        for b in 0..c {
                            dv[cols[a] * kv + cols[b]] += g.at(a, b) * vu.at(rows[a], rows[b]);
                        }
                    }
                    emit(*vs, Tensor::new(vec![kv, kv], dv)?);
                }
            }
            Op::StackColsFlat { parts, r, c } => {
                let p = parts.len();
                for (u, &pid) in parts.iter().enumerate() {
                    if !self.needs(pid) {
                        continue;
                    }
                    let mut dp = vec![0.0; r * c];
                    for (flat, dv) in dp.iter_mut().enumerate() {
                        *dv = g.data()[flat * p + u];
                    }
                    emit(pid, Tensor::new(vec![*r, *c], dp)?);
                }
            }
            Op::ZeroDiag { a } => {
                let k = g.rows();
                let mut da = g.clone();
                for i in 0..k {
                    da.set(i, i, 0.0);
                }
                emit(*a, da);
            }
            Op::SumAll { a } => {
                let gv = g.data()[0];
                let va = self.value(*a);
                emit(*a, Tensor::full(va.shape().to_vec(), gv));
            }
            Op::MeanAll { a } => {
                let va = self.value(*a);
                let gv = g.data()[0] / va.len() as f64;
                emit(*a, Tensor::full(va.shape().to_vec(), gv));
            }
            Op::Mse { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let scale = 2.0 * g.data()[0] / va.len() as f64;
                if self.needs(*a) {
                    let da = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(x, y)| scale * (x - y))
                        .collect();
                    emit(*a, Tensor::new(va.shape().to_vec(), da)?);
                }
                if self.needs(*b) {
                    let db = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(x, y)| -scale * (x - y))
                        .collect();
                    emit(*b, Tensor::new(vb.shape().to_vec(), db)?);
                }
            }
        }
        Ok(out)
    }
}

fn zip_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn bn_dims(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize)> {
    if !x.is_matrix() {
        return Err(Error::Shape {
            op: "batchnorm",
            detail: format!("input must be a matrix, got {:?}", x.shape()),
        });
    }
    let (n, f) = (x.rows(), x.cols());
    if gamma.shape() != [f] || beta.shape() != [f] {
        return Err(Error::Shape {
            op: "batchnorm",
            detail: format!("gamma/beta must be [{f}], got {:?}/{:?}", gamma.shape(), beta.shape()),
        });
    }
    if n == 0 {
        return Err(Error::Shape {
            op: "batchnorm",
            detail: "empty batch".into(),
        });
    }
    Ok((n, f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rel_err;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Builds `loss = Σ W ⊙ op(inputs)` with fixed pseudo-random weights,
    /// runs backward, and compares every input gradient against central
    /// differences of the same composed loss.
    fn check_op(
        op: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
        inputs: &[Tensor],
        tol: f64,
    ) {
        let h = 1e-5;
        let build = |ins: &[Tensor]| -> (f64, Vec<Option<Tensor>>) {
            let mut g = Graph::new(Mode::Train);
            let ids: Vec<NodeId> = ins.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
            let out = op(&mut g, &ids).unwrap();
            // Deterministic weights keyed only by the output length keep
            // the composed loss identical across FD probes.
            let n = g.value(out).len();
            let mut wrng = rand_chacha::ChaCha8Rng::seed_from_u64(n as u64 + 17);
            let w: Vec<f64> = (0..n).map(|_| wrng.gen_range(-1.0..1.0)).collect();
            let wt = Tensor::new(g.value(out).shape().to_vec(), w).unwrap();
            let wid = g.constant(wt).unwrap();
            let prod = g.mul(out, wid).unwrap();
            let loss = g.sum(prod).unwrap();
            g.backward(loss).unwrap();
            let lv = g.value(loss).data()[0];
            let grads = ids.iter().map(|&id| g.grad(id).cloned()).collect();
            (lv, grads)
        };
        let (_, analytic) = build(inputs);
        for (i, input) in inputs.iter().enumerate() {
            let a = analytic[i]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
            for j in 0..input.len() {
                let orig = input.data()[j];
                let mut probe: Vec<Tensor> = inputs.to_vec();
                probe[i].data_mut()[j] = orig + h;
                let (plus, _) = build(&probe);
                probe[i].data_mut()[j] = orig - h;
                let (minus, _) = build(&probe);
                let numeric = (plus - minus) / (2.0 * h);
                let e = rel_err(a.data()[j], numeric, 1e-2);
                assert!(
                    e < tol,
                    "input {i} index {j}: analytic {} vs numeric {numeric} (rel {e})",
                    a.data()[j]
                );
            }
        }
    }

    /// Entries bounded away from zero so ReLU/clamp kinks and cosine norm
    /// floors are never crossed by the ±1e-5 probes.
    fn off_kink(r: usize, c: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec((0.2f64..1.8, proptest::bool::ANY), r * c).prop_map(
            move |v| {
                let data = v
                    .into_iter()
                    .map(|(mag, neg)| if neg { -mag } else { mag })
                    .collect();
                Tensor::new(vec![r, c], data).unwrap()
            },
        )
    }

    fn dims() -> impl Strategy<Value = (usize, usize)> {
        (1usize..5, 1usize..5)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn fd_matmul_all_variants((m, k) in dims(), n in 1usize..5,
                                  ta in proptest::bool::ANY, tb in proptest::bool::ANY,
                                  seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ash = if ta { vec![k, m] } else { vec![m, k] };
            let bsh = if tb { vec![n, k] } else { vec![k, n] };
            let a = Tensor::new(ash.clone(), (0..ash[0]*ash[1]).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let b = Tensor::new(bsh.clone(), (0..bsh[0]*bsh[1]).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            check_op(|g, ids| g.matmul(ids[0], ids[1], ta, tb), &[a, b], 1e-5);
        }

        #[test]
        fn fd_elementwise_ops((r, c) in dims(), x in (1usize..5, 1usize..5).prop_flat_map(|(r, c)| off_kink(r, c))) {
            let _ = (r, c);
            let y = x.map(|v| v * 0.7 + 0.1);
            check_op(|g, ids| g.add(ids[0], ids[1]), &[x.clone(), y.clone()], 1e-5);
            check_op(|g, ids| g.sub(ids[0], ids[1]), &[x.clone(), y.clone()], 1e-5);
            check_op(|g, ids| g.mul(ids[0], ids[1]), &[x.clone(), y.clone()], 1e-5);
            check_op(|g, ids| g.mul_scalar(ids[0], -1.7), &[x.clone()], 1e-5);
            check_op(|g, ids| g.add_scalar(ids[0], 0.9), &[x.clone()], 1e-5);
            check_op(|g, ids| g.neg(ids[0]), &[x.clone()], 1e-5);
            check_op(|g, ids| g.relu(ids[0]), &[x.clone()], 1e-5);
            check_op(|g, ids| g.sum(ids[0]), &[x.clone()], 1e-5);
            check_op(|g, ids| g.mean(ids[0]), &[x.clone()], 1e-5);
            check_op(|g, ids| g.mse(ids[0], ids[1]), &[x, y], 1e-5);
        }

        #[test]
        fn fd_log_and_clamp(x in (2usize..5, 2usize..5).prop_flat_map(|(r, c)| off_kink(r, c))) {
            let pos = x.map(|v| v.abs() + 0.5);
            check_op(|g, ids| g.log(ids[0]), &[pos.clone()], 1e-5);
            check_op(|g, ids| g.log_clamped(ids[0], 1e-12), &[pos.clone()], 1e-5);
            // hi = 1.0: entries sit on both sides but never within h of it.
            check_op(|g, ids| g.clamp_max(ids[0], 1.0), &[x], 1e-5);
        }

        #[test]
        fn fd_softmax_rows(x in (1usize..5, 2usize..6).prop_flat_map(|(r, c)| off_kink(r, c))) {
            check_op(|g, ids| g.softmax_rows(ids[0]), &[x], 1e-5);
        }

        #[test]
        fn fd_add_bias(x in (1usize..5, 1usize..5).prop_flat_map(|(r, c)| off_kink(r, c))) {
            let bias = Tensor::new(vec![x.cols()], x.row(0).iter().map(|v| v * 0.3).collect()).unwrap();
            check_op(|g, ids| g.add_bias(ids[0], ids[1]), &[x, bias], 1e-5);
        }

        #[test]
        fn fd_batchnorm_train(x in (2usize..6, 1usize..4).prop_flat_map(|(r, c)| off_kink(r, c))) {
            let f = x.cols();
            let gamma = Tensor::new(vec![f], (0..f).map(|j| 0.8 + 0.1 * j as f64).collect()).unwrap();
            let beta = Tensor::new(vec![f], (0..f).map(|j| -0.2 + 0.05 * j as f64).collect()).unwrap();
            check_op(
                |g, ids| g.batchnorm_train(ids[0], ids[1], ids[2], 1e-5).map(|(id, _, _)| id),
                &[x, gamma, beta],
                1e-4,
            );
        }

        #[test]
        fn fd_batchnorm_eval(x in (1usize..5, 1usize..4).prop_flat_map(|(r, c)| off_kink(r, c))) {
            let f = x.cols();
            let gamma = Tensor::new(vec![f], vec![1.1; f]).unwrap();
            let beta = Tensor::new(vec![f], vec![-0.3; f]).unwrap();
            let rmean = Tensor::new(vec![f], (0..f).map(|j| 0.1 * j as f64).collect()).unwrap();
            let rvar = Tensor::new(vec![f], vec![0.9; f]).unwrap();
            check_op(
                |g, ids| {
                    let rm = rmean.clone();
                    let rv = rvar.clone();
                    g.batchnorm_eval(ids[0], ids[1], ids[2], &rm, &rv, 1e-5)
                },
                &[x, gamma, beta],
                1e-5,
            );
        }

        #[test]
        fn fd_cosine_rows(x in (2usize..5, 2usize..5).prop_flat_map(|(r, c)| off_kink(r, c))) {
            check_op(|g, ids| g.cosine_rows(ids[0]), &[x], 1e-4);
        }

        #[test]
        fn fd_gather_and_pick(x in (3usize..6, 2usize..5).prop_flat_map(|(r, c)| off_kink(r, c)), seed in 0u64..100) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let idx: Vec<usize> = (0..5).map(|_| rng.gen_range(0..x.rows())).collect();
            check_op(|g, ids| g.gather_rows(ids[0], &idx), &[x.clone()], 1e-5);
            let picks: Vec<usize> = (0..x.rows()).map(|_| rng.gen_range(0..x.cols())).collect();
            check_op(|g, ids| g.pick_per_row(ids[0], &picks), &[x], 1e-5);
        }

        #[test]
        fn fd_pair_product_gather(k in 2usize..5, seed in 0u64..100) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let us = Tensor::new(vec![k, k], (0..k*k).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap();
            let vs = Tensor::new(vec![k, k], (0..k*k).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap();
            let cells = 4;
            let rows: Vec<usize> = (0..cells).map(|_| rng.gen_range(0..k)).collect();
            let cols: Vec<usize> = (0..cells).map(|_| rng.gen_range(0..k)).collect();
            check_op(|g, ids| g.pair_product_gather(ids[0], ids[1], &rows, &cols), &[us, vs], 1e-5);
        }

        #[test]
        fn fd_stack_and_zero_diag(k in 2usize..5, p in 1usize..4, seed in 0u64..100) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let parts: Vec<Tensor> = (0..p)
                .map(|_| Tensor::new(vec![k, k], (0..k*k).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
                .collect();
            check_op(
                |g, ids| {
                    let all: Vec<NodeId> = ids.to_vec();
                    g.stack_cols_flat(&all)
                },
                &parts,
                1e-5,
            );
            check_op(|g, ids| g.zero_diag(ids[0]), &[parts[0].clone()], 1e-5);
        }
    }

    #[test]
    fn relu_hand_values() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_grad_equals_mask() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::new(vec![4, 4], (0..16).map(|i| i as f64 + 1.0).collect()).unwrap();
        let mut ge = Graph::new(Mode::Eval);
        let xi = ge.leaf(x.clone()).unwrap();
        let yi = ge.dropout(xi, 0.75, &mut rng).unwrap();
        assert_eq!(xi, yi, "eval-mode dropout must be a no-op");

        let mut gt = Graph::new(Mode::Train);
        let xi = gt.leaf(x.clone()).unwrap();
        let yi = gt.dropout(xi, 0.5, &mut rng).unwrap();
        let loss = gt.sum(yi).unwrap();
        gt.backward(loss).unwrap();
        // loss = Σ mask_i·x_i so ∂loss/∂x_i is exactly the scaled mask.
        let grad = gt.grad(xi).unwrap();
        let y = gt.value(yi);
        let mut kept = 0;
        for i in 0..16 {
            let m = y.data()[i] / x.data()[i];
            assert!((grad.data()[i] - m).abs() < 1e-15);
            assert!(m == 0.0 || (m - 2.0).abs() < 1e-15, "mask scale must be 1/keep");
            if m != 0.0 {
                kept += 1;
            }
        }
        assert!(kept > 0 && kept < 16, "rate 0.5 on 16 cells should keep some, drop some");
    }

    #[test]
    fn dropout_rate_zero_is_identity_in_train_mode() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new(Mode::Train);
        let xi = g.leaf(Tensor::full(vec![3], 2.0)).unwrap();
        let yi = g.dropout(xi, 0.0, &mut rng).unwrap();
        assert_eq!(xi, yi);
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let mut g = Graph::new(Mode::Train);
        let x = Tensor::new(vec![4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap();
        let xi = g.leaf(x).unwrap();
        let gamma = g.constant(Tensor::full(vec![2], 1.0)).unwrap();
        let beta = g.constant(Tensor::zeros(vec![2])).unwrap();
        let (y, mean, var) = g.batchnorm_train(xi, gamma, beta, 1e-5).unwrap();
        let yv = g.value(y);
        for j in 0..2 {
            let col: Vec<f64> = (0..4).map(|i| yv.at(i, j)).collect();
            let m: f64 = col.iter().sum::<f64>() / 4.0;
            let v: f64 = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12, "column mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "column var {v}");
        }
        assert!((mean.data()[0] - 2.5).abs() < 1e-12);
        assert!((mean.data()[1] - 25.0).abs() < 1e-12);
        // Unbiased variance of {1,2,3,4} is 5/3.
        assert!((var.data()[0] - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_eval_is_deterministic_affine() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let rmean = Tensor::new(vec![2], vec![2.0, 3.0]).unwrap();
        let rvar = Tensor::new(vec![2], vec![4.0, 1.0]).unwrap();
        let run = || {
            let mut g = Graph::new(Mode::Eval);
            let xi = g.constant(x.clone()).unwrap();
            let gamma = g.constant(Tensor::full(vec![2], 2.0)).unwrap();
            let beta = g.constant(Tensor::full(vec![2], 0.5)).unwrap();
            let y = g.batchnorm_eval(xi, gamma, beta, &rmean, &rvar, 1e-5).unwrap();
            g.value(y).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "eval-mode batch norm must be bit-identical across calls");
        // Row 0 feature 0: (1−2)/√(4+1e-5) ≈ −0.5, ×2 + 0.5 ≈ −0.5.
        assert!((a[0] - (2.0 * (1.0 - 2.0) / (4.0f64 + 1e-5).sqrt() + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn cosine_rows_hand_values() {
        let mut g = Graph::new(Mode::Eval);
        let x = Tensor::new(
            vec![3, 2],
            vec![
                1.0, 0.0, // e1
                0.0, 2.0, // orthogonal to e1
                -3.0, 0.0, // opposite to e1
            ],
        )
        .unwrap();
        let xi = g.constant(x).unwrap();
        let c = g.cosine_rows(xi).unwrap();
        let cv = g.value(c);
        assert!((cv.at(0, 0) - 1.0).abs() < 1e-15);
        assert!(cv.at(0, 1).abs() < 1e-15);
        assert!((cv.at(0, 2) + 1.0).abs() < 1e-15);
        assert!((cv.at(1, 1) - 1.0).abs() < 1e-15);
        // Symmetry.
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(cv.at(a, b), cv.at(b, a));
            }
        }
    }

    #[test]
    fn log_below_floor_has_zero_gradient() {
        let mut g = Graph::new(Mode::Train);
        let xi = g.leaf(Tensor::new(vec![2], vec![1e-15, 0.5]).unwrap()).unwrap();
        let y = g.log_clamped(xi, 1e-12).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(xi).unwrap();
        assert_eq!(grad.data()[0], 0.0, "clamped entry must not propagate gradient");
        assert!((grad.data()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_parent_accumulates_both_paths() {
        // loss = Σ x⊙x must produce gradient 2x even though both Mul
        // operands are the same node.
        let mut g = Graph::new(Mode::Train);
        let xi = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let sq = g.mul(xi, xi).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(xi).unwrap();
        assert_eq!(grad.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new(Mode::Train);
        let xi = g.leaf(Tensor::full(vec![2, 2], 1.0)).unwrap();
        assert!(matches!(g.backward(xi), Err(Error::Shape { .. })));
    }

    #[test]
    fn constant_branches_get_no_gradient() {
        let mut g = Graph::new(Mode::Train);
        let xi = g.leaf(Tensor::full(vec![2], 1.0)).unwrap();
        let ci = g.constant(Tensor::full(vec![2], 3.0)).unwrap();
        let y = g.mul(xi, ci).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(ci).is_none());
        assert_eq!(g.grad(xi).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new(Mode::Train);
        let xi = g.leaf(Tensor::new(vec![1], vec![-1.0]).unwrap()).unwrap();
        // ln(max(−1, 0)) = −∞ → the op itself must fail.
        assert!(matches!(g.log(xi), Err(Error::NonFinite { .. })));
    }
}
