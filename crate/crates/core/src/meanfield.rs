//! Unfolded mean-field inference over a fully connected CRF on rating
//! entries.
//!
//! Each layer refines the per-entry label distributions `Q` (one row per
//! entry, one column per label) by passing messages between entries:
//!
//! ```text
//! Q_next = softmax_rows( −( Φ + γ · S · (Q · Cᵀ) ) )
//! ```
//!
//! where `Φ` are the unary potentials, `S` the entry similarities, and `C`
//! the label compatibility matrix. `T` stacked layers share all three.
//!
//! Two evaluation paths exist: an explicit one that takes `S` as a full
//! K×K matrix, and a factored one for grid-shaped entry sets where
//! `S = S_rows ⊗ S_cols`; the factored path never materializes `S`, which
//! is what makes whole-matrix inference tractable.

use crate::dataio::LabelSet;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, NodeId};
use crate::tensor::{self, Tensor};

/// Mean-field hyperparameters: pairwise strength γ, number of unfolded
/// layers T, and whether an entry's message to itself is excluded.
#[derive(Debug, Clone, Copy)]
pub struct MeanFieldConfig {
    pub gamma: f64,
    pub layers: usize,
    pub exclude_self: bool,
}

/// Label compatibility `C[u,v] = min((L_u − L_v)², τ)`: squared label
/// distance, truncated at τ. Symmetric with a zero diagonal, entries in
/// `[0, τ]`.
pub fn build_compatibility(labels: &LabelSet, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("truncation τ = {tau} must be positive")));
    }
    let p = labels.count();
    let vals = labels.values();
    let mut c = vec![0.0; p * p];
    for u in 0..p {
        for v in 0..p {
            let d = vals[u] - vals[v];
            c[u * p + v] = (d * d).min(tau);
        }
    }
    Tensor::new(vec![p, p], c)
}

/// Appends `cfg.layers` mean-field layers to the graph and returns the
/// final distributions. All layers share `phi`, `s`, and `compat`;
/// `layers == 0` returns `q0` untouched.
pub fn unfold_mean_field(
    g: &mut Graph,
    phi: NodeId,
    q0: NodeId,
    s: NodeId,
    compat: NodeId,
    cfg: &MeanFieldConfig,
) -> Result<NodeId> {
    check_shapes(
        g.value(phi),
        g.value(q0),
        Some(g.value(s)),
        g.value(compat),
    )?;
    if cfg.layers == 0 {
        return Ok(q0);
    }
    let s_eff = if cfg.exclude_self { g.zero_diag(s)? } else { s };
    let mut q = q0;
    for _ in 0..cfg.layers {
        let pairwise = g.matmul(q, compat, false, true)?;
        let msgs = g.matmul(s_eff, pairwise, false, false)?;
        let scaled = g.mul_scalar(msgs, cfg.gamma)?;
        let total = g.add(phi, scaled)?;
        let neg = g.neg(total)?;
        q = g.softmax_rows(neg)?;
    }
    Ok(q)
}

/// Tensor-only mean-field inference with an explicit K×K similarity.
/// Shares the graph implementation (run in evaluation mode) so the two
/// code paths cannot drift apart.
pub fn mean_field_explicit(
    phi: &Tensor,
    q0: &Tensor,
    s: &Tensor,
    compat: &Tensor,
    cfg: &MeanFieldConfig,
) -> Result<Tensor> {
    let mut g = Graph::new(Mode::Eval);
    let phi_id = g.constant(phi.clone())?;
    let q0_id = g.constant(q0.clone())?;
    let s_id = g.constant(s.clone())?;
    let c_id = g.constant(compat.clone())?;
    let out = unfold_mean_field(&mut g, phi_id, q0_id, s_id, c_id, cfg)?;
    Ok(g.value(out).clone())
}

/// Mean-field inference over an `a × b` grid of entries (row-major node
/// order `k = i·b + j`) whose similarity factors as
/// `S[k,k'] = s_rows[i,i'] · s_cols[j,j']`.
///
/// Exploits `(S_r ⊗ S_c) · vec(X) = vec(S_r · X · S_cᵀ)` per label, so the
/// cost per layer is `p·(a²b + ab²)` instead of `p·(ab)²` and `S` never
/// exists in memory.
pub fn mean_field_factored(
    phi: &Tensor,
    q0: &Tensor,
    s_rows: &Tensor,
    s_cols: &Tensor,
    compat: &Tensor,
    cfg: &MeanFieldConfig,
) -> Result<Tensor> {
    check_shapes(phi, q0, None, compat)?;
    let (a, b) = (s_rows.rows(), s_cols.rows());
    if s_rows.cols() != a || s_cols.cols() != b {
        return Err(Error::Shape {
            op: "mean_field_factored",
            detail: "similarity factors must be square".into(),
        });
    }
    let k = a * b;
    let p = compat.rows();
    if phi.shape() != [k, p] {
        return Err(Error::Shape {
            op: "mean_field_factored",
            detail: format!("potentials {:?} do not match grid {a}×{b} with {p} labels", phi.shape()),
        });
    }
    if cfg.layers == 0 {
        return Ok(q0.clone());
    }
    // Self-message weight of node (i,j) is s_rows[i,i]·s_cols[j,j].
    let self_diag: Vec<f64> = if cfg.exclude_self {
        (0..k).map(|n| s_rows.at(n / b, n / b) * s_cols.at(n % b, n % b)).collect()
    } else {
        Vec::new()
    };
    let mut q = q0.clone();
    let mut x = Tensor::zeros(vec![a, b]);
    for _ in 0..cfg.layers {
        let pairwise = tensor::matmul(&q, compat, false, true)?;
        let mut scores = vec![0.0; k * p];
        for u in 0..p {
            for n in 0..k {
                x.data_mut()[n] = pairwise.data()[n * p + u];
            }
            let t1 = tensor::matmul(s_rows, &x, false, false)?;
            let msg = tensor::matmul(&t1, s_cols, false, true)?;
            for n in 0..k {
                let mut m = msg.data()[n];
                if cfg.exclude_self {
                    m -= self_diag[n] * pairwise.data()[n * p + u];
                }
                scores[n * p + u] = -(phi.data()[n * p + u] + cfg.gamma * m);
            }
        }
        let scores = Tensor::new(vec![k, p], scores)?;
        scores.check_finite("mean_field_factored")?;
        q = tensor::softmax_rows(&scores)?;
    }
    Ok(q)
}

fn check_shapes(phi: &Tensor, q0: &Tensor, s: Option<&Tensor>, compat: &Tensor) -> Result<()> {
    if !phi.is_matrix() || phi.shape() != q0.shape() {
        return Err(Error::Shape {
            op: "mean_field",
            detail: format!("potentials {:?} vs distributions {:?}", phi.shape(), q0.shape()),
        });
    }
    let (k, p) = (phi.rows(), phi.cols());
    if compat.shape() != [p, p] {
        return Err(Error::Shape {
            op: "mean_field",
            detail: format!("compatibility {:?} for {p} labels", compat.shape()),
        });
    }
    if let Some(s) = s {
        if s.shape() != [k, k] {
            return Err(Error::Shape {
                op: "mean_field",
                detail: format!("similarity {:?} for {k} entries", s.shape()),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight-line reimplementation of one mean-field pass, nested loops
    /// only — deliberately shares no code with the module above.
    fn oracle(
        phi: &Tensor,
        q0: &Tensor,
        s: &Tensor,
        compat: &Tensor,
        gamma: f64,
        layers: usize,
        exclude_self: bool,
    ) -> Tensor {
        let (k, p) = (phi.rows(), phi.cols());
        let mut q: Vec<Vec<f64>> = (0..k).map(|n| q0.row(n).to_vec()).collect();
        for _ in 0..layers {
            let mut next = vec![vec![0.0; p]; k];
            for node in 0..k {
                let mut scores = vec![0.0; p];
                for u in 0..p {
                    let mut m = 0.0;
                    for other in 0..k {
                        if exclude_self && other == node {
                            continue;
                        }
                        let mut inner = 0.0;
                        for v in 0..p {
                            inner += q[other][v] * compat.at(u, v);
                        }
                        m += s.at(node, other) * inner;
                    }
                    scores[u] = -(phi.at(node, u) + gamma * m);
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|&z| (z - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for u in 0..p {
                    next[node][u] = exps[u] / z;
                }
            }
            q = next;
        }
        Tensor::from_rows(&q).unwrap()
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        k: usize,
        p: usize,
    ) -> (Tensor, Tensor, Tensor, Tensor) {
        // Potentials in a modest range, base distributions consistent with
        // them, a symmetric unit-diagonal similarity, and a compatibility
        // built from evenly spaced labels.
        let phi = Tensor::new(vec![k, p], (0..k * p).map(|_| rng.gen_range(0.0..3.0)).collect()).unwrap();
        let q0 = tensor::softmax_rows(&phi.map(|x| -x)).unwrap();
        let mut s = vec![0.0; k * k];
        for a in 0..k {
            s[a * k + a] = 1.0;
            for b in 0..a {
                let v = rng.gen_range(0.0..1.0);
                s[a * k + b] = v;
                s[b * k + a] = v;
            }
        }
        let s = Tensor::new(vec![k, k], s).unwrap();
        let labels = LabelSet::new((0..p).map(|i| 1.0 + i as f64).collect()).unwrap();
        let compat = build_compatibility(&labels, 12.0).unwrap();
        (phi, q0, s, compat)
    }

    #[test]
    fn compatibility_hand_values() {
        let labels = LabelSet::new(vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let c = build_compatibility(&labels, 12.0).unwrap();
        assert_eq!(c.at(0, 4), 12.0, "(1−5)² = 16 truncates to 12");
        assert_eq!(c.at(1, 3), 4.0, "(2−4)² = 4");
        for u in 0..5 {
            assert_eq!(c.at(u, u), 0.0);
            for v in 0..5 {
                assert_eq!(c.at(u, v), c.at(v, u));
                assert!(c.at(u, v) <= 12.0);
            }
        }
    }

    #[test]
    fn compatibility_rejects_bad_tau() {
        let labels = LabelSet::new(vec![1.0, 2.0]).unwrap();
        assert!(build_compatibility(&labels, 0.0).is_err());
        assert!(build_compatibility(&labels, -1.0).is_err());
        assert!(build_compatibility(&labels, f64::NAN).is_err());
    }

    #[test]
    fn compatibility_transform_hand_value() {
        // Q·Cᵀ with Q = [[0.2, 0.8]] and C = [[0,1],[1,0]] swaps the row.
        let q = Tensor::new(vec![1, 2], vec![0.2, 0.8]).unwrap();
        let c = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = tensor::matmul(&q, &c, false, true).unwrap();
        assert!((out.at(0, 0) - 0.8).abs() < 1e-15);
        assert!((out.at(0, 1) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn one_hot_distribution_reads_compat_row() {
        let labels = LabelSet::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = build_compatibility(&labels, 12.0).unwrap();
        let mut q = Tensor::zeros(vec![1, 4]);
        q.set(0, 2, 1.0);
        let out = tensor::matmul(&q, &c, false, true).unwrap();
        for u in 0..4 {
            assert_eq!(out.at(0, u), c.at(u, 2), "one-hot at v picks column v of C");
        }
    }

    #[test]
    fn message_passing_hand_values() {
        let s = Tensor::new(vec![2, 2], vec![1.0, 0.5, 0.5, 1.0]).unwrap();
        let qp = Tensor::new(vec![2, 2], vec![0.8, 0.2, 0.4, 0.6]).unwrap();
        let out = tensor::matmul(&s, &qp, false, false).unwrap();
        let expect = [1.0, 0.5, 0.8, 0.7];
        for (got, want) in out.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
        // Identity similarity leaves the messages untouched.
        let id = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let same = tensor::matmul(&id, &qp, false, false).unwrap();
        assert_eq!(same.data(), qp.data());
        // All-ones similarity sums each column.
        let ones = Tensor::full(vec![2, 2], 1.0);
        let sums = tensor::matmul(&ones, &qp, false, false).unwrap();
        assert!((sums.at(0, 0) - 1.2).abs() < 1e-15);
        assert!((sums.at(1, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn single_node_two_labels_hand_value() {
        let phi = Tensor::new(vec![1, 2], vec![0.0, (2.0f64).ln()]).unwrap();
        let q0 = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let s = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let compat = Tensor::zeros(vec![2, 2]);
        let cfg = MeanFieldConfig { gamma: 0.05, layers: 3, exclude_self: false };
        let out = mean_field_explicit(&phi, &q0, &s, &compat, &cfg).unwrap();
        // With zero compatibility the messages vanish: softmax(−Φ) = [2/3, 1/3].
        assert!((out.at(0, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((out.at(0, 1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_layers_returns_base_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (phi, q0, s, compat) = random_instance(&mut rng, 4, 3);
        let cfg = MeanFieldConfig { gamma: 0.05, layers: 0, exclude_self: false };
        let out = mean_field_explicit(&phi, &q0, &s, &compat, &cfg).unwrap();
        assert_eq!(out.data(), q0.data());
    }

    #[test]
    fn gamma_zero_reproduces_base_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (phi, q0, s, compat) = random_instance(&mut rng, 5, 4);
        for layers in [1, 5, 30] {
            let cfg = MeanFieldConfig { gamma: 0.0, layers, exclude_self: false };
            let out = mean_field_explicit(&phi, &q0, &s, &compat, &cfg).unwrap();
            for (a, b) in out.data().iter().zip(q0.data()) {
                assert!((a - b).abs() < 1e-12, "γ=0 with T={layers}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn converged_distribution_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (phi, q0, s, compat) = random_instance(&mut rng, 5, 3);
        let run = MeanFieldConfig { gamma: 0.05, layers: 300, exclude_self: false };
        let settled = mean_field_explicit(&phi, &q0, &s, &compat, &run).unwrap();
        let once = MeanFieldConfig { gamma: 0.05, layers: 1, exclude_self: false };
        let again = mean_field_explicit(&phi, &settled, &s, &compat, &once).unwrap();
        for (a, b) in again.data().iter().zip(settled.data()) {
            assert!((a - b).abs() < 1e-12, "fixed point moved: {a} vs {b}");
        }
    }

    #[test]
    fn graph_unfolding_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (phi, q0, s, compat) = random_instance(&mut rng, 3, 3);
        for exclude_self in [false, true] {
            let cfg = MeanFieldConfig { gamma: 0.05, layers: 10, exclude_self };
            let out = mean_field_explicit(&phi, &q0, &s, &compat, &cfg).unwrap();
            let want = oracle(&phi, &q0, &s, &compat, 0.05, 10, exclude_self);
            for (a, b) in out.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10, "graph vs oracle: {a} vs {b}");
            }
        }
    }

    #[test]
    fn factored_matches_explicit_on_kronecker_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b, p) = (3usize, 4usize, 3usize);
        let k = a * b;
        let mk_sym = |rng: &mut ChaCha8Rng, n: usize| {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                m[i * n + i] = 1.0;
                for j in 0..i {
                    let v = rng.gen_range(0.0..1.0);
                    m[i * n + j] = v;
                    m[j * n + i] = v;
                }
            }
            Tensor::new(vec![n, n], m).unwrap()
        };
        let s_rows = mk_sym(&mut rng, a);
        let s_cols = mk_sym(&mut rng, b);
        // Materialize S = S_rows ⊗ S_cols under row-major node order.
        let mut s = vec![0.0; k * k];
        for i in 0..a {
            for j in 0..b {
                for i2 in 0..a {
                    for j2 in 0..b {
                        s[(i * b + j) * k + (i2 * b + j2)] = s_rows.at(i, i2) * s_cols.at(j, j2);
                    }
                }
            }
        }
        let s = Tensor::new(vec![k, k], s).unwrap();
        let phi = Tensor::new(vec![k, p], (0..k * p).map(|_| rng.gen_range(0.0..3.0)).collect()).unwrap();
        let q0 = tensor::softmax_rows(&phi.map(|x| -x)).unwrap();
        let labels = LabelSet::new(vec![1.0, 2.0, 3.0]).unwrap();
        let compat = build_compatibility(&labels, 12.0).unwrap();
        for exclude_self in [false, true] {
            let cfg = MeanFieldConfig { gamma: 0.3, layers: 4, exclude_self };
            let full = mean_field_explicit(&phi, &q0, &s, &compat, &cfg).unwrap();
            let fact = mean_field_factored(&phi, &q0, &s_rows, &s_cols, &compat, &cfg).unwrap();
            for (x, y) in full.data().iter().zip(fact.data()) {
                assert!((x - y).abs() < 1e-12, "explicit {x} vs factored {y} (exclude={exclude_self})");
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (phi, q0, s, compat) = random_instance(&mut rng, 5, 3);
        let cfg = MeanFieldConfig { gamma: 0.2, layers: 5, exclude_self: false };
        let base = mean_field_explicit(&phi, &q0, &s, &compat, &cfg).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let permute_rows = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let phi_p = permute_rows(&phi);
        let q0_p = permute_rows(&q0);
        let mut s_p = Tensor::zeros(vec![5, 5]);
        for (ni, &oi) in perm.iter().enumerate() {
            for (nj, &oj) in perm.iter().enumerate() {
                s_p.set(ni, nj, s.at(oi, oj));
            }
        }
        let out_p = mean_field_explicit(&phi_p, &q0_p, &s_p, &compat, &cfg).unwrap();
        for (ni, &oi) in perm.iter().enumerate() {
            for u in 0..3 {
                assert!(
                    (out_p.at(ni, u) - base.at(oi, u)).abs() < 1e-12,
                    "permuting the nodes must permute the outputs"
                );
            }
        }
    }

    #[test]
    fn exclude_self_only_matters_through_the_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (phi, q0, mut s, compat) = random_instance(&mut rng, 4, 3);
        for i in 0..4 {
            s.set(i, i, 0.0);
        }
        let on = MeanFieldConfig { gamma: 0.3, layers: 3, exclude_self: true };
        let off = MeanFieldConfig { gamma: 0.3, layers: 3, exclude_self: false };
        let a = mean_field_explicit(&phi, &q0, &s, &compat, &on).unwrap();
        let b = mean_field_explicit(&phi, &q0, &s, &compat, &off).unwrap();
        assert_eq!(a.data(), b.data(), "zero-diagonal S makes the flag a no-op");
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let phi = Tensor::zeros(vec![3, 2]);
        let q0 = Tensor::zeros(vec![3, 2]);
        let s = Tensor::zeros(vec![2, 2]);
        let compat = Tensor::zeros(vec![2, 2]);
        let cfg = MeanFieldConfig { gamma: 0.1, layers: 1, exclude_self: false };
        assert!(mean_field_explicit(&phi, &q0, &s, &compat, &cfg).is_err());
        let bad_compat = Tensor::zeros(vec![3, 3]);
        let s_ok = Tensor::zeros(vec![3, 3]);
        assert!(mean_field_explicit(&phi, &q0, &s_ok, &bad_compat, &cfg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn outputs_are_row_stochastic(k in 1usize..7, p in 2usize..5, seed in 0u64..1000,
                                      layers in 1usize..6, exclude in proptest::bool::ANY) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (phi, q0, s, compat) = random_instance(&mut rng, k, p);
            let cfg = MeanFieldConfig { gamma: 0.5, layers, exclude_self: exclude };
            let out = mean_field_explicit(&phi, &q0, &s, &compat, &cfg).unwrap();
            for n in 0..k {
                let row = out.row(n);
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9, "row {n} sums to {sum}");
                for &x in row {
                    prop_assert!(x >= 0.0);
                }
            }
        }

        #[test]
        fn random_instances_match_oracle(k in 1usize..7, p in 2usize..5, seed in 0u64..1000,
                                         layers in 1usize..8, exclude in proptest::bool::ANY) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (phi, q0, s, compat) = random_instance(&mut rng, k, p);
            let cfg = MeanFieldConfig { gamma: 0.05, layers, exclude_self: exclude };
            let out = mean_field_explicit(&phi, &q0, &s, &compat, &cfg).unwrap();
            let want = oracle(&phi, &q0, &s, &compat, 0.05, layers, exclude);
            for (a, b) in out.data().iter().zip(want.data()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
