//! Central-difference gradient verification.
//!
//! The checker perturbs one scalar at a time, so the supplied loss closure
//! must be a pure function of the store: fixed inputs, fixed masks, no
//! running-statistics updates. Training-mode batch normalization satisfies
//! this (batch statistics are recomputed from the inputs each call);
//! dropout must be disabled for the probe.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Outcome of a full-store gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error seen across every checked scalar.
    pub max_rel_err: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst_param: String,
    pub worst_index: usize,
    /// Number of scalars compared.
    pub checked: usize,
}

/// Relative error with an absolute floor: |a−n| / max(|a|, |n|, floor).
/// The floor keeps near-zero gradient pairs from reporting huge relative
/// errors that are pure finite-difference noise.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` gradients against central differences of `loss`
/// for every trainable parameter in the store.
///
/// `h` is the probe step; `floor` is the denominator floor of [`rel_err`].
/// The store is restored bit-for-bit before returning.
pub fn grad_check(
    store: &mut ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(Error::Domain(format!("probe step h = {h} must be positive")));
    }
    let names = store.trainable_names();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for name in &names {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::MissingGrad(name.clone()))?;
        let len = store.tensor(name)?.len();
        if grad.len() != len {
            return Err(Error::Shape {
                op: "grad_check",
                detail: format!("{name}: grad has {} entries, param has {len}", grad.len()),
            });
        }
        for i in 0..len {
            let orig = store.tensor(name)?.data()[i];
            store.nudge(name, i, orig + h)?;
            let plus = loss(store)?;
            store.nudge(name, i, orig - h)?;
            let minus = loss(store)?;
            store.nudge(name, i, orig)?;
            let numeric = (plus - minus) / (2.0 * h);
            let e = rel_err(grad.data()[i], numeric, floor);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Mode};

    #[test]
    fn quadratic_gradient_is_exact() {
        // f(θ) = ‖θ‖² has gradient 2θ; central differences of a quadratic
        // are exact up to rounding, so the check should come back tiny.
        let mut store = ParamStore::new();
        store.insert(
            "theta",
            Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.01]).unwrap(),
            true,
        );
        let mut graph = Graph::new(Mode::Train);
        let theta = graph.param(&store, "theta").unwrap();
        let sq = graph.mul(theta, theta).unwrap();
        let loss = graph.sum(sq).unwrap();
        graph.backward(loss).unwrap();
        let grads = graph.leaf_grads();
        let report = grad_check(
            &mut store,
            &grads,
            |s| {
                let mut g = Graph::new(Mode::Train);
                let t = g.param(s, "theta")?;
                let sq = g.mul(t, t)?;
                let l = g.sum(sq)?;
                Ok(g.value(l).data()[0])
            },
            1e-5,
            1e-2,
        )
        .unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let mut grads = BTreeMap::new();
        // Deliberately wrong: claims gradient 5θ for an ‖θ‖² loss.
        grads.insert("theta".to_string(), Tensor::new(vec![2], vec![5.0, 10.0]).unwrap());
        let report = grad_check(
            &mut store,
            &grads,
            |s| Ok(s.tensor("theta")?.data().iter().map(|x| x * x).sum()),
            1e-5,
            1e-2,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.5);
    }

    #[test]
    fn store_restored_after_probes() {
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(), true);
        let before: Vec<u64> = store.tensor("theta").unwrap().data().iter().map(|x| x.to_bits()).collect();
        let mut grads = BTreeMap::new();
        grads.insert("theta".to_string(), Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        grad_check(
            &mut store,
            &grads,
            |s| Ok(s.tensor("theta")?.data().iter().sum()),
            1e-4,
            1e-2,
        )
        .unwrap();
        let after: Vec<u64> = store.tensor("theta").unwrap().data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(before, after);
    }
}
