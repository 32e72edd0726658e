//! Central finite-difference check of recorded gradients.

use super::graph::{Graph, Var};
use super::optim::{ParamId, ParamStore};
use crate::error::Result;

/// Gradient entries smaller than this are compared on this absolute scale.
pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries where the one-sided differences disagree, i.e. the step
    /// crossed a ReLU or max-pool switch. They are excluded from the maximum.
    pub kinks: usize,
}

/// Compares the analytic gradient of the scalar built by `f` against
/// central differences with step `h` for every entry of `ids`.
pub fn check_gradients(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    f: &mut dyn FnMut(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<GradCheck> {
    store.zero_grads();
    {
        let mut g = Graph::new();
        let y = f(&mut g, store)?;
        g.backward(y, store)?;
    }
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let y = f(&mut g, store)?;
        Ok(g.value(y)[0])
    };
    let f0 = eval(store)?;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        kinks: 0,
    };
    for &id in ids {
        let analytic: Vec<f64> = store
            .get(id)
            .tensor
            .grad()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(id).tensor.numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).tensor.values()[i];
            store.get_mut(id).tensor.values_mut()[i] = orig + h;
            let fp = eval(store)?;
            store.get_mut(id).tensor.values_mut()[i] = orig - h;
            let fm = eval(store)?;
            store.get_mut(id).tensor.values_mut()[i] = orig;
            let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
            if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()) + 1e-6 {
                report.kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    store.zero_grads();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn smooth_function_passes() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_fn(vec![5], |i| 0.3 * i as f64 - 0.6));
        let r = check_gradients(&mut store, &[id], 1e-4, &mut |g, s| {
            let x = g.param(s, id);
            let p = g.softmax(x)?;
            g.weighted_sum(p, &[1.0, -2.0, 0.5, 3.0, 0.0])
        })
        .unwrap();
        assert_eq!(r.checked, 5);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn kink_is_flagged_not_counted() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let r = check_gradients(&mut store, &[id], 1e-4, &mut |g, s| {
            let x = g.param(s, id);
            let y = g.relu(x);
            Ok(g.sum(y))
        })
        .unwrap();
        assert_eq!((r.checked, r.kinks), (1, 1));
    }
}
