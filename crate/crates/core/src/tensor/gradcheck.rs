use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Binder, Graph, ParamId, ParamStore, Var};
use crate::error::Result;

/// Anything that owns a [`ParamStore`].
pub trait HasParams {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl HasParams for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinate with the largest error: `(param, flat index, analytic, numeric)`.
    pub worst: Option<(ParamId, usize, f64, f64)>,
}

/// Compares reverse-mode gradients against central differences.
///
/// `loss` must be deterministic: it is called once with gradient tracking and
/// twice more per coordinate with the coordinate perturbed by `±step`. The
/// error for a coordinate is `|analytic - numeric| / max(|analytic|, 1e-12)`.
pub fn finite_diff_check<M, F>(model: &mut M, coords: &[(ParamId, usize)], step: f64, mut loss: F) -> Result<GradCheck>
where
    M: HasParams,
    F: FnMut(&M, &mut Graph, &mut Binder) -> Result<Var>,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut g = Graph::new();
    let mut binder = Binder::new(model.params());
    let l = loss(model, &mut g, &mut binder)?;
    let grads = g.backward(l)?;

    let mut eval = |m: &M| -> Result<f64> {
        let mut g = Graph::no_grad();
        let mut b = Binder::new(m.params());
        let l = loss(m, &mut g, &mut b)?;
        Ok(g.scalar(l))
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for &(id, i) in coords {
        let analytic = binder
            .bound(id)
            .and_then(|v| grads.get(v))
            .map_or(0.0, |gr| gr[i]);
        let orig = model.params().get(id).data()[i];
        model.params_mut().get_mut(id).data_mut()[i] = orig + step;
        let plus = eval(model);
        model.params_mut().get_mut(id).data_mut()[i] = orig - step;
        let minus = eval(model);
        model.params_mut().get_mut(id).data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * step);
        let err = (analytic - numeric).abs() / analytic.abs().max(1e-12);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((id, i, analytic, numeric));
        }
    }
    Ok(report)
}

/// Samples `n` coordinates uniformly over all parameter entries.
pub fn sample_coords(store: &ParamStore, n: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let total = store.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<(ParamId, usize)> = store.ids().map(|id| (id, store.get(id).numel())).collect();
    (0..n)
        .map(|_| {
            let mut flat = rng.random_range(0..total);
            for &(id, len) in &sizes {
                if flat < len {
                    return (id, flat);
                }
                flat -= len;
            }
            unreachable!("flat index within total")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(x: Vec<f64>) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let n = x.len();
        let id = store.insert("x", Tensor::new(vec![n], x).unwrap()).unwrap();
        (store, id)
    }

    #[test]
    fn quadratic_is_exact() {
        let (mut store, id) = store_with(vec![0.3, -1.2, 2.5, 0.7]);
        let coords: Vec<_> = (0..4).map(|i| (id, i)).collect();
        let report = finite_diff_check(&mut store, &coords, 1e-6, |s, g, b| {
            let x = b.var(g, s, id);
            let sq = g.mul(x, x)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-8, "{report:?}");
        assert_eq!(report.checked, 4);
        // analytic gradient of x.x is 2x
        let (_, _, analytic, _) = report.worst.unwrap();
        assert!(coords.iter().any(|&(_, i)| (2.0 * store.get(id).data()[i] - analytic).abs() < 1e-12));
    }

    #[test]
    fn constant_function_has_zero_error() {
        let (mut store, id) = store_with(vec![1.0, 2.0]);
        let report = finite_diff_check(&mut store, &[(id, 0), (id, 1)], 1e-6, |_, g, _| {
            Ok(g.constant(&Tensor::scalar(3.0)))
        })
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        let (_, _, a, n) = report.worst.unwrap();
        assert_eq!((a, n), (0.0, 0.0));
    }

    #[test]
    fn parameters_restored_after_check() {
        let (mut store, id) = store_with(vec![0.5, 0.25]);
        let before = store.clone();
        finite_diff_check(&mut store, &[(id, 0), (id, 1)], 1e-4, |s, g, b| {
            let x = b.var(g, s, id);
            let t = g.tanh(x)?;
            g.sum(t)
        })
        .unwrap();
        assert_eq!(store.get(id).data(), before.get(id).data());
    }

    #[test]
    fn sampled_coords_in_range() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::zeros(&[3, 2])).unwrap();
        store.insert("b", Tensor::zeros(&[5])).unwrap();
        for (id, i) in sample_coords(&store, 100, 7) {
            assert!(i < store.get(id).numel());
        }
        assert_eq!(sample_coords(&store, 10, 1), sample_coords(&store, 10, 1));
    }
}
