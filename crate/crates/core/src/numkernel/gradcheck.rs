use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkernel::{Graph, ParamStore, Var};

/// Coordinate selection for [`grad_check_with`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per parameter, sampled without
    /// replacement. `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

/// Compare reverse-mode gradients with central differences over every
/// coordinate of every parameter. Returns the max relative error
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, params: &mut ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_with(
        f,
        params,
        GradCheckOptions {
            eps,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(f: F, params: &mut ParamStore, opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut graph = Graph::new();
    let loss = f(&mut graph, params)?;
    let analytic = graph.backward(loss)?.for_store(params);
    drop(graph);

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::no_grad();
        let l = f(&mut g, p)?;
        let v = g.value(l);
        if !v.is_scalar() {
            return Err(Error::Usage("grad_check: f must return a scalar".into()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = params.ids().collect();
    for (id, grad) in ids.into_iter().zip(analytic) {
        let n = params.tensor(id).numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params.tensor(id).data()[c];
            params.tensor_mut(id).data_mut()[c] = orig + opts.eps;
            let plus = eval(params);
            params.tensor_mut(id).data_mut()[c] = orig - opts.eps;
            let minus = eval(params);
            params.tensor_mut(id).data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let a = grad.data()[c];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Tensor;

    #[test]
    fn linear_function_is_exact() {
        let mut store = ParamStore::new();
        store
            .add("w", Tensor::new(&[2, 2], vec![0.3, -0.2, 0.7, 1.1]).unwrap())
            .unwrap();
        let x = Tensor::new(&[2], vec![0.5, -1.5]).unwrap();
        let err = grad_check(
            |g, p| {
                let w = g.param_by_name(p, "w")?;
                let xv = g.constant(x.clone());
                let y = g.matmul(xv, w)?;
                g.sum(y)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }
}
