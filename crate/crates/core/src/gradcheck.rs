//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("step {0} outside [1e-6, 1e-4]")]
    Step(f64),
    #[error("loss is not finite at a perturbed point ({param}[{coord}])")]
    NonFinite { param: String, coord: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter; every coordinate when larger than the tensor.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_param: 6,
            seed: 0,
        }
    }
}

/// Max over sampled coordinates of `|analytic - numeric| / max(1, |analytic|)`
/// for the listed parameters. `loss` must build a scalar loss on a fresh graph.
pub fn grad_check<F>(
    store: &ParamStore,
    params: &[ParamId],
    opts: GradCheckOptions,
    loss: F,
) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Graph) -> Result<Var, TensorError>,
{
    if !(1e-6..=1e-4).contains(&opts.step) {
        return Err(GradCheckError::Step(opts.step));
    }
    let mut g = Graph::new(store);
    let out = loss(&mut g)?;
    let grads = g.backward(out)?;
    drop(g);

    let eval = |s: &ParamStore| -> Result<f64, TensorError> {
        let mut g = Graph::new(s);
        let v = loss(&mut g)?;
        Ok(g.value(v).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut perturbed = store.clone();
    let mut worst = 0.0f64;
    for &id in params {
        let n = store.get(id).numel();
        let analytic = grads.param(id).map(|t| t.into_data()).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if opts.coords_per_param >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.coords_per_param).into_vec()
        };
        for c in coords {
            let orig = store.get(id).data()[c];
            let bad = || GradCheckError::NonFinite {
                param: store.name(id).to_string(),
                coord: c,
            };
            perturbed.get_mut(id).data_mut()[c] = orig + opts.step;
            let up = eval(&perturbed).map_err(|_| bad())?;
            perturbed.get_mut(id).data_mut()[c] = orig - opts.step;
            let down = eval(&perturbed).map_err(|_| bad())?;
            perturbed.get_mut(id).data_mut()[c] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(bad());
            }
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[c];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// [`grad_check`] over every parameter in the store.
pub fn grad_check_all<F>(store: &ParamStore, opts: GradCheckOptions, loss: F) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Graph) -> Result<Var, TensorError>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check(store, &ids, opts, loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::new(1);
        let p = s.trunc_normal("p", &[5], 1.0).unwrap();
        let err = grad_check_all(&s, GradCheckOptions::default(), |g| {
            let x = g.param(p);
            let sq = g.mul(x, x)?;
            let sc = g.scale(sq, 3.0)?;
            g.sum(sc)
        })
        .unwrap();
        assert!(err <= 1e-9, "{err}");
        let _ = p;
    }

    #[test]
    fn rejects_bad_step() {
        let s = ParamStore::new(1);
        let r = grad_check_all(
            &s,
            GradCheckOptions {
                step: 1e-2,
                ..Default::default()
            },
            |g| Ok(g.constant(Tensor::scalar(0.0))),
        );
        assert!(matches!(r, Err(GradCheckError::Step(_))));
    }

    #[test]
    fn detects_corrupted_gradient() {
        let mut s = ParamStore::new(1);
        let p = s.trunc_normal("p", &[3], 1.0).unwrap();
        let err = grad_check_all(&s, GradCheckOptions::default(), |g| {
            g.inject_gradient_fault(1.5);
            let x = g.param(p);
            let sq = g.mul(x, x)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(err > 1e-2);
    }
}
