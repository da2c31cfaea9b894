//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval_scalar<F>(store: &ParamStore, f: &F, x: &Tensor) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let v = g.leaf(x, false);
    let out = f(&mut g, v)?;
    if g.value(out).len() != 1 {
        return Err(Error::NotScalar(g.shape(out).to_vec()));
    }
    Ok((g.scalar(out), g.kink_pattern()))
}

/// Maximum relative error between the taped gradient of `f` at `x` and the
/// central difference with step `h`, over every element of `x`.
///
/// A probe whose `±h` evaluations put some relu or abs input on the other side
/// of zero straddles a point where `f` has no derivative, and is skipped.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_bound(&ParamStore::new(0), f, x, h)
}

/// [`grad_check`] with the graph bound to `store`, so `f` may use parameters.
pub fn grad_check_bound<F>(store: &ParamStore, f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let v = g.leaf(x, true);
    let out = f(&mut g, v)?;
    let kinks = g.kink_pattern();
    g.backward(out)?;
    let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let (plus, kp) = eval_scalar(store, &f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let (minus, km) = eval_scalar(store, &f, &probe)?;
        probe.data_mut()[i] = orig;
        if kp != kinks || km != kinks {
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Like [`grad_check`] but over parameters of `store`. `f` builds the scalar on
/// a graph bound to the (possibly perturbed) store. At most `max_coords`
/// coordinates are probed, spread evenly over all parameter scalars. Probes
/// across a relu or abs kink are skipped as in [`grad_check_bound`].
pub fn grad_check_params<F>(store: &ParamStore, f: F, h: f64, max_coords: usize) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let (grads, kinks) = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        let kinks = g.kink_pattern();
        g.backward(out)?;
        (g.param_grads(), kinks)
    };
    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.get(id).len()).map(move |i| (id, i)))
        .collect();
    let stride = coords.len().div_ceil(max_coords.max(1)).max(1);

    let eval = |s: &ParamStore| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::with_params(s);
        let out = f(&mut g)?;
        Ok((g.scalar(out), g.kink_pattern()))
    };

    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for &(id, i) in coords.iter().step_by(stride) {
        let orig = store.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + h;
        let (plus, kp) = eval(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig - h;
        let (minus, km) = eval(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig;
        if kp != kinks || km != kinks {
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get(id).map_or(0.0, |g| g[i]);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}
