use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Compares reverse-mode gradients of a scalar computation against central
/// finite differences at every coordinate of every parameter.
///
/// `f` builds the computation on a fresh graph from the bound parameters.
/// Returns the worst relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::contract(format!("step {h} outside [1e-6, 1e-4]")));
    }
    let eval = |ps: &[Tensor<T>]| -> Result<(Graph<T>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        if g.value(root).len() != 1 {
            return Err(Error::contract("grad_check needs a scalar-valued function"));
        }
        Ok((g, vars, root))
    };

    let (g, vars, root) = eval(params)?;
    let grads = g.backward(root)?;
    let hh = T::lit(h);
    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let n = params[pi].len();
        let analytic: Vec<T> = grads
            .get(*var)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); n]);
        for j in 0..n {
            let orig = params[pi].values()[j];
            probe[pi].values_mut()[j] = orig + hh;
            let (gp, _, rp) = eval(&probe)?;
            let fp = gp.value(rp).values()[0].as_f64();
            probe[pi].values_mut()[j] = orig - hh;
            let (gm, _, rm) = eval(&probe)?;
            let fm = gm.value(rm).values()[0].as_f64();
            probe[pi].values_mut()[j] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[j].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
