//! Finite-difference gradient verification.
//!
//! Runs in `f64`. The reverse-mode gradient of a scalar-valued graph is
//! compared against central differences `(f(x+h) - f(x-h)) / 2h`
//! componentwise; the worst relative error is returned.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

/// Floor for the relative-error denominator; below this magnitude the
/// finite-difference noise dominates and the comparison is meaningless.
const DENOM_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOM_FLOOR)
}

/// Checks the gradient of `build` (a scalar-valued function of one
/// tensor) at `x` with step `h`. Returns the worst relative error.
pub fn grad_check<F>(build: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.constant(t.clone());
        let out = build(&mut g, id)?;
        let v = g.scalar_value(out);
        if !v.is_finite() {
            return Err(Error::Eval(format!("non-finite function value {v}")));
        }
        Ok(v)
    };
    eval(x)?;

    let mut g = Graph::new();
    let xid = g.param(x.clone());
    let out = build(&mut g, xid)?;
    g.backward(out)?;
    let analytic: Vec<f64> = g
        .grad(xid)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst = 0.0_f64;
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (eval(&xp)? - eval(&xm)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], fd));
    }
    Ok(worst)
}

/// Checks gradients with respect to every tensor in `params`.
///
/// `build` receives a graph with all parameters bound as trainable
/// leaves and must return a scalar loss node.
pub fn grad_check_params<F>(build: F, params: &ParamSet<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<NodeId>,
{
    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let bound = ps.bind(&mut g, false);
        let out = build(&mut g, &bound)?;
        let v = g.scalar_value(out);
        if !v.is_finite() {
            return Err(Error::Eval(format!("non-finite function value {v}")));
        }
        Ok(v)
    };
    eval(params)?;

    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let out = build(&mut g, &bound)?;
    g.backward(out)?;

    let mut worst = 0.0_f64;
    for name in params.names() {
        let id = bound.id(name);
        let n = params.get(name).unwrap().numel();
        let analytic: Vec<f64> = g
            .grad(id)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let mut pp = params.clone();
            pp.get_mut(name).unwrap().data_mut()[i] += h;
            let mut pm = params.clone();
            pm.get_mut(name).unwrap().data_mut()[i] -= h;
            let fd = (eval(&pp)? - eval(&pm)?) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i], fd));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn sum_of_squares_is_nearly_exact() {
        let mut rng = StreamRng::new(11, "gradcheck");
        let x = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
        let err = grad_check(
            |g, id| {
                let sq = g.square(id)?;
                Ok(g.sum_all(sq))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn softmax_cross_entropy_grad() {
        let mut rng = StreamRng::new(12, "gradcheck");
        let x = Tensor::<f64>::randn(vec![4, 6], 1.0, &mut rng);
        let err = grad_check(
            |g, id| g.cross_entropy_rows(id, &[1, 0, 5, 2]),
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = StreamRng::new(13, "gradcheck");
        let x = Tensor::<f64>::randn(vec![3, 5], 1.0, &mut rng);
        let err = grad_check(
            |g, id| {
                let gamma = g.constant(Tensor::filled(vec![5], 1.3));
                let beta = g.constant(Tensor::filled(vec![5], -0.2));
                let y = g.layer_norm(id, gamma, beta, 1e-5)?;
                let sq = g.square(y)?;
                Ok(g.mean_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn gelu_softmax_l2norm_composite_grad() {
        let mut rng = StreamRng::new(14, "gradcheck");
        let x = Tensor::<f64>::randn(vec![2, 6], 1.0, &mut rng);
        let err = grad_check(
            |g, id| {
                let a = g.gelu(id);
                let s = g.softmax_rows(a);
                let n = g.l2_normalize_rows(s);
                let sq = g.square(n)?;
                Ok(g.mean_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::<f64>::scalar(-1.0);
        let res = grad_check(
            |g, id| {
                // ln of a negative scalar -> NaN
                let l = g.scale(id, 1.0);
                let v = g.value(l).data()[0].ln();
                Ok(g.constant(Tensor::scalar(v)))
            },
            &x,
            1e-5,
        );
        assert!(matches!(res, Err(Error::Eval(_))));
    }
}
