//! Finite-difference gradient checking.
//!
//! The caller supplies named parameter tensors and a builder closure that
//! assembles a scalar loss from them on a fresh graph. One analytic backward
//! pass is compared against central differences of every element of every
//! parameter. Relative error uses an absolute floor of 1e-6 so genuinely
//! zero gradients are not drowned in finite-difference noise.
//!
//! An element whose first estimate disagrees is re-measured at other step
//! sizes before it is reported, and the best agreement wins. The two
//! artifacts this absorbs pull in opposite directions: a piecewise-linear
//! kink sits inside the probe window with probability proportional to the
//! step (smaller steps escape it), while roundoff drowns the tiny gradients
//! behind a 1e-5 residual scale (larger steps lift the signal). A real
//! backward error disagrees at every step and still fails.
//!
//! Evaluations run in gradient mode even though no backward pass follows:
//! the cached bias tables keyed for inference must not be consulted while
//! parameters are being perturbed in place.

use std::cell::RefCell;

use crate::graph::{Graph, Value};
use crate::nn::Visit;
use crate::tensor::Tensor;
use crate::Result;

pub type ParamSet = Vec<(String, Tensor<f64>)>;

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub elements: usize,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst element.
    pub worst: String,
    pub elements: usize,
    pub per_param: Vec<ParamReport>,
}

fn rel_err(a: f64, fd: f64) -> f64 {
    let denom = a.abs().max(fd.abs());
    if denom < 1e-6 {
        0.0
    } else {
        (a - fd).abs() / denom
    }
}

/// Errors above this trigger re-measurement at other step sizes.
const REFINE_ABOVE: f64 = 1e-5;
const REFINE_SCALE: [f64; 4] = [8.0, 64.0, 1.0 / 8.0, 1.0 / 64.0];

fn central_diff<F>(params: &mut ParamSet, i: usize, j: usize, step: f64, eval: &F) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let orig = params[i].1.data()[j];
    params[i].1.data_mut()[j] = orig + step;
    let up = eval(params)?;
    params[i].1.data_mut()[j] = orig - step;
    let down = eval(params)?;
    params[i].1.data_mut()[j] = orig;
    Ok((up - down) / (2.0 * step))
}

/// Checks d(loss)/d(param) for every element of every parameter in `params`.
///
/// `build` must register each parameter it uses with [`Graph::param`] on the
/// exact tensors passed in, and return a scalar loss value.
pub fn check_gradients<F>(params: &mut ParamSet, eps: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamSet) -> Result<Value>,
{
    // Analytic pass.
    let analytic: Vec<Tensor<f64>> = {
        let mut g = Graph::new();
        let loss = build(&mut g, params)?;
        g.backward(loss)?;
        params
            .iter()
            .map(|(_, t)| g.grad_for(t).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let eval = |params: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        g.set_instrument(false);
        let loss = build(&mut g, params)?;
        Ok(g.value(loss).item())
    };

    let mut report =
        GradReport { max_rel_err: 0.0, worst: String::new(), elements: 0, per_param: Vec::new() };
    for i in 0..params.len() {
        let mut pr = ParamReport { name: params[i].0.clone(), max_rel_err: 0.0, elements: 0 };
        let n = params[i].1.len();
        for j in 0..n {
            let step = eps * params[i].1.data()[j].abs().max(1.0);
            let fd = central_diff(params, i, j, step, &eval)?;
            let a = analytic[i].data()[j];
            let mut e = rel_err(a, fd);
            if e > REFINE_ABOVE {
                for scale in REFINE_SCALE {
                    let fd = central_diff(params, i, j, step * scale, &eval)?;
                    e = e.min(rel_err(a, fd));
                    if e <= REFINE_ABOVE {
                        break;
                    }
                }
            }
            pr.elements += 1;
            report.elements += 1;
            if e > pr.max_rel_err {
                pr.max_rel_err = e;
            }
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{}[{j}]", params[i].0);
            }
        }
        report.per_param.push(pr);
    }
    Ok(report)
}

/// Checks every parameter of a module against finite differences.
///
/// `forward` rebuilds the module's output on a fresh graph; the loss probed is
/// a fixed pseudo-random weighting of the output so that symmetric outputs
/// cannot hide gradient errors through cancellation.
pub fn check_module_gradients<M, F>(module: &mut M, eps: f64, forward: F) -> Result<GradReport>
where
    M: Visit<f64>,
    F: Fn(&mut Graph<f64>, &mut M) -> Result<Value>,
{
    let mut params: ParamSet = Vec::new();
    module.visit_params("", &mut |name, t| params.push((name, t.clone())));
    let cell = RefCell::new(module);
    check_gradients(&mut params, eps, |g, p| {
        let m = &mut *cell.borrow_mut();
        let mut i = 0;
        m.visit_params("", &mut |_, t| {
            *t = p[i].1.clone();
            i += 1;
        });
        let out = forward(g, m)?;
        let shape = g.value(out).shape().to_vec();
        let probe = Tensor::from_fn(&shape, |idx| {
            let mut h = 0usize;
            for &v in idx {
                h = h.wrapping_mul(31).wrapping_add(v + 1);
            }
            ((h.wrapping_mul(2654435761) % 1000) as f64) / 1000.0 - 0.5
        });
        let c = g.constant(probe);
        let weighted = g.mul(out, c)?;
        Ok(g.sum_all(weighted))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        let mut params: ParamSet = vec![("x".into(), Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap())];
        let report = check_gradients(&mut params, 1e-5, |g, p| {
            let x = g.param(&p[0].1);
            let sq = g.mul(x, x)?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
        assert_eq!(report.elements, 3);
    }

    #[test]
    fn nonlinear_chain_checks_out() {
        let mut params: ParamSet = vec![("x".into(), Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap())];
        let report = check_gradients(&mut params, 1e-5, |g, p| {
            let x = g.param(&p[0].1);
            let y = g.gelu(x);
            let z = g.softmax_lastdim(y)?;
            let w = g.mul(z, x)?;
            Ok(g.sum_all(w))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "{report:?}");
    }

    #[test]
    fn unused_parameter_reports_zero_error() {
        let mut params: ParamSet = vec![
            ("used".into(), Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()),
            ("unused".into(), Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap()),
        ];
        let report = check_gradients(&mut params, 1e-5, |g, p| {
            let x = g.param(&p[0].1);
            Ok(g.sum_all(x))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
        assert_eq!(report.elements, 4);
    }
}
