//! Central finite-difference gradient verification.
//!
//! The relative error of one component is `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
//! The floor keeps near-zero components from dividing rounding noise by
//! rounding noise.

use crate::autograd::{Tape, Var};
use crate::params::ParamStore;
use crate::tensor::Matrix;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(inputs: &[Matrix<f64>], f: &F) -> f64
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).sum()
}

/// Analytic gradients of `sum(f(inputs))` with respect to every input.
pub fn analytic_gradients<F>(inputs: &[Matrix<f64>], f: &F) -> Vec<Matrix<f64>>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);
    vars.iter()
        .zip(inputs)
        .map(|(&v, m)| grads.wrt(v).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
        .collect()
}

/// Central differences of `sum(f(inputs))` with step `eps`.
pub fn numeric_gradients<F>(inputs: &[Matrix<f64>], eps: f64, f: &F) -> Vec<Matrix<f64>>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    let mut work: Vec<Matrix<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Matrix::zeros(inputs[k].rows(), inputs[k].cols());
        for e in 0..inputs[k].len() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + eps;
            let plus = evaluate(&work, f);
            work[k].data_mut()[e] = orig - eps;
            let minus = evaluate(&work, f);
            work[k].data_mut()[e] = orig;
            g.data_mut()[e] = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// Largest componentwise relative error between analytic and numeric gradients.
pub fn max_relative_error<F>(inputs: &[Matrix<f64>], eps: f64, f: F) -> f64
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    let analytic = analytic_gradients(inputs, &f);
    let numeric = numeric_gradients(inputs, eps, &f);
    analytic
        .iter()
        .zip(&numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(&x, &y)| relative_error(x, y)))
        .fold(0.0, f64::max)
}

/// Largest relative error over the gradients of `sum(f)` with respect to the
/// parameters of `store` accepted by `filter`. At most `per_param` entries of
/// each parameter are probed, spread evenly over the matrix.
pub fn max_param_relative_error<F>(store: &ParamStore<f64>, eps: f64, per_param: usize, filter: impl Fn(&str) -> bool, f: F) -> f64
where
    F: Fn(&mut Tape<'_, f64>) -> Var,
{
    let analytic = {
        let mut tape = Tape::with_params(store);
        let out = f(&mut tape);
        tape.backward(out).into_param_grads()
    };
    let eval = |s: &ParamStore<f64>| {
        let mut tape = Tape::with_params(s);
        let out = f(&mut tape);
        tape.value(out).sum()
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        if !filter(store.name(id)) {
            continue;
        }
        let n = store.get(id).len();
        let step = (n / per_param.max(1)).max(1);
        for e in (0..n).step_by(step) {
            let orig = work.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + eps;
            let plus = eval(&work);
            work.get_mut(id).data_mut()[e] = orig - eps;
            let minus = eval(&work);
            work.get_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[e]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    worst
}
