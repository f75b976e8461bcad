//! Central-difference gradient checking in double precision.

use crate::error::{Error, Result};
use crate::nn::{NormMode, ParamId, ParamStore, Session};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

mod suite;

pub use suite::{case_names, run_suite, CaseResult};

pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-3;

/// Denominator floor for the relative error, so that gradients that are
/// exactly zero analytically compare against finite-difference noise sanely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, element index)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Shape(format!("grad_check needs a scalar function, got {:?}", v.shape())));
    }
    let y = v.item();
    if !y.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = tape.backward(out);
    Ok((y, vars.iter().map(|&v| grads.get_or_zeros(v)).collect()))
}

fn value_only<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let y = tape.value(out).item();
    if !y.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(y)
}

/// Compare the tape gradient of the scalar `f` against central differences
/// with step `eps` for every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = evaluate(&f, inputs)?;
    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, worst: None, checked: 0, tol };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x = input.data()[j];
            probe[i].data_mut()[j] = x + eps;
            let up = value_only(&f, &probe)?;
            probe[i].data_mut()[j] = x - eps;
            let down = value_only(&f, &probe)?;
            probe[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i][j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((i, j));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// [`grad_check`] over a network fragment. `inputs` reach `f` as tape
/// inputs; each of `params` is perturbed too, as input `inputs.len() + k`.
/// Normalisation runs on running statistics so the objective is deterministic.
pub fn grad_check_model<F>(
    store: &ParamStore<f64>,
    params: &[ParamId],
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
{
    let n_in = inputs.len();
    let mut all = inputs.to_vec();
    all.extend(params.iter().map(|&p| store.get(p).clone()));
    grad_check(
        |tape, vars| {
            let mut local = store.clone();
            let mut s = Session::on_tape(&mut local, std::mem::take(tape), false, NormMode::Frozen);
            for (k, &p) in params.iter().enumerate() {
                s.bind_param(p, vars[n_in + k])?;
            }
            let out = f(&mut s, &vars[..n_in]);
            *tape = s.tape;
            out
        },
        &all,
        eps,
        tol,
    )
}
