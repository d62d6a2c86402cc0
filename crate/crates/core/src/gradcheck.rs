//! Central-difference verification of tape gradients.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::fusion::Label;
use crate::model::{self, ModelConfig, Prepared};
use crate::error::{Error, Result};
use crate::params::{ModelParams, Session};
use crate::tensor::Precision;

/// Default central-difference step.
pub const STEP: f64 = 1e-3;
/// Largest number of step halvings tried when a perturbation crosses a kink.
pub const MAX_HALVINGS: u32 = 12;
/// Gradient magnitude below which errors are measured absolutely; central
/// differences with `STEP` cannot resolve smaller components to 1e-3.
pub const MAGNITUDE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Elements whose ±step perturbation changed a ReLU sign or max-pool
    /// argmax, and were re-measured with a smaller step.
    pub kink_adjusted: usize,
    /// Elements still crossing a kink after [`MAX_HALVINGS`] halvings.
    pub unresolved: usize,
}

/// `|a − n| / max(|a|, |n|, MAGNITUDE_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares tape gradients of the scalar built by `loss` with central
/// differences for every element of every parameter.
///
/// A central difference is only an oracle when `[θ−h, θ+h]` lies on one
/// smooth piece of the loss. When either side takes a different branch at a
/// non-smooth op than the unperturbed point does, the step is halved until
/// it does not.
pub fn check_params<F>(params: &ModelParams, precision: Precision, step: f64, loss: F) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Session<'_>) -> Result<Var>,
{
    let grads = {
        let mut s = Session::new(params, Tape::new(precision));
        let l = loss(&mut s)?;
        s.backward(l)?
    };
    let eval = |p: &ModelParams| -> Result<(f64, Option<u64>)> {
        let mut tape = Tape::inference(precision);
        tape.track_kinks();
        let mut s = Session::new(p, tape);
        let l = loss(&mut s)?;
        let v = s.tape.value(l).data()[0];
        if v.is_finite() {
            Ok((v, s.tape.kink_signature()))
        } else {
            Err(Error::NonFinite("loss".into()))
        }
    };
    let (_, base) = eval(params)?;
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(ToString::to_string).collect();
    let mut reports = Vec::with_capacity(names.len());
    for (idx, name) in names.iter().enumerate() {
        let len = params.get(name)?.len();
        let analytic = grads.get(idx);
        let mut report = ParamCheck {
            name: name.clone(),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            kink_adjusted: 0,
            unresolved: 0,
        };
        for i in 0..len {
            let orig = work.get(name)?.data()[i];
            let mut h = step;
            let mut halvings = 0;
            let numeric = loop {
                work.get_mut(name)?.data_mut()[i] = orig + h;
                let (plus, sp) = eval(&work)?;
                work.get_mut(name)?.data_mut()[i] = orig - h;
                let (minus, sm) = eval(&work)?;
                let smooth = sp == base && sm == base;
                if smooth || halvings == MAX_HALVINGS {
                    if halvings > 0 {
                        report.kink_adjusted += 1;
                    }
                    if !smooth {
                        report.unresolved += 1;
                    }
                    break (plus - minus) / (2.0 * h);
                }
                h *= 0.5;
                halvings += 1;
            };
            work.get_mut(name)?.data_mut()[i] = orig;
            let a = analytic.map_or(0.0, |g| g[i]);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Leading name segment, e.g. `csaf` for `csaf.s2f.wq`.
pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Collapses per-tensor reports into per-group maxima, in first-seen order.
pub fn by_group(reports: &[ParamCheck]) -> Vec<ParamCheck> {
    let mut groups: Vec<ParamCheck> = Vec::new();
    for r in reports {
        let g = group_of(&r.name);
        match groups.iter_mut().find(|x| x.name == g) {
            Some(x) => {
                x.checked += r.checked;
                x.max_rel_err = x.max_rel_err.max(r.max_rel_err);
                x.max_abs_err = x.max_abs_err.max(r.max_abs_err);
                x.kink_adjusted += r.kink_adjusted;
                x.unresolved += r.unresolved;
            }
            None => groups.push(ParamCheck { name: g.to_string(), ..r.clone() }),
        }
    }
    groups
}

/// Full-model BCE gradient check on one prepared input.
pub fn check_model(
    params: &ModelParams,
    cfg: &ModelConfig,
    input: &Prepared,
    label: Label,
    step: f64,
) -> Result<Vec<ParamCheck>> {
    check_params(params, cfg.precision, step, |s| {
        let out = model::forward(s, input, cfg)?;
        model::loss(s, &out, label)
    })
}
