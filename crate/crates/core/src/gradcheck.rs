//! Central finite-difference checks for tape gradients.
//!
//! The numeric side only ever calls the forward closure, so it stays
//! independent of every backward rule it is checking.

use crate::error::Result;
use crate::tensor::{Tape, Var};
use crate::Parameterized;

/// Denominator floor for the relative error, so exact zeros compare cleanly.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    /// Names of every parameter that was probed.
    pub fn names(&self) -> Vec<&str> {
        let mut n: Vec<&str> = self.entries.iter().map(|e| e.name.as_str()).collect();
        n.dedup();
        n
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of every trainable parameter of `model` against
/// central differences with the given `step`. At most `per_param` elements
/// of each parameter are probed (evenly strided), `0` meaning all of them.
pub fn check<M, F>(model: &mut M, loss: F, step: f64, per_param: usize) -> Result<GradReport>
where
    M: Parameterized,
    F: Fn(&M, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(model, &mut tape)?;
    tape.backward(l)?;
    let analytic = tape.param_grads();

    let eval = |m: &M| -> Result<f64> {
        let mut t = Tape::new();
        let v = loss(m, &mut t)?;
        Ok(t.item(v))
    };

    let names: Vec<(String, usize)> = model
        .named_params()
        .into_iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, t)| (n, t.numel()))
        .collect();

    let mut report = GradReport::default();
    for (name, numel) in names {
        let stride = if per_param == 0 || numel <= per_param {
            1
        } else {
            numel / per_param
        };
        let grads = analytic.get(&name);
        for index in (0..numel).step_by(stride).take(if per_param == 0 { numel } else { per_param }) {
            let orig = value_at(model, &name, index);
            set_value(model, &name, index, orig + step);
            let up = eval(model)?;
            set_value(model, &name, index, orig - step);
            let down = eval(model)?;
            set_value(model, &name, index, orig);
            let numeric = (up - down) / (2.0 * step);
            let a = grads.map_or(0.0, |g| g[index]);
            report.entries.push(GradEntry {
                name: name.clone(),
                index,
                analytic: a,
                numeric,
                rel_err: rel_err(a, numeric),
            });
        }
    }
    Ok(report)
}

fn value_at<M: Parameterized>(model: &M, name: &str, index: usize) -> f64 {
    model
        .named_params()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.data()[index])
        .expect("parameter listed above")
}

fn set_value<M: Parameterized>(model: &mut M, name: &str, index: usize, value: f64) {
    if let Some((_, t)) = model.named_params_mut().into_iter().find(|(n, _)| n == name) {
        t.data_mut()[index] = value;
    }
}
