//! Central finite-difference oracle for tape gradients.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::tape::{Graph, Var};

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone)]
pub struct ParamGradient {
    pub name: String,
    pub analytic: Array,
    pub numeric: Array,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradientReport {
    pub params: Vec<ParamGradient>,
}

impl GradientReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() <= tol
    }

    /// Name of the parameter with the largest error.
    pub fn worst(&self) -> Option<&ParamGradient> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Scalar objective built on a fresh tape from parameter handles.
pub trait Objective {
    fn build(&self, g: &mut Graph, params: &[Var]) -> Result<Var>;
}

impl<F> Objective for F
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    fn build(&self, g: &mut Graph, params: &[Var]) -> Result<Var> {
        self(g, params)
    }
}

fn evaluate(f: &impl Objective, values: &[Array]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|v| g.constant(v.clone())).collect();
    let out = f.build(&mut g, &vars)?;
    let v = g.value(out);
    if !v.is_scalar() {
        return Err(Error::Contract("objective must be scalar".to_string()));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of `f` with central differences
/// `(f(p + h) − f(p − h)) / 2h`, one coordinate at a time.
pub fn finite_diff_check(
    f: impl Objective,
    params: &[(&str, Array)],
    h: f64,
) -> Result<GradientReport> {
    if !(h > 0.0) {
        return Err(Error::param("h", "step must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, a)| g.param(a.clone())).collect();
    let loss = f.build(&mut g, &vars)?;
    let analytic = g.backward(loss, &vars)?;

    let mut values: Vec<Array> = params.iter().map(|(_, a)| a.clone()).collect();
    let mut report = GradientReport::default();
    for (pi, (name, base)) in params.iter().enumerate() {
        let mut numeric = Array::zeros(base.shape());
        for k in 0..base.len() {
            let x0 = base.data()[k];
            values[pi].data_mut()[k] = x0 + h;
            let fp = evaluate(&f, &values)?;
            values[pi].data_mut()[k] = x0 - h;
            let fm = evaluate(&f, &values)?;
            values[pi].data_mut()[k] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Oracle(alloc::format!(
                    "{name}[{k}]: objective not finite at probe ({fp}, {fm})"
                )));
            }
            numeric.data_mut()[k] = (fp - fm) / (2.0 * h);
        }
        let max_rel_error = analytic[pi]
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        report.params.push(ParamGradient {
            name: name.to_string(),
            analytic: analytic[pi].clone(),
            numeric,
            max_rel_error,
        });
    }
    Ok(report)
}
