use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Matrix;

/// Gradients smaller than this are compared in absolute rather than relative terms.
const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDiscrepancy {
    pub param: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradientCheck {
    pub entries: Vec<ParamDiscrepancy>,
    pub max_relative: f64,
    pub passed: bool,
}

impl GradientCheck {
    pub fn worst(&self) -> Option<&ParamDiscrepancy> {
        self.entries
            .iter()
            .max_by(|a, b| a.relative.total_cmp(&b.relative))
    }
}

/// Compare reverse-mode gradients against central differences.
///
/// `build` receives a fresh graph plus one parameter leaf per entry of
/// `params` and must return the scalar objective. It is rebuilt for every
/// perturbation, so it has to be deterministic.
pub fn check_gradient<F>(build: F, params: &[Matrix], step: f64, tol: f64) -> Result<GradientCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let evaluate = |values: &[Matrix]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|m| g.param(m.clone())).collect();
        let obj = build(&mut g, &vars)?;
        Ok(g.scalar(obj))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|m| g.param(m.clone())).collect();
    let obj = build(&mut g, &vars)?;
    let analytic = g.grad(obj, &vars)?;

    let mut report = GradientCheck {
        passed: true,
        ..Default::default()
    };
    let mut work: Vec<Matrix> = params.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        for e in 0..params[p].len() {
            let orig = params[p].data()[e];
            work[p].data_mut()[e] = orig + step;
            let up = evaluate(&work)?;
            work[p].data_mut()[e] = orig - step;
            let down = evaluate(&work)?;
            work[p].data_mut()[e] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[e];
            let relative = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.max_relative = report.max_relative.max(relative);
            report.entries.push(ParamDiscrepancy {
                param: p,
                entry: e,
                analytic: a,
                numeric,
                relative,
            });
        }
    }
    report.passed = report.max_relative < tol;
    Ok(report)
}
