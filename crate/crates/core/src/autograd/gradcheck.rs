//! Central finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Per-tensor worst relative error between analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: Vec<f64>,
    pub evaluations: usize,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare `backward` against `(f(θ+h) − f(θ−h)) / 2h` for every element of
/// every input. Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, floor: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut work = inputs.to_vec();
    let mut report = GradReport { max_rel_error: vec![0.0; inputs.len()], evaluations: 0 };
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.evaluations += 2;
            let num = (plus - minus) / (2.0 * h);
            let a = analytic[i][j];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(floor);
            report.max_rel_error[i] = report.max_rel_error[i].max(err);
        }
    }
    Ok(report)
}
