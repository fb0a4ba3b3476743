//! Central finite-difference gradient checking.
//!
//! The checker rebuilds the forward pass from scratch for every probe, so the
//! analytic path and the numeric path share nothing but the closure.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst observed deviation across all checked parameters.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `build` receives a tape plus one leaf per entry of `params` (in order) and
/// returns the scalar loss. Leaves are registered with `requires_grad` for the
/// analytic pass and as constants for the numeric probes.
pub fn check_gradients<F>(params: &[(String, Tensor)], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    // Analytic gradients.
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = build(&mut tape, &leaves)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&v| tape.grad(v).expect("leaf gradient").to_vec())
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|p| t.constant(p.clone())).collect();
        let l = build(&mut t, &vars)?;
        Ok(t.value(l).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut probe: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    for (pi, (name, _)) in params.iter().enumerate() {
        for ei in 0..probe[pi].numel() {
            let orig = probe[pi].data()[ei];
            probe[pi].data_mut()[ei] = orig + h;
            let up = eval(&probe)?;
            probe[pi].data_mut()[ei] = orig - h;
            let down = eval(&probe)?;
            probe[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = ei;
            }
        }
    }
    Ok(report)
}
