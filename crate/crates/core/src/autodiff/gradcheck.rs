use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Magnitude below which a gradient entry is compared absolutely rather than
/// relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Outcome of comparing backward gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
    pub failure: Option<String>,
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Checks `f` at `point` by central differences with the given `step`.
///
/// `f` receives a fresh graph and one input var per tensor in `point` and
/// must return a scalar. Evaluation failures are reported, not returned.
pub fn gradcheck<F>(f: F, point: &[Tensor], step: f64, tol: f64) -> GradcheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let failed = |msg: String| GradcheckReport {
        max_rel_error: f64::INFINITY,
        worst: None,
        checked: 0,
        passed: false,
        failure: Some(msg),
    };
    if !(1e-6..=1e-3).contains(&step) {
        return failed(format!("step {step} outside [1e-6, 1e-3]"));
    }

    let eval = |pt: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = pt
            .iter()
            .map(|t| g.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let analytic = match eval(point).and_then(|(g, vars, out)| {
        let grads = g.backward(out)?;
        Ok(vars
            .iter()
            .map(|v| grads.get(*v).cloned().expect("input gradient"))
            .collect::<Vec<_>>())
    }) {
        Ok(a) => a,
        Err(e) => return failed(e.to_string()),
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
        failure: None,
    };
    let mut probe = point.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.numel() {
            let orig = probe[ti].data()[ei];
            let mut value_at = |x: f64| -> Result<f64> {
                probe[ti].data_mut()[ei] = x;
                let (g, _, out) = eval(&probe)?;
                g.value(out).item()
            };
            let numeric = match (value_at(orig + step), value_at(orig - step)) {
                (Ok(hi), Ok(lo)) => (hi - lo) / (2.0 * step),
                (Err(e), _) | (_, Err(e)) => return failed(e.to_string()),
            };
            probe[ti].data_mut()[ei] = orig;
            let err = rel_error(grad.data()[ei], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((ti, ei));
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    report
}
