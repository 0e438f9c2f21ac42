use crate::kernels::{KernelError, Tape, Tensor, Var};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Central-difference step for 64-bit checks.
pub const STEP: f64 = 1e-5;

// Below this magnitude the error is measured in absolute terms; the rounding
// noise of a central difference is about 1e-16 * |f| / STEP.
const REL_FLOOR: f64 = 1e-4;

/// Checks every element of `params` against `f`'s tape gradients.
///
/// `f` receives a fresh tape and one leaf per parameter and must return a
/// scalar.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>]) -> Result<GradCheckReport, KernelError>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var, KernelError>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64, KernelError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.to_dense(v)).collect();

    let mut probe: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.numel() {
            let orig = param.data()[ei];
            probe[pi].data_mut()[ei] = orig + STEP;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[ei] = orig - STEP;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[pi].data()[ei];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            let mut rel = (a - numeric).abs() / denom;
            if rel.is_nan() {
                rel = f64::INFINITY;
            }
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, ei));
            }
        }
    }
    Ok(report)
}
