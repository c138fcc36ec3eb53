//! Central finite-difference verification of tape gradients in f64.

use crate::autograd::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Per-coordinate comparison summary.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// Fraction of coordinates with relative error at or below `tol`.
    pub frac_within: f64,
    pub tol: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn passes(&self, frac: f64, worst_case: f64) -> bool {
        self.frac_within >= frac && self.max_rel_err <= worst_case
    }
}

/// Relative error with a floor on the denominator so that matching
/// near-zero gradients do not register as failures.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the analytic gradient of a scalar function of `inputs` with a
/// central difference of step `h`. `f` builds the scalar on a fresh tape.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, tol: f64, f: F) -> Result<GradReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(TensorError::Invalid("gradient check needs a scalar output".into()));
    }
    let grads = tape.backward(out);

    let mut coords = 0usize;
    let mut within = 0usize;
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[ti]).unwrap_or(&zeros);
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[ti].data_mut()[j] = orig + h;
            let fp = eval(&probe)?;
            probe[ti].data_mut()[j] = orig - h;
            let fm = eval(&probe)?;
            probe[ti].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[j];
            let r = rel_err(a, numeric);
            coords += 1;
            if r <= tol {
                within += 1;
            }
            if r > max_rel {
                max_rel = r;
                worst = Some((ti, j, a, numeric));
            }
        }
    }
    Ok(GradReport {
        coordinates: coords,
        max_rel_err: max_rel,
        frac_within: if coords == 0 { 1.0 } else { within as f64 / coords as f64 },
        tol,
        worst,
    })
}
