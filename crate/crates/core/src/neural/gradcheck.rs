//! Central finite-difference gradient checks.

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-4;

pub fn random_tensor<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Tensor {
    let d = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(rows, cols, d).expect("shape")
}

/// Worst relative error between analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compare the tape gradient of a scalar function of `leaves` against central
/// differences with step [`FD_STEP`]. Fails when any entry's error relative to
/// `max(|analytic|, |numeric|, FD_FLOOR)` exceeds `tol`.
pub fn check_gradients<F>(leaves: &[Tensor], tol: f64, f: F) -> std::result::Result<GradReport, String>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> std::result::Result<f64, String> {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.param(v.clone())).collect();
        let out = f(&mut t, &vars).map_err(|e| e.to_string())?;
        Ok(t.value(out).item())
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|v| t.param(v.clone())).collect();
    let out = f(&mut t, &vars).map_err(|e| e.to_string())?;
    let grads = t.backward(out).map_err(|e| e.to_string())?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut vals = leaves.to_vec();
    for (li, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(leaves[li].rows(), leaves[li].cols());
        let analytic = grads.get(*v).unwrap_or(&zeros);
        for i in 0..leaves[li].len() {
            let orig = vals[li].data()[i];
            vals[li].data_mut()[i] = orig + FD_STEP;
            let up = eval(&vals)?;
            vals[li].data_mut()[i] = orig - FD_STEP;
            let down = eval(&vals)?;
            vals[li].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            checked += 1;
            if rel > tol {
                return Err(format!(
                    "leaf {li} entry {i}: analytic {a:.6e} vs numeric {numeric:.6e} (rel {rel:.2e})"
                ));
            }
            worst = worst.max(rel);
        }
    }
    Ok(GradReport {
        max_rel_error: worst,
        checked,
    })
}
