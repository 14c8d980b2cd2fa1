//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn assert_pass(&self, what: &str) {
        assert!(
            self.pass,
            "{what}: max relative gradient error {:.3e} exceeds tol {:.1e} over {} entries",
            self.max_rel_err, self.tol, self.checked
        );
    }
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)`.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// finite differences over every element of every input.
#[allow(clippy::needless_range_loop)]
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    assert!(eps > 0.0, "grad_check: eps must be positive");
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars);
        assert_eq!(tape.value(out).len(), 1, "grad_check: f must be scalar-valued");
        tape.value(out)[0]
    };

    // Analytic gradients in one pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars);
    assert_eq!(tape.value(out).len(), 1, "grad_check: f must be scalar-valued");
    let grads = tape.backward(out);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i][j];
            if a == 0.0 && numeric == 0.0 {
                checked += 1;
                continue;
            }
            max_rel = max_rel.max(rel_err(a, numeric));
            checked += 1;
        }
    }
    GradCheckReport { max_rel_err: max_rel, tol, checked, pass: max_rel < tol }
}
