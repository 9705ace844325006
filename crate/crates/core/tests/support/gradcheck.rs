//! Central finite-difference gradient checks.

use emoanti::{GradTape, Result, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const FLOOR: f64 = 1e-8;

/// Elementwise relative error with the denominator clamped at [`FLOOR`].
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct InputCheck {
    pub max_rel_err: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub elements: usize,
}

impl InputCheck {
    fn record(&mut self, a: f64, n: f64) {
        self.max_rel_err = self.max_rel_err.max(rel_error(a, n));
        self.max_abs_analytic = self.max_abs_analytic.max(a.abs());
        self.max_abs_numeric = self.max_abs_numeric.max(n.abs());
        self.elements += 1;
    }
}

/// Compares tape gradients of the scalar built by `build` against central
/// differences for every element of every input.
pub fn check<F>(inputs: &[Tensor], build: F) -> Vec<InputCheck>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor]| -> (GradTape, Vec<Var>, Var) {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars).expect("forward");
        (tape, vars, loss)
    };
    let (mut tape, vars, loss) = run(inputs);
    let grads = tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v).clone()).collect();

    let eval = |values: &[Tensor]| {
        let (tape, _, loss) = run(values);
        tape.value(loss).data()[0]
    };
    let mut reports = Vec::with_capacity(inputs.len());
    let mut values = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut report = InputCheck::default();
        for j in 0..a.numel() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + STEP;
            let up = eval(&values);
            values[i].data_mut()[j] = orig - STEP;
            let down = eval(&values);
            values[i].data_mut()[j] = orig;
            report.record(a.data()[j], (up - down) / (2.0 * STEP));
        }
        reports.push(report);
    }
    reports
}

/// Central-difference derivative of `f` with respect to `values[j]`.
pub fn numeric_partial(values: &mut [f64], j: usize, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = values[j];
    values[j] = orig + STEP;
    let up = f(values);
    values[j] = orig - STEP;
    let down = f(values);
    values[j] = orig;
    (up - down) / (2.0 * STEP)
}
