//! Central finite-difference checks of reverse-mode gradients.
//!
//! The numeric side only evaluates forward values; it never touches
//! [`Graph::backward`].

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    /// Relative tolerance per element.
    pub tol: f64,
    /// Differences below this are accepted regardless of relative error
    /// (gradients that are zero up to rounding).
    pub abs_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    /// Elements where a kink (relu, max) sits inside the step and the one-sided
    /// differences disagree; excluded from `failures`.
    pub nonsmooth: usize,
    pub max_rel_error: f64,
    /// Largest `|analytic − numeric|` over every checked element.
    pub max_abs_error: f64,
    /// `(input, element, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

impl GradCheck {
    /// Checks every element of every input.
    ///
    /// `f` builds a scalar loss from the inputs; it is called once with the
    /// inputs as trainable leaves and `2·numel` more times with perturbed
    /// constants. It must be deterministic (freeze any sampling by seed).
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let f0 = g.value(loss).item();
        let grads = g.backward(loss)?;
        let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zero(v)).collect();

        let eval = |perturbed: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
            let loss = f(&mut g, &vars)?;
            Ok(g.value(loss).item())
        };

        let mut report = GradCheckReport::default();
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (ti, a_t) in analytic.iter().enumerate() {
            for ei in 0..inputs[ti].numel() {
                let orig = inputs[ti].data()[ei];
                work[ti].data_mut()[ei] = orig + self.step;
                let fp = eval(&work)?;
                work[ti].data_mut()[ei] = orig - self.step;
                let fm = eval(&work)?;
                work[ti].data_mut()[ei] = orig;

                let numeric = (fp - fm) / (2.0 * self.step);
                let a = a_t.data()[ei];
                report.checked += 1;
                let diff = (a - numeric).abs();
                report.max_abs_error = report.max_abs_error.max(diff);
                if diff <= self.abs_floor {
                    continue;
                }
                let rel = relative_error(a, numeric);
                if rel <= self.tol {
                    if rel > report.max_rel_error {
                        report.max_rel_error = rel;
                        report.worst = Some((ti, ei, a, numeric));
                    }
                    continue;
                }
                let d_plus = (fp - f0) / self.step;
                let d_minus = (f0 - fm) / self.step;
                let jump = (d_plus - d_minus).abs();
                let one_sided = (a - d_plus).abs().min((a - d_minus).abs());
                if jump > 1e-3 * a.abs().max(numeric.abs()).max(1e-6) && one_sided < jump / 4.0 {
                    report.nonsmooth += 1;
                    continue;
                }
                report.failures += 1;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((ti, ei, a, numeric));
                }
            }
        }
        Ok(report)
    }
}
