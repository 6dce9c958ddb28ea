//! Central finite-difference gradient verification, always in f64.

use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of a gradient comparison. `max_rel` is the largest per-element
/// deviation `|analytic - numeric|` divided by the larger of the two
/// gradients' max-abs values (floored at 1e-8, so near-zero gradients do not
/// inflate the ratio).
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel: f64,
    pub tolerance: f64,
    /// (parameter index, element index) of the worst deviation.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel <= self.tolerance
    }
}

/// Compares `analytic` gradients of `objective` at `params` against central
/// finite differences, one element at a time. Reports; never panics on a
/// mismatch.
pub fn grad_check(
    mut objective: impl FnMut(&[Tensor<f64>]) -> f64,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    step: f64,
    tolerance: f64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport { max_rel: 0.0, tolerance, worst: None };

    for (pi, grad) in analytic.iter().enumerate() {
        assert_eq!(
            params[pi].shape(),
            grad.shape(),
            "analytic gradient {pi} shape mismatch"
        );
        let mut numeric = Tensor::<f64>::zeros(params[pi].shape());
        for ei in 0..params[pi].len() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + step;
            let up = objective(&work);
            work[pi].data_mut()[ei] = orig - step;
            let down = objective(&work);
            work[pi].data_mut()[ei] = orig;
            numeric.data_mut()[ei] = (up - down) / (2.0 * step);
        }
        let scale = grad.max_abs().max(numeric.max_abs()).max(1e-8);
        for ei in 0..numeric.len() {
            let rel = (grad.data()[ei] - numeric.data()[ei]).abs() / scale;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = Some((pi, ei));
            }
        }
    }
    report
}
