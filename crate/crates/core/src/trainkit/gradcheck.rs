//! Central finite-difference validation of analytic gradients. The numeric
//! side only ever evaluates the forward loss, so it stays independent of the
//! backward implementation it is checking.

use super::{TrainError, TrainableModel};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub total: usize,
    pub within_tol: usize,
    pub worst_rel: f64,
}

impl GradCheckReport {
    pub fn fraction_ok(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.within_tol as f64 / self.total as f64
        }
    }
}

fn param_count<M: TrainableModel>(model: &mut M) -> Vec<usize> {
    let mut params = Vec::new();
    model.collect_params(&mut params);
    params.iter().map(|p| p.value.len()).collect()
}

fn nudge<M: TrainableModel>(model: &mut M, pi: usize, j: usize, delta: f64) {
    let mut params = Vec::new();
    model.collect_params(&mut params);
    let slice = params[pi]
        .value
        .as_slice_mut()
        .expect("parameters are contiguous");
    slice[j] += delta;
}

fn analytic_grads<M: TrainableModel>(model: &mut M) -> Vec<Vec<f64>> {
    let mut params = Vec::new();
    model.collect_params(&mut params);
    params
        .iter()
        .map(|p| p.grad.as_slice().expect("contiguous grad").to_vec())
        .collect()
}

/// Compare analytic batch-loss gradients against central differences with a
/// per-element step of `h * max(1, |w|)`. An element passes when the relative
/// error is within `tol` (absolute for near-zero pairs).
pub fn check<M: TrainableModel>(
    model: &mut M,
    batch: &[(&M::Sample, f64)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, TrainError> {
    model.zero_grads();
    model.forward_backward(batch)?;
    let analytic = analytic_grads(model);
    let counts = param_count(model);

    let mut total = 0usize;
    let mut within = 0usize;
    let mut worst = 0.0f64;
    for (pi, &count) in counts.iter().enumerate() {
        for j in 0..count {
            let w = {
                let mut params = Vec::new();
                model.collect_params(&mut params);
                params[pi].value.as_slice().unwrap()[j]
            };
            let step = h * w.abs().max(1.0);
            nudge(model, pi, j, step);
            let plus = model.forward_backward(batch)?;
            nudge(model, pi, j, -2.0 * step);
            let minus = model.forward_backward(batch)?;
            nudge(model, pi, j, step);
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][j];
            total += 1;
            let denom = a.abs().max(numeric.abs());
            let ok = if denom < 1e-10 {
                (a - numeric).abs() < 1e-10
            } else {
                let rel = (a - numeric).abs() / denom;
                worst = worst.max(rel);
                rel <= tol
            };
            if ok {
                within += 1;
            }
        }
    }
    model.zero_grads();
    Ok(GradCheckReport {
        total,
        within_tol: within,
        worst_rel: worst,
    })
}
