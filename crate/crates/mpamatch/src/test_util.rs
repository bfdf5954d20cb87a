//! Shared helpers for unit and integration tests. Not part of the
//! training path.

use crate::tensor::Tensor;

/// Central finite differences against the analytic gradient of a scalar
/// forward function. Checks every entry of `param` up to `MAX_PROBES`
/// entries (evenly strided beyond that). Panics on mismatch.
pub fn fd_check_scalar(param: &Tensor, forward: &dyn Fn() -> Tensor, h: f64, rel_tol: f64) {
    const MAX_PROBES: usize = 24;
    param.zero_grad(); // earlier checks may have left accumulated grads
    let loss = forward();
    loss.backward();
    let grad = param
        .grad()
        .expect("parameter did not receive a gradient");
    param.zero_grad();
    let n = param.len();
    let stride = n.div_ceil(MAX_PROBES).max(1);
    let grad_flat: Vec<f64> = grad.iter().cloned().collect();
    for idx in (0..n).step_by(stride) {
        let orig = param.to_data().iter().nth(idx).cloned().unwrap();
        let step = h * orig.abs().max(1.0);
        set_flat(param, idx, orig + step);
        let f_plus = forward().item();
        set_flat(param, idx, orig - step);
        let f_minus = forward().item();
        set_flat(param, idx, orig);
        let fd = (f_plus - f_minus) / (2.0 * step);
        let g = grad_flat[idx];
        let denom = g.abs().max(fd.abs()).max(1e-6);
        let rel = (g - fd).abs() / denom;
        assert!(
            rel <= rel_tol,
            "gradient mismatch at flat index {idx}: analytic {g}, fd {fd}, rel {rel:.3e}"
        );
    }
}

/// Same check but returns the worst relative error instead of panicking.
pub fn fd_max_rel_err(param: &Tensor, forward: &dyn Fn() -> Tensor, h: f64) -> f64 {
    const MAX_PROBES: usize = 16;
    param.zero_grad();
    let loss = forward();
    loss.backward();
    let grad = param
        .grad()
        .expect("parameter did not receive a gradient");
    param.zero_grad();
    let n = param.len();
    let stride = n.div_ceil(MAX_PROBES).max(1);
    let grad_flat: Vec<f64> = grad.iter().cloned().collect();
    let mut worst = 0.0f64;
    for idx in (0..n).step_by(stride) {
        let orig = param.to_data().iter().nth(idx).cloned().unwrap();
        let step = h * orig.abs().max(1.0);
        set_flat(param, idx, orig + step);
        let f_plus = forward().item();
        set_flat(param, idx, orig - step);
        let f_minus = forward().item();
        set_flat(param, idx, orig);
        let fd = (f_plus - f_minus) / (2.0 * step);
        let g = grad_flat[idx];
        let denom = g.abs().max(fd.abs()).max(1e-6);
        worst = worst.max((g - fd).abs() / denom);
    }
    worst
}

fn set_flat(t: &Tensor, idx: usize, value: f64) {
    t.with_data_mut(|d| {
        *d.iter_mut().nth(idx).unwrap() = value;
    });
}
