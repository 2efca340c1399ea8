//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! The decoder and the training objectives are built on this tape. It is
//! deliberately small: only the ops the model needs, all double
//! precision, all deterministic (fixed loop orders, no threading inside
//! kernels), so finite-difference checks and bit-reproducibility
//! contracts hold.

mod arr;
pub(crate) mod kernels;
mod tape;

pub use arr::Arr;
pub use tape::{sigmoid_scalar, Grads, Tape, Var};

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + eps;
        let fp = f(&xs);
        xs[i] = orig - eps;
        let fm = f(&xs);
        xs[i] = orig;
        out.push((fp - fm) / (2.0 * eps));
    }
    out
}

/// Largest relative error between analytic and numeric gradients, with
/// an absolute floor so near-zero entries do not blow up the ratio.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}


// Temporary raw-kernel exports for the scratch micro benchmark.
#[doc(hidden)]
pub fn kernels_mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    kernels::mm_nt_acc(a, b, m, k, n, out)
}
#[doc(hidden)]
pub fn kernels_softmax(x: &mut [f64], m: usize, n: usize) {
    kernels::softmax_rows_inplace(x, m, n)
}
