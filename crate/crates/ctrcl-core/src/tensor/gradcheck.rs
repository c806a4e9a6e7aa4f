//! Central-difference verification of the autodiff engine.

use super::Tensor;
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar-valued `f` at `x` against
/// central differences with step `h`. Returns the maximum over elements of
/// |g_ad - g_fd| / max(1, |g_fd|).
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument("finite difference step must be > 0".into()));
    }
    let leaf = Tensor::param(x.shape().to_vec(), x.data().to_vec())?;
    let y = f(&leaf)?;
    if y.len() != 1 {
        return Err(Error::NonScalarLoss(y.shape().to_vec()));
    }
    y.backward()?;
    // A function may ignore its input entirely; the gradient is then zero.
    let g_ad = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.len()]);

    let mut max_rel: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let fp = f(&Tensor::param(x.shape().to_vec(), plus)?)?.item();
        let fm = f(&Tensor::param(x.shape().to_vec(), minus)?)?.item();
        let g_fd = (fp - fm) / (2.0 * h);
        let rel = (g_ad[i] - g_fd).abs() / f64::max(1.0, g_fd.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
