//! Central finite differences, used as an independent oracle for the
//! analytic gradients. Only forward evaluation is involved here.

use crate::error::Result;
use crate::tensor::Tensor;

/// Central-difference gradient of scalar `f` at `x` with step `h`.
pub fn numerical_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let base = x.detach().to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::new(plus, x.shape())?)?;
        let fm = f(&Tensor::new(minus, x.shape())?)?;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(grad, x.shape())
}

/// Normwise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn rel_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel_error shape mismatch");
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
