//! Central finite differences for gradient checking.

use crate::tensor::Tensor;

/// Gradient of a scalar function via central differences with step `h`.
pub fn finite_diff_grad(x0: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let n = x0.numel();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let mut xp = x0.clone();
        xp.data_mut()[i] += h;
        let mut xm = x0.clone();
        xm.data_mut()[i] -= h;
        grad[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    Tensor::from_vec(x0.shape().to_vec(), grad)
}

/// L2 relative error between two gradients.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.sq_norm().sqrt().max(b.sq_norm().sqrt()).max(1e-12);
    diff / scale
}
