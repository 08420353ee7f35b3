//! Finite-difference gradient oracle.
//!
//! Deliberately independent of the tape in [`crate::graph`]: it only calls a
//! black-box loss closure, so it can falsify the analytic backward pass.

use crate::tensor::Tensor;

/// Central-difference gradients of `loss` with respect to every entry of
/// every tensor in `at`.
///
/// `loss` must be deterministic. Step `h` trades truncation error (`h^2`)
/// against round-off; `1e-5` suits unit-scale values in `f64`.
pub fn fd_grads<F>(mut loss: F, at: &[Tensor], h: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = at.to_vec();
    let mut grads = Vec::with_capacity(at.len());
    for ti in 0..at.len() {
        let mut g = Tensor::zeros(at[ti].shape().to_vec());
        for ei in 0..at[ti].numel() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let up = loss(&work);
            work[ti].data_mut()[ei] = orig - h;
            let down = loss(&work);
            work[ti].data_mut()[ei] = orig;
            g.data_mut()[ei] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Scale-free gradient discrepancy: `|a - b| / max(|a| + |b|, floor)`.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel_err: shape mismatch");
    let mut diff = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        diff += (x - y) * (x - y);
    }
    diff.sqrt() / (a.norm() + b.norm()).max(1e-12)
}
