//! Minimal tape-based reverse-mode automatic differentiation over dense
//! tensors.
//!
//! The primitive set is exactly what the SAHC network and its losses need:
//! elementwise arithmetic, matrix products, strided/dilated 1-D convolution,
//! relu, (masked) softmax, clamped log, reductions, feature concatenation,
//! temporal pooling, positional addition, layer normalization, dropout and
//! temporal slicing.

mod kernels;
mod tape;

pub use tape::{AutodiffError, ConvGeometry, Gradients, Tape, Var};

use crate::tensor::Tensor;

/// Denominator floor of the gradient-check error. Smaller gradients sit
/// below what central differences resolve on O(1) losses in 64-bit
/// arithmetic, so they are compared in absolute terms against this scale.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Largest relative disagreement between the tape gradient of `f` at `input`
/// and central finite differences with step `eps`.
///
/// Per element the error is `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
/// `f` must be deterministic: it is re-evaluated on fresh tapes.
pub fn grad_check<G>(f: G, input: &Tensor<f64>, eps: f64) -> f64
where
    G: Fn(&mut Tape<f64>, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone().with_grad());
    let y = f(&mut tape, x);
    let grads = tape.backward(y).expect("gradient check: backward failed");
    let analytic = grads.get(x).expect("input is a trainable leaf").data().to_vec();

    let eval = |probe: Tensor<f64>| {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let out = f(&mut t, v);
        t.value(out).item()
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = input.clone();
        plus.data_mut()[i] += eps;
        let mut minus = input.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
        let denom = a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}
