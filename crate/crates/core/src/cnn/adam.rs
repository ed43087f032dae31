use super::{CnnModel, Gradients, Scalar};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(model: &CnnModel<F>) -> Self {
        Self {
            m: model.zero_grads(),
            v: model.zero_grads(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step<F: Scalar>(model: &mut CnnModel<F>, grads: &Gradients<F>, state: &mut AdamState<F>, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::of(ADAM_BETA1), F::of(ADAM_BETA2));
    let c1 = F::of(1.0 - ADAM_BETA1.powi(t));
    let c2 = F::of(1.0 - ADAM_BETA2.powi(t));
    let (lr, eps) = (F::of(lr), F::of(ADAM_EPSILON));
    let one = F::one();

    for (((w, g), m), v) in model.params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
