//! Bias-corrected Adam that leaves masked entries untouched.

use crate::matrix::Matrix;
use crate::pruner::Mask;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
}

impl Moments {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
        }
    }
}

/// One Adam update of `param` at 1-based `step`.
///
/// Entries whose mask bit is 0 keep their value and both moments.
pub fn adam_step(
    param: &mut Matrix,
    grad: &Matrix,
    moments: &mut Moments,
    mask: Option<&Mask>,
    hp: &AdamConfig,
    step: usize,
) {
    debug_assert_eq!(param.shape(), grad.shape());
    let step = step.max(1) as i32;
    let c1 = 1.0 - hp.beta1.powi(step);
    let c2 = 1.0 - hp.beta2.powi(step);
    let bits = mask.map(Mask::bits);
    let p = param.data_mut();
    let m = moments.m.data_mut();
    let v = moments.v.data_mut();
    for (i, &g) in grad.data().iter().enumerate() {
        if let Some(bits) = bits {
            if !bits[i] {
                continue;
            }
        }
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.eps);
    }
}
