//! First-order optimizers shared by local training and server-side updates.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Stateful optimizer over a fixed-length parameter slice.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        hp: AdamParams,
        t: i32,
        m: Vec<f64>,
        v: Vec<f64>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, hp: AdamParams, len: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                hp,
                t: 0,
                m: vec![0.0; len],
                v: vec![0.0; len],
            },
        }
    }

    /// In-place descent step along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        match self {
            Optimizer::Sgd { lr } => {
                for (w, g) in params.iter_mut().zip(grad) {
                    *w -= *lr * g;
                }
            }
            Optimizer::Adam { lr, hp, t, m, v } => {
                *t += 1;
                let bc1 = 1.0 - hp.beta1.powi(*t);
                let bc2 = 1.0 - hp.beta2.powi(*t);
                for (((w, g), mi), vi) in params.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * g;
                    *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * g * g;
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *w -= *lr * m_hat / (v_hat.sqrt() + hp.eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_is_sign_like() {
        let hp = AdamParams::default();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, hp, 3);
        let mut w = vec![0.0; 3];
        let g = [0.5, -2.0, 1e-3];
        opt.step(&mut w, &g);
        for (wi, gi) in w.iter().zip(g) {
            let expected = -1e-3 * gi / (gi.abs() + hp.eps);
            assert!((wi - expected).abs() < 1e-15, "{wi} vs {expected}");
        }
    }

    #[test]
    fn sgd_step() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, AdamParams::default(), 2);
        let mut w = vec![1.0, 1.0];
        opt.step(&mut w, &[1.0, -2.0]);
        assert_eq!(w, vec![0.9, 1.2]);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut opt = Optimizer::new(kind, 0.0, AdamParams::default(), 2);
            let mut w = vec![0.25, -3.0];
            opt.step(&mut w, &[4.0, 5.0]);
            assert_eq!(w, vec![0.25, -3.0]);
        }
    }
}
