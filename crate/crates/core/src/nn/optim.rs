use serde::{Deserialize, Serialize};

use super::network::{Grads, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// First-order optimizer state for one network.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
    /// Plain SGD with classical momentum 0.9.
    Sgd {
        lr: f64,
        momentum: f64,
        velocity: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, net: &Network) -> Self {
        let zeros = net.zero_grads().0;
        match kind {
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
            OptimizerKind::Sgd => Optimizer::Sgd {
                lr,
                momentum: 0.9,
                velocity: zeros,
            },
        }
    }

    pub fn set_learning_rate(&mut self, rate: f64) {
        match self {
            Optimizer::Adam { lr, .. } | Optimizer::Sgd { lr, .. } => *lr = rate,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Grads) {
        let mut slot = 0;
        match self {
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let bc1 = 1.0 - beta1.powi(*step as i32);
                let bc2 = 1.0 - beta2.powi(*step as i32);
                let (lr, b1, b2, eps) = (*lr, *beta1, *beta2, *eps);
                net.visit_params_mut(&mut |p| {
                    let g = &grads.0[slot];
                    let (ms, vs) = (&mut m[slot], &mut v[slot]);
                    for i in 0..p.len() {
                        ms[i] = b1 * ms[i] + (1.0 - b1) * g[i];
                        vs[i] = b2 * vs[i] + (1.0 - b2) * g[i] * g[i];
                        let mhat = ms[i] / bc1;
                        let vhat = vs[i] / bc2;
                        p[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                    slot += 1;
                });
            }
            Optimizer::Sgd {
                lr,
                momentum,
                velocity,
            } => {
                let (lr, mu) = (*lr, *momentum);
                net.visit_params_mut(&mut |p| {
                    let g = &grads.0[slot];
                    let vel = &mut velocity[slot];
                    for i in 0..p.len() {
                        vel[i] = mu * vel[i] + g[i];
                        p[i] -= lr * vel[i];
                    }
                    slot += 1;
                });
            }
        }
    }
}
