use serde::{Deserialize, Serialize};

use super::{Gradients, Network};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState {
            kind,
            t: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// One update of every parameter group. A group with learning-rate scale
    /// 0 is frozen: neither it nor its moments change.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr_scale: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != lr_scale.len() {
            return Err(Error::shape("parameter, gradient and scale groups differ"));
        }
        for (gi, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::shape(format!(
                    "gradient group {gi} does not match its parameters"
                )));
            }
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient at group {gi}, index {bad}"
                )));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::shape("moment buffers do not conform to the parameters"));
        }
        self.t += 1;
        let t = self.t as i32;
        for (gi, p) in params.iter_mut().enumerate() {
            let scale = lr_scale[gi];
            if scale == 0.0 {
                continue;
            }
            let g = grads[gi];
            match self.kind {
                OptimizerKind::Sgd { lr, momentum } => {
                    let vel = &mut self.first[gi];
                    for ((p, v), g) in p.iter_mut().zip(vel.iter_mut()).zip(g) {
                        *v = momentum * *v + g;
                        *p -= lr * scale * *v;
                    }
                }
                OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = (&mut self.first[gi], &mut self.second[gi]);
                    for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= lr * scale * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Updates a network's `W` and `B` (scale 1) and `theta` (scale `theta_lr_scale`).
    pub fn step_network(&mut self, net: &mut Network, grads: &Gradients, theta_lr_scale: f64) -> Result<()> {
        let mut scales = Vec::new();
        let mut g: Vec<&[f64]> = Vec::new();
        for (w, b) in grads.weights.iter().zip(&grads.bias) {
            g.push(w);
            g.push(b);
            scales.extend([1.0, 1.0]);
        }
        g.push(&grads.theta);
        scales.push(theta_lr_scale);
        let mut params: Vec<&mut [f64]> = Vec::new();
        for l in net.layers.iter_mut() {
            params.push(&mut l.weights);
            params.push(&mut l.bias);
        }
        params.push(&mut net.thetas);
        self.step(&mut params, &g, &scales)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_single_step() {
        let mut opt = OptimizerState::new(OptimizerKind::Sgd { lr: 0.1, momentum: 0.0 });
        let mut w = [0.0];
        opt.step(&mut [&mut w], &[&[1.0]], &[1.0]).unwrap();
        assert!((w[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = OptimizerState::new(OptimizerKind::Sgd { lr: 0.1, momentum: 0.9 });
        let mut w = [0.0];
        opt.step(&mut [&mut w], &[&[1.0]], &[1.0]).unwrap();
        let before = w[0];
        opt.step(&mut [&mut w], &[&[1.0]], &[1.0]).unwrap();
        assert!(((before - w[0]) - 0.19).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut opt = OptimizerState::new(OptimizerKind::adam(0.01));
        let mut w = [0.3, -1.2];
        opt.step(&mut [&mut w], &[&[0.0, 0.0]], &[1.0]).unwrap();
        assert_eq!(w, [0.3, -1.2]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = OptimizerState::new(OptimizerKind::adam(0.01));
        let mut w = [0.0];
        opt.step(&mut [&mut w], &[&[5.0]], &[1.0]).unwrap();
        assert!((w[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn frozen_group_untouched() {
        let mut opt = OptimizerState::new(OptimizerKind::Sgd { lr: 0.1, momentum: 0.9 });
        let mut a = [1.0];
        let mut b = [1.0];
        opt.step(&mut [&mut a, &mut b], &[&[1.0], &[1.0]], &[1.0, 0.0]).unwrap();
        assert_eq!(b, [1.0]);
        assert_ne!(a, [1.0]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut opt = OptimizerState::new(OptimizerKind::adam(0.01));
        let mut w = [0.0];
        assert!(matches!(
            opt.step(&mut [&mut w], &[&[f64::NAN]], &[1.0]),
            Err(Error::Divergence(_))
        ));
        assert_eq!(w, [0.0]);
        assert_eq!(opt.t, 0);
    }
}
