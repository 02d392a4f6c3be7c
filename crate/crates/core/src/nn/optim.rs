use serde::{Deserialize, Serialize};

use super::{Param, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adaptive-moment optimiser with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<T: Real>(&mut self, params: Vec<&mut Param<T>>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed between steps");
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, p) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.value.len() {
                let w = p.value[i].to_f64();
                let g = p.grad[i].to_f64() + c.weight_decay * w;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let upd = c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                p.value[i] = T::from_f64(w - upd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_keeps_params() {
        let mut p = Param::new(&[3], vec![1.0f32, -2.0, 0.5]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(vec![&mut p]);
        assert_eq!(p.value, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn quadratic_converges_and_is_deterministic() {
        let run = || {
            let mut p = Param::new(&[1], vec![3.0f64]);
            let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() });
            for _ in 0..500 {
                p.grad[0] = 2.0 * (p.value[0] - 1.25);
                opt.step(vec![&mut p]);
            }
            p.value[0]
        };
        let a = run();
        assert!((a - 1.25).abs() < 1e-4, "{a}");
        assert_eq!(a.to_bits(), run().to_bits());
    }
}
