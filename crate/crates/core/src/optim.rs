//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
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

impl AdamWConfig {
    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }
}

/// Multiplier applied to the base learning rate over a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from 1 down to `final_frac`.
    Cosine { final_frac: f64 },
}

impl LrSchedule {
    /// Factor for 1-based `step` out of `total`.
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { final_frac } => {
                let p = if total > 1 { (step - 1) as f64 / (total - 1) as f64 } else { 0.0 };
                final_frac + (1.0 - final_frac) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` must match `params[i]` in length.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                let gj = g.data()[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let update = (m[j] / bias1) / ((v[j] / bias2).sqrt() + c.eps);
                data[j] -= c.lr * (update + c.weight_decay * data[j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule::Cosine { final_frac: 0.1 };
        assert_eq!(s.factor(1, 100), 1.0);
        assert!((s.factor(100, 100) - 0.1).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.factor(7, 10), 1.0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Tensor::vector(vec![3.0, -2.0]);
        let mut opt = AdamW::new(AdamWConfig::default().with_lr(0.05));
        for _ in 0..500 {
            let g = p.map(|v| 2.0 * v);
            opt.step(vec![&mut p], &[g]);
        }
        assert!(p.norm() < 1e-2, "{:?}", p);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            weight_decay: 0.1,
            ..Default::default()
        });
        opt.step(vec![&mut p], &[Tensor::vector(vec![5.0, -5.0])]);
        assert_eq!(p, before);
    }
}
