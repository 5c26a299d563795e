use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

/// Adaptive-moment optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            cfg,
            step: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One descent step on `params[i]` for every `i` with `mask[i]`.
    pub fn step(&mut self, lr: f64, params: &mut [&mut Array2<f64>], grads: &[&Array2<f64>], mask: &[bool]) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for i in 0..params.len() {
            if !mask[i] {
                continue;
            }
            Zip::from(&mut *params[i])
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(grads[i])
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + c.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = array![[1.0, -1.0]];
        let g = array![[0.5, -2.0]];
        let mut opt = Adam::new(AdamConfig::default(), &[(1, 2)]);
        opt.step(0.1, &mut [&mut p], &[&g], &[true]);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_and_mask_leave_params() {
        let orig = array![[1.0, -1.0]];
        let mut p = orig.clone();
        let mut q = orig.clone();
        let g = array![[0.5, -2.0]];
        let mut opt = Adam::new(AdamConfig::default(), &[(1, 2), (1, 2)]);
        opt.step(0.0, &mut [&mut p, &mut q], &[&g, &g], &[true, false]);
        assert_eq!(p, orig);
        opt.step(0.5, &mut [&mut p, &mut q], &[&g, &g], &[false, false]);
        assert_eq!(q, orig);
    }
}
