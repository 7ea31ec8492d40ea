//! SGD with momentum and a cosine-annealed learning rate.

use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
}

impl SgdConfig {
    pub fn new(lr0: f64) -> Self {
        SgdConfig { lr0, lr_min: lr0 * 0.01, momentum: 0.9 }
    }
}

/// Cosine annealing from `lr0` at epoch 0 to `lr_min` at `total_epochs`.
pub fn cosine_lr(cfg: &SgdConfig, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return cfg.lr0;
    }
    let t = epoch as f64 / total_epochs as f64;
    cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Momentum SGD keyed by an ordered parameter key, so update order (and
/// therefore floating-point results) is deterministic.
pub struct Sgd<K: Ord + Clone> {
    pub cfg: SgdConfig,
    velocity: BTreeMap<K, Vec<f64>>,
}

impl<K: Ord + Clone> Sgd<K> {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd { cfg, velocity: BTreeMap::new() }
    }

    /// One update: `v = momentum * v + g; p -= lr * v`.
    pub fn step(&mut self, key: &K, param: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(param.len(), grad.len());
        let v = self.velocity.entry(key.clone()).or_insert_with(|| vec![0.0; param.len()]);
        for ((vi, pi), gi) in v.iter_mut().zip(param.iter_mut()).zip(grad) {
            *vi = self.cfg.momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut sgd = Sgd::new(SgdConfig { lr0: 0.1, lr_min: 0.0, momentum: 0.9 });
        let mut p = vec![1.0, -2.0];
        sgd.step(&0u32, &mut p, &[0.0, 0.0], 0.1);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn single_step_arithmetic() {
        // p=1, grad=2, lr=0.1, momentum=0 -> p=0.8
        let mut sgd = Sgd::new(SgdConfig { lr0: 0.1, lr_min: 0.0, momentum: 0.0 });
        let mut p = vec![1.0];
        sgd.step(&0u32, &mut p, &[2.0], 0.1);
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = SgdConfig { lr0: 0.02, lr_min: 0.0002, momentum: 0.9 };
        assert!((cosine_lr(&cfg, 0, 200) - 0.02).abs() < 1e-15);
        assert!((cosine_lr(&cfg, 200, 200) - 0.0002).abs() < 1e-15);
        // midpoint is the average of the endpoints
        let mid = cosine_lr(&cfg, 100, 200);
        assert!((mid - 0.0101).abs() < 1e-12);
    }
}
