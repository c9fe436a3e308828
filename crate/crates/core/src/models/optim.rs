use serde::{Deserialize, Serialize};

use super::params::{TransformerParams, UpdateScope};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "GD")]
    Gd,
    #[serde(rename = "SGD")]
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of `param` at (1-based) step `t`.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        param[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// Adam state for one model. Moments of tensors outside the update scope stay zero.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: TransformerParams,
    v: TransformerParams,
}

impl Adam {
    pub fn new(params: &TransformerParams, cfg: AdamConfig) -> Self {
        Adam { cfg, t: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut TransformerParams, grad: &TransformerParams, lr: f64, scope: UpdateScope) {
        self.t += 1;
        let t = self.t;
        let cfg = self.cfg;
        let tensors = params.tensors_mut();
        let grads = grad.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((k, p), (_, g)), (_, m)), (_, v)) in tensors.into_iter().zip(grads).zip(ms).zip(vs) {
            if scope.contains(&k) {
                adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), lr, t, &cfg);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_betas_give_normalised_step() {
        let cfg = AdamConfig { beta1: 0.0, beta2: 0.0, eps: 0.5 };
        for g in [-3.0, -0.2, 0.0, 0.7, 4.0] {
            let mut p = [1.0];
            let (mut m, mut v) = ([0.0], [0.0]);
            adam_update(&mut p, &[g], &mut m, &mut v, 0.1, 1, &cfg);
            let want = 1.0 - 0.1 * g / (f64::abs(g) + 0.5);
            assert!((p[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let cfg = AdamConfig::default();
        let mut p = [0.0, 0.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_update(&mut p, &[5.0, -0.001], &mut m, &mut v, 0.01, 1, &cfg);
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let cfg = AdamConfig::default();
        let mut p = [3.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        for t in 1..=3000 {
            let g = [2.0 * (p[0] - 1.0)];
            adam_update(&mut p, &g, &mut m, &mut v, 0.01, t, &cfg);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }
}
