use ndarray::{Array2, ArrayViewMut2, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, lr_min: 1e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    /// Cosine schedule from `lr` at `t = 0` to `lr_min` at `t = 1`.
    pub fn lr_at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam moments for a list of parameter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            config,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update at schedule position `t` in `[0, 1]`.
/// Returns the learning rate used.
pub fn adam_cosine_step(state: &mut OptimizerState, params: &mut [ArrayViewMut2<'_, f64>], grads: &[Array2<f64>], t: f64) -> f64 {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let c = state.config;
    let lr = c.lr_at(t);
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    for (k, p) in params.iter_mut().enumerate() {
        assert_eq!(p.dim(), state.m[k].dim());
        Zip::from(p)
            .and(&mut state.m[k])
            .and(&mut state.v[k])
            .and(&grads[k])
            .for_each(|p, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + c.eps);
            });
    }
    lr
}
