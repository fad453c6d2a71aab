use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

/// Functional gradient step `θ' = θ − lr·g`.
///
/// The result is built from tensor operations, so when `params` and `grads`
/// are tracked the update stays on the tape. The inputs are not modified.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
    params.map(|name, p| {
        let g = grads
            .get(name)
            .map_err(|_| TensorError::MissingGrad(name.to_string()))?;
        p.sub(&g.scale(lr)?)
    })
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with bias correction. Each parameter keeps its own step count, so
/// parameters absent from a step (e.g. unsampled latents) are left alone.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: IndexMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: IndexMap::new(),
        }
    }

    /// Returns updated (untracked) values for every parameter in `params`.
    pub fn step(&mut self, params: &ParamSet, grads: &ParamSet) -> Result<ParamSet> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        params.map(|name, p| {
            let g = grads
                .get(name)
                .map_err(|_| TensorError::MissingGrad(name.to_string()))?;
            if g.shape() != p.shape() {
                return Err(TensorError::mismatch("adam", p.shape(), g.shape()));
            }
            let st = self.state.entry(name.to_string()).or_default();
            if st.m.is_empty() {
                st.m = vec![0.0; p.numel()];
                st.v = vec![0.0; p.numel()];
            } else if st.m.len() != p.numel() {
                return Err(TensorError::invalid("adam", format!("state for `{name}` has {} entries, param has {}", st.m.len(), p.numel())));
            }
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t as i32);
            let bc2 = 1.0 - beta2.powi(st.t as i32);
            let mut out = p.to_vec();
            for i in 0..out.len() {
                let gi = g.data()[i];
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                out[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            Tensor::new(out, p.shape())
        })
    }

    pub fn steps_taken(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |s| s.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::vector(v)).unwrap();
        p
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut opt = Adam::new(AdamConfig::with_lr(0.01));
        let out = opt.step(&single("w", &[1.0, -1.0, 0.0]), &single("w", &[3.0, -0.5, 0.0])).unwrap();
        let w = out.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-9 && (w[1] + 0.99).abs() < 1e-9);
        assert_eq!(w[2], 0.0);
        assert_eq!(opt.steps_taken("w"), 1);
        assert_eq!(opt.steps_taken("other"), 0);
    }

    #[test]
    fn sgd_and_adam_reject_missing_grads() {
        let p = single("w", &[1.0]);
        let g = single("v", &[1.0]);
        assert!(sgd_step(&p, &g, 0.1).is_err());
        assert!(matches!(Adam::new(AdamConfig::with_lr(0.1)).step(&p, &g), Err(TensorError::MissingGrad(_))));
    }
}
