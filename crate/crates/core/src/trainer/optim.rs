use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, NamedTensor};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn to_container(&self, header: serde_json::Value) -> Container {
        let n = self.m.len();
        let mut header = header;
        header["kind"] = "optimizer".into();
        header["adam_step"] = self.step.into();
        Container {
            header,
            tensors: vec![
                NamedTensor {
                    name: "m".into(),
                    shape: vec![n],
                    data: self.m.clone(),
                },
                NamedTensor {
                    name: "v".into(),
                    shape: vec![n],
                    data: self.v.clone(),
                },
            ],
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        ensure!(
            c.header.get("kind").and_then(|k| k.as_str()) == Some("optimizer"),
            Load,
            "container is not optimizer state"
        );
        let step = c
            .header
            .get("adam_step")
            .and_then(|s| s.as_u64())
            .ok_or_else(|| Error::Load("optimizer state has no step".into()))?;
        let get = |name: &str| {
            c.get(name)
                .map(|t| t.data.clone())
                .ok_or_else(|| Error::Load(format!("optimizer state lacks {name}")))
        };
        let (m, v) = (get("m")?, get("v")?);
        ensure!(m.len() == v.len(), Load, "moment vectors differ in length");
        Ok(Self { m, v, step })
    }
}

/// One AdamW step with bias-corrected moments and decoupled weight decay:
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
pub fn optimizer_update(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    config: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    ensure!(
        params.len() == grads.len() && params.len() == state.m.len() && state.m.len() == state.v.len(),
        Contract,
        "shape mismatch: {} params, {} grads, {} moments",
        params.len(),
        grads.len(),
        state.m.len()
    );
    state.step += 1;
    let c1 = 1.0 - config.beta1.powi(state.step as i32);
    let c2 = 1.0 - config.beta2.powi(state.step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * (m_hat / (v_hat.sqrt() + config.eps) + config.weight_decay * *p);
    }
    Ok(())
}

/// Rescales `grads` so its L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = vec![0.5, -2.0, 3.0];
        let before = p.clone();
        let mut s = AdamState::new(3);
        let c = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..5 {
            optimizer_update(&mut p, &[0.0; 3], &mut s, &c, 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn pure_decay_scales_params() {
        let mut p = vec![0.5, -2.0, 3.0];
        let mut s = AdamState::new(3);
        let c = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        optimizer_update(&mut p, &[0.0; 3], &mut s, &c, 0.01).unwrap();
        let f = 1.0 - 0.01 * 0.1;
        for (x, y) in p.iter().zip([0.5, -2.0, 3.0]) {
            assert!((x - y * f).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut s = AdamState::new(2);
        assert!(optimizer_update(&mut [0.0; 2], &[0.0; 3], &mut s, &AdamWConfig::default(), 0.1).is_err());
    }

    #[test]
    fn container_round_trip() {
        let mut s = AdamState::new(3);
        let mut p = vec![1.0, 2.0, 3.0];
        optimizer_update(&mut p, &[0.1, -0.2, 0.3], &mut s, &AdamWConfig::default(), 0.1).unwrap();
        let c = s.to_container(serde_json::json!({"stage": "sft"}));
        assert_eq!(AdamState::from_container(&c).unwrap(), s);
    }

    proptest! {
        #[test]
        fn first_step_closed_form(
            g in proptest::collection::vec(-5.0f64..5.0, 1..8),
            lr in 1e-4f64..1.0,
        ) {
            let c = AdamWConfig { weight_decay: 0.0, ..Default::default() };
            let mut p = vec![0.0; g.len()];
            let mut s = AdamState::new(g.len());
            optimizer_update(&mut p, &g, &mut s, &c, lr).unwrap();
            for (x, gi) in p.iter().zip(&g) {
                let expected = -lr * gi / (gi.abs() + c.eps);
                prop_assert!((x - expected).abs() <= 1e-12 * lr.max(1.0));
            }
        }
    }
}
