use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{GradMap, ModelParams};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub lr: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: f64, config: AdamConfig) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.rows(), t.cols())))
            .collect();
        Self {
            config,
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Moments as a parameter set, for checkpointing alongside the model.
    pub fn to_params(&self) -> ModelParams {
        let mut p = ModelParams::new();
        for (n, t) in &self.m {
            p.insert(format!("m/{n}"), t.clone()).expect("unique");
        }
        for (n, t) in &self.v {
            p.insert(format!("v/{n}"), t.clone()).expect("unique");
        }
        p.insert("step", Tensor::scalar(self.step as f64)).expect("unique");
        p
    }

    pub fn from_params(p: &ModelParams, lr: f64, config: AdamConfig) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (n, t) in p.iter() {
            if let Some(rest) = n.strip_prefix("m/") {
                m.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = n.strip_prefix("v/") {
                v.insert(rest.to_string(), t.clone());
            }
        }
        let step = p.get("step")?.item() as u64;
        Ok(Self {
            config,
            lr,
            step,
            m,
            v,
        })
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut ModelParams, grads: &GradMap, state: &mut AdamState) -> Result<()> {
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::Shape(format!("no gradient for {name}")))?;
        let p = params.get_mut(&name).expect("listed name");
        let m = state.m.get_mut(&name).ok_or_else(|| Error::Shape(format!("no moment for {name}")))?;
        let v = state.v.get_mut(&name).ok_or_else(|| Error::Shape(format!("no moment for {name}")))?;
        if g.shape() != p.shape() || m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::Shape(format!("adam shapes disagree for {name}")));
        }
        for (((pi, gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= state.lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &GradMap) -> f64 {
    grads.values().map(|g| g.sum_sq()).sum::<f64>().sqrt()
}

/// Rescale gradients so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.values_mut().for_each(|g| g.scale_in_place(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn zero_gradients_leave_params() {
        let mut p = one(1.5);
        let mut s = AdamState::new(&p, 0.1, AdamConfig::default());
        let g: GradMap = [("x".to_string(), Tensor::scalar(0.0))].into();
        for _ in 0..10 {
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        assert_eq!(p.get("x").unwrap().item(), 1.5);
    }

    #[test]
    fn quadratic_converges() {
        // f(x) = (x - 3)^2
        let mut p = one(-2.0);
        let mut s = AdamState::new(&p, 1e-2, AdamConfig::default());
        let mut steps = 0;
        while steps < 2000 {
            let x = p.get("x").unwrap().item();
            let g: GradMap = [("x".to_string(), Tensor::scalar(2.0 * (x - 3.0)))].into();
            adam_step(&mut p, &g, &mut s).unwrap();
            steps += 1;
        }
        assert!((p.get("x").unwrap().item() - 3.0).abs() < 1e-4);
    }

    #[test]
    fn clipping() {
        let mut g: GradMap = [("a".to_string(), Tensor::from_vec(1, 2, vec![3.0, 4.0]).unwrap())].into();
        let before = g.clone();
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g, before);
        clip_grad_norm(&mut g, 1.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn state_round_trip() {
        let p = one(0.0);
        let mut s = AdamState::new(&p, 0.1, AdamConfig::default());
        s.step = 7;
        s.m.get_mut("x").unwrap().data_mut()[0] = 0.25;
        let back = AdamState::from_params(&s.to_params(), 0.1, AdamConfig::default()).unwrap();
        assert_eq!(back, s);
    }
}
