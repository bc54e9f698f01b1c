//! Adam optimizer over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has an entry in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            assert_eq!(g.shape(), p.shape(), "gradient shape mismatch for {}", name);
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for (((pi, mi), vi), &gi) in pd.iter_mut().zip(md.iter_mut()).zip(vd.iter_mut()).zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Moment tensors as named entries (`m.<param>`, `v.<param>`) for
    /// serialization.
    pub fn export(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.first.len() * 2);
        for (k, t) in &self.first {
            out.push((format!("m.{}", k), t.clone()));
        }
        for (k, t) in &self.second {
            out.push((format!("v.{}", k), t.clone()));
        }
        out
    }

    pub fn import(config: AdamConfig, step: u64, entries: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        let mut adam = Adam::new(config);
        adam.step = step;
        for (k, t) in entries {
            if let Some(name) = k.strip_prefix("m.") {
                adam.first.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix("v.") {
                adam.second.insert(name.to_string(), t);
            }
        }
        adam
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut ps = ParamStore::new();
        ps.insert("a", Tensor::new(&[2], vec![1.0, -1.0]));
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::new(&[2], vec![0.3, -2.0]));
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        adam.step(&mut ps, &g);
        let d = ps.expect("a").data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn export_import_round_trip() {
        let mut ps = ParamStore::new();
        ps.insert("a", Tensor::new(&[2], vec![1.0, -1.0]));
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::new(&[2], vec![0.3, -2.0]));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut ps, &g);
        let back = Adam::import(adam.config, adam.steps(), adam.export());
        assert_eq!(back, adam);
    }
}
