use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        match ok {
            true => Ok(()),
            false => Err(Error::Config(format!("invalid optimizer settings {self:?}"))),
        }
    }
}

/// Moment estimates mirroring a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore<f32>) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (name, t) in params.iter() {
                s.insert(name, Tensor::zeros(t.shape())).expect("names are unique");
            }
            s
        };
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update. `grads` pairs parameter names with flat
    /// gradients; parameters without an entry are left untouched. A
    /// non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[(String, Vec<f32>)]) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.numel() != g.len() {
                return Err(Error::dim(
                    "adam_step",
                    format!("parameter `{name}` has {} values, gradient {}", p.numel(), g.len()),
                ));
            }
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient {} in parameter `{name}` at index {i}",
                    g[i]
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let correct1 = 1.0 - c.beta1.powi(t);
        let correct2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above").data_mut();
            let m = self.m.get_mut(name).expect("moments mirror params").data_mut();
            let v = self.v.get_mut(name).expect("moments mirror params").data_mut();
            for i in 0..p.len() {
                let gi = g[i] as f64 + c.weight_decay * p[i] as f64;
                let mi = c.beta1 * m[i] as f64 + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v[i] as f64 + (1.0 - c.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = c.lr * (mi / correct1) / ((vi / correct2).sqrt() + c.eps);
                p[i] = (p[i] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[(&str, Vec<f32>)]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        for (n, v) in values {
            s.insert(*n, Tensor::new([v.len()], v.clone()).unwrap()).unwrap();
        }
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = store(&[("w", vec![0.5, -2.0])]);
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for _ in 0..3 {
            adam.step(&mut p, &[("w".into(), vec![0.0, 0.0])]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.step, 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // t=1: m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps) ≈ lr.
        let mut p = store(&[("x", vec![1.0])]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg, &p);
        adam.step(&mut p, &[("x".into(), vec![1.0])]).unwrap();
        let moved = p.get("x").unwrap().data()[0] as f64 - 1.0;
        let want = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((moved - want).abs() < 1e-7, "{moved}");
    }

    #[test]
    fn identical_and_mirrored_parameters() {
        let mut p = store(&[("a", vec![0.3]), ("b", vec![0.3]), ("c", vec![-0.3])]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for g in [0.7f32, -0.2, 1.3] {
            let grads = vec![("a".into(), vec![g]), ("b".into(), vec![g]), ("c".into(), vec![-g])];
            adam.step(&mut p, &grads).unwrap();
        }
        let (a, b, c) = (p.get("a").unwrap().data()[0], p.get("b").unwrap().data()[0], p.get("c").unwrap().data()[0]);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(a.to_bits(), (-c).to_bits());
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = store(&[("ok", vec![1.0]), ("bad", vec![1.0])]);
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let err = adam
            .step(&mut p, &[("ok".into(), vec![1.0]), ("bad".into(), vec![f32::NAN])])
            .unwrap_err();
        assert!(matches!(&err, Error::Divergence(m) if m.contains("`bad`")), "{err}");
        assert_eq!(p, before);
        assert_eq!(adam.step, 0);
    }
}
