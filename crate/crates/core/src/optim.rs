//! AdamW with decoupled weight decay.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
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
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(alloc::format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(alloc::format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(alloc::format!("eps must be > 0, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(alloc::format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Update every trainable parameter that has a gradient. Buffers are
    /// never touched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for (name, g) in grads {
            if !params.is_trainable(name) {
                continue;
            }
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    context: "gradient vs parameter",
                    lhs: g.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= c.lr * (mhat / (libm::sqrt(vhat) + c.eps) + c.weight_decay * pd[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::new(&[2], alloc::vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        })
        .unwrap();
        let mut g = BTreeMap::new();
        g.insert("w".into(), Tensor::new(&[2], alloc::vec![3.0, -0.01]).unwrap());
        opt.step(&mut ps, &g).unwrap();
        let w = ps.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 2e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 2e-3)).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::full(&[3], 0.5));
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        })
        .unwrap();
        let mut g = BTreeMap::new();
        g.insert("w".into(), Tensor::full(&[3], 1.0));
        opt.step(&mut ps, &g).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[0.5; 3]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::full(&[1], 3.0));
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        })
        .unwrap();
        for _ in 0..400 {
            let w = ps.get("w").unwrap().item();
            let mut g = BTreeMap::new();
            g.insert("w".into(), Tensor::full(&[1], 2.0 * (w - 1.0)));
            opt.step(&mut ps, &g).unwrap();
        }
        assert!((ps.get("w").unwrap().item() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(AdamW::new(AdamWConfig {
            beta1: 1.0,
            ..AdamWConfig::default()
        })
        .is_err());
    }
}
