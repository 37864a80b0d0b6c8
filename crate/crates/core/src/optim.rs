//! Adam with bias correction.

use crate::checkpoint::{Checkpoint, NamedArray};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-tensor first and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `params` and `grads` pair up by position; names are only
    /// used in diagnostics. Nothing is modified if any gradient is bad.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor4)>, grads: &[Tensor4]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "gradient for {name} has shape {}, parameter is {}",
                    g.shape(),
                    p.shape()
                )));
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::Training(format!("non-finite gradient in {name}")));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.shape().len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(&params).any(|(m, (_, p))| m.len() != p.shape().len())
        {
            return Err(Error::Dimension("optimizer state does not match parameters".into()));
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((_, p), g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Appends moments as `adam.m.<name>` / `adam.v.<name>` plus `adam.step`.
    pub fn write_state(&self, names: &[String], ckpt: &mut Checkpoint) {
        ckpt.arrays.push(NamedArray::scalar("adam.step", self.step as f64));
        for (name, (m, v)) in names.iter().zip(self.m.iter().zip(&self.v)) {
            ckpt.arrays.push(NamedArray {
                name: format!("adam.m.{name}"),
                dims: vec![m.len()],
                data: m.clone(),
            });
            ckpt.arrays.push(NamedArray {
                name: format!("adam.v.{name}"),
                dims: vec![v.len()],
                data: v.clone(),
            });
        }
    }

    /// Restores state written by [`Adam::write_state`]. A checkpoint without
    /// optimizer arrays yields a fresh optimizer.
    pub fn read_state(config: AdamConfig, names: &[String], ckpt: &Checkpoint) -> Result<Self> {
        let mut adam = Self::new(config)?;
        let Some(step) = ckpt.get("adam.step") else {
            return Ok(adam);
        };
        adam.step = step.data.first().copied().unwrap_or(0.0) as u64;
        for name in names {
            let fetch = |kind: &str| {
                ckpt.get(&format!("adam.{kind}.{name}"))
                    .map(|a| a.data.clone())
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing adam.{kind}.{name}")))
            };
            adam.m.push(fetch("m")?);
            adam.v.push(fetch("v")?);
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(t: &mut Tensor4) -> Vec<(String, &mut Tensor4)> {
        vec![("w".to_string(), t)]
    }

    #[test]
    fn zero_gradient_leaves_weights_and_counts_step() {
        let mut w = Tensor4::filled([1, 1, 2, 2], 0.7);
        let before = w.clone();
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        adam.step(named(&mut w), &[Tensor4::zeros([1, 1, 2, 2])]).unwrap();
        assert_eq!(w, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut w = Tensor4::new([1, 1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let g = Tensor4::new([1, 1, 1, 3], vec![0.5, -3.0, 1e-3]).unwrap();
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        adam.step(named(&mut w), &[g]).unwrap();
        for (v, sign) in w.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - (1.0 + sign * 1e-3)).abs() < 1e-7, "{v}");
        }
    }

    #[test]
    fn tensors_do_not_share_state() {
        let mut a = Tensor4::filled([1, 1, 1, 1], 0.0);
        let mut b = Tensor4::filled([1, 1, 1, 1], 0.0);
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        for _ in 0..3 {
            adam.step(
                vec![("a".into(), &mut a), ("b".into(), &mut b)],
                &[Tensor4::scalar(1.0), Tensor4::scalar(0.0)],
            )
            .unwrap();
        }
        assert!(a.data()[0] < 0.0);
        assert_eq!(b.data()[0], 0.0);
    }

    #[test]
    fn matches_hand_computed_scalar_sequence() {
        let cfg = AdamConfig::default();
        let grads = [0.3, -0.1, 0.25, 0.0, -0.4];
        let mut w = Tensor4::scalar(2.0);
        let mut adam = Adam::new(cfg).unwrap();
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 2.0f64);
        for (t, &g) in grads.iter().enumerate() {
            adam.step(named(&mut w), &[Tensor4::scalar(g)]).unwrap();
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            assert!((w.data()[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_finite_gradient_without_updating() {
        let mut w = Tensor4::scalar(1.0);
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut g = Tensor4::scalar(0.0);
        g.data_mut()[0] = f64::NAN;
        let err = adam
            .step(vec![("stage2.down.weight".into(), &mut w)], &[g])
            .unwrap_err();
        assert!(err.to_string().contains("stage2.down.weight"));
        assert_eq!(w.data()[0], 1.0);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn state_round_trips_through_checkpoint() {
        let mut w = Tensor4::filled([1, 1, 1, 2], 0.5);
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        adam.step(named(&mut w), &[Tensor4::filled([1, 1, 1, 2], 0.2)]).unwrap();
        let names = vec!["w".to_string()];
        let mut ckpt = Checkpoint::new(0);
        adam.write_state(&names, &mut ckpt);
        let back = Adam::read_state(AdamConfig::default(), &names, &ckpt).unwrap();
        assert_eq!(back, adam);
        assert!(AdamConfig { lr: 0.0, ..AdamConfig::default() }.validate().is_err());
    }
}
