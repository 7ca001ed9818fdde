//! Adam and the plateau learning-rate schedule.

use crate::error::{Result, XblError};
use crate::model::Classifier;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(XblError::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Adam over the parameters of one classifier. Moments are kept for every
/// parameter, but frozen ones are never touched.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, model: &Classifier) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|p| vec![0.0; p.value.numel()])
            .collect();
        Adam {
            lr: cfg.lr,
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads` follows [`Classifier::params`] order; `None`
    /// entries (no gradient reached the parameter) are skipped like frozen
    /// ones.
    pub fn step(&mut self, model: &mut Classifier, grads: &[Option<Vec<f32>>]) -> Result<()> {
        let trainable = model.trainable_mask();
        if grads.len() != trainable.len() {
            return Err(XblError::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                trainable.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in model.params_mut().into_iter().enumerate() {
            let Some(g) = grads[i].as_ref().filter(|_| trainable[i]) else {
                continue;
            };
            if g.len() != p.value.numel() {
                return Err(XblError::Contract(format!(
                    "gradient for {} has {} entries, expected {}",
                    p.name,
                    g.len(),
                    p.value.numel()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g[j] as f64;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let update = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.cfg.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has
/// failed to improve for `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct PlateauDecay {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    stale: usize,
}

impl PlateauDecay {
    pub fn new(factor: f64, patience: usize) -> Self {
        PlateauDecay {
            factor,
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Feeds one epoch's loss; returns the new learning rate.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}
