//! Adam with decoupled weight decay, plateau learning-rate decay and early
//! stopping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Params, TensorRole};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay rate; the update subtracts `lr * weight_decay * theta`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: Params<S>,
    pub v: Params<S>,
    pub t: u64,
    pub lr: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &Params<S>, lr: f64) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr,
        }
    }

    /// One bias-corrected Adam update of every trainable tensor. Rejects
    /// non-finite gradients before touching any state.
    pub fn step(&mut self, params: &mut Params<S>, grads: &Params<S>, cfg: &AdamConfig) -> Result<()> {
        for (name, g, role) in grads.named_tensors() {
            if role == TensorRole::Trainable && g.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
        let (one_b1, one_b2) = (S::of(1.0 - cfg.beta1), S::of(1.0 - cfg.beta2));
        let c1 = S::of(1.0 / (1.0 - cfg.beta1.powi(t)));
        let c2 = S::of(1.0 / (1.0 - cfg.beta2.powi(t)));
        let lr = S::of(self.lr);
        let eps = S::of(cfg.eps);
        let decay = S::of(cfg.weight_decay);
        let tensors = params
            .trainable_mut()
            .into_iter()
            .zip(grads.trainable())
            .zip(self.m.trainable_mut())
            .zip(self.v.trainable_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + one_b1 * gi;
                v.data[i] = b2 * v.data[i] + one_b2 * gi * gi;
                let m_hat = m.data[i] * c1;
                let v_hat = v.data[i] * c2;
                let theta = p.data[i];
                p.data[i] = theta - lr * (m_hat / (v_hat.sqrt() + eps) + decay * theta);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without a strict improvement of the best loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            patience,
            factor,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch loss; returns true when the rate was decayed.
    pub fn update(&mut self, loss: f64, lr: &mut f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            *lr *= self.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

/// Learning rate after replaying `history` from `lr`.
pub fn lr_plateau_update(history: &[f64], lr: f64, patience: usize, factor: f64) -> f64 {
    let mut s = PlateauScheduler::new(patience, factor);
    let mut lr = lr;
    for &l in history {
        s.update(l, &mut lr);
    }
    lr
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without improving the best loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    /// Records the loss of `epoch`. The caller keeps the parameters of
    /// `best_epoch`.
    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// Decision after replaying `history`.
pub fn early_stopping_update(history: &[f64], patience: usize) -> StopDecision {
    let mut s = EarlyStopping::new(patience);
    let mut d = StopDecision::Continue;
    for (e, &l) in history.iter().enumerate() {
        d = s.update(e, l);
    }
    d
}
