use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    kind: OptimKind,
    lr: f64,
    step: u64,
    /// Adam first and second moments, keyed by parameter name.
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimState {
    pub fn new(kind: OptimKind, lr: f64) -> Self {
        OptimState {
            kind,
            lr,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimKind::Adam, lr)
    }

    pub fn kind(&self) -> OptimKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable entry, then clears all gradients.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for (name, t) in params.iter() {
            if t.requires_grad() && t.grad().is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        for (name, p) in params.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let g = p.take_grad().expect("checked above");
            match self.kind {
                OptimKind::Sgd => {
                    p.data_mut().iter_mut().zip(&g).for_each(|(w, gi)| *w -= self.lr * gi);
                }
                OptimKind::Adam => {
                    let (m, v) = self
                        .moments
                        .entry(name.to_string())
                        .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    let bc1 = 1.0 - ADAM_BETA1.powi(t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t);
                    for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *w -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        params.zero_grad();
        Ok(())
    }
}
