//! SGD, Adam, and RMSprop parameter updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Rmsprop,
}

/// Hyperparameters for one optimizer. Defaults are the conventional ones.
#[derive(Clone, Copy, Debug)]
pub struct OptimizerSettings {
    pub learning_rate: f64,
    /// Adam first-moment decay.
    pub beta1: f64,
    /// Adam second-moment decay.
    pub beta2: f64,
    /// RMSprop accumulator decay.
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            decay: 0.9,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state: step count plus per-parameter moment accumulators whose
/// shapes mirror the parameters they track.
pub struct Optimizer {
    kind: OptimizerKind,
    settings: OptimizerSettings,
    step: u64,
    first_moment: Vec<DenseArray>,
    second_moment: Vec<DenseArray>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, shapes: &[Vec<usize>]) -> Self {
        Self::with_settings(kind, shapes, OptimizerSettings::default())
    }

    pub fn with_settings(
        kind: OptimizerKind,
        shapes: &[Vec<usize>],
        settings: OptimizerSettings,
    ) -> Self {
        let zeros: Vec<DenseArray> = shapes.iter().map(|s| DenseArray::zeros(s.clone())).collect();
        Optimizer {
            kind,
            settings,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to every tracked parameter. Advances the step count
    /// by exactly one.
    pub fn apply_update(&mut self, params: &mut [&mut DenseArray], grads: &[DenseArray]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::OptimizerShapeMismatch {
                param_index: params.len().min(grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(Error::OptimizerShapeMismatch { param_index: i });
            }
        }
        self.step += 1;
        let s = self.settings;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads.iter()) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= s.learning_rate * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - s.beta1.powi(self.step as i32);
                let bc2 = 1.0 - s.beta2.powi(self.step as i32);
                for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
                    let m = self.first_moment[i].data_mut();
                    let v = self.second_moment[i].data_mut();
                    for ((pv, gv), (mv, vv)) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        *mv = s.beta1 * *mv + (1.0 - s.beta1) * gv;
                        *vv = s.beta2 * *vv + (1.0 - s.beta2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *pv -= s.learning_rate * m_hat / (v_hat.sqrt() + s.epsilon);
                    }
                }
            }
            OptimizerKind::Rmsprop => {
                for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
                    let v = self.second_moment[i].data_mut();
                    for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                        *vv = s.decay * *vv + (1.0 - s.decay) * gv * gv;
                        *pv -= s.learning_rate * gv / (vv.sqrt() + s.epsilon);
                    }
                }
            }
        }
        if params.iter().any(|p| !p.all_finite()) {
            return Err(Error::NumericOverflow { op: "apply_update" });
        }
        Ok(())
    }
}
