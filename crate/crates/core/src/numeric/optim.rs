use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Adafactor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
    /// Linear warmup length in steps; 0 means constant learning rate.
    pub warmup_steps: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
        }
    }
}

/// Moment accumulators for one parameter tensor.
#[derive(Clone, Debug)]
enum Moments {
    Adam {
        m: Vec<f64>,
        v: Vec<f64>,
    },
    /// Factored second moment for matrices (row and column means).
    Factored {
        row: Vec<f64>,
        col: Vec<f64>,
    },
    Full {
        v: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: OptimConfig,
    step: u64,
    moments: Vec<Option<Moments>>,
}

const ADAFACTOR_EPS1: f64 = 1e-30;
const ADAFACTOR_CLIP: f64 = 1.0;

impl OptimState {
    pub fn new(config: OptimConfig) -> Self {
        OptimState {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn current_lr(&self) -> f64 {
        let w = self.config.warmup_steps;
        if w > 0 && self.step <= w {
            self.config.lr * self.step as f64 / w as f64
        } else {
            self.config.lr
        }
    }

    /// Applies one update. Parameters whose gradient is `None` are left untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch {
                op: "optim_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "optim_step",
                        left: p.shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
            }
        }
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        self.step += 1;
        let lr = self.current_lr();
        let t = self.step as f64;
        let cfg = self.config.clone();
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            let Some(g) = g else { continue };
            if cfg.weight_decay > 0.0 {
                let decay = 1.0 - lr * cfg.weight_decay;
                p.data_mut().iter_mut().for_each(|w| *w *= decay);
            }
            match cfg.kind {
                OptimizerKind::Adam => {
                    let st = slot.get_or_insert_with(|| Moments::Adam {
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                    });
                    let Moments::Adam { m, v } = st else {
                        unreachable!("moment kind fixed per run")
                    };
                    let bc1 = 1.0 - cfg.beta1.powf(t);
                    let bc2 = 1.0 - cfg.beta2.powf(t);
                    for i in 0..g.len() {
                        let gi = g.data()[i];
                        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        p.data_mut()[i] -= lr * mh / (vh.sqrt() + cfg.eps);
                    }
                }
                OptimizerKind::Adafactor => adafactor_update(p, g, slot, lr, t),
            }
        }
        Ok(())
    }
}

fn adafactor_update(p: &mut Tensor, g: &Tensor, slot: &mut Option<Moments>, lr: f64, t: f64) {
    let decay = 1.0 - t.powf(-0.8);
    let sq: Vec<f64> = g.data().iter().map(|x| x * x + ADAFACTOR_EPS1).collect();
    let mut update = vec![0.0; g.len()];
    let factored = g.shape().len() == 2 && g.rows() > 1 && g.cols() > 1;
    if factored {
        let (r, c) = (g.rows(), g.cols());
        let st = slot.get_or_insert_with(|| Moments::Factored {
            row: vec![0.0; r],
            col: vec![0.0; c],
        });
        let Moments::Factored { row, col } = st else {
            unreachable!("moment kind fixed per run")
        };
        for i in 0..r {
            let mean = sq[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
            row[i] = decay * row[i] + (1.0 - decay) * mean;
        }
        for j in 0..c {
            let mean = (0..r).map(|i| sq[i * c + j]).sum::<f64>() / r as f64;
            col[j] = decay * col[j] + (1.0 - decay) * mean;
        }
        let row_mean = row.iter().sum::<f64>() / r as f64;
        for i in 0..r {
            for j in 0..c {
                let v = row[i] * col[j] / row_mean;
                update[i * c + j] = g.data()[i * c + j] / v.sqrt();
            }
        }
    } else {
        let st = slot.get_or_insert_with(|| Moments::Full {
            v: vec![0.0; g.len()],
        });
        let Moments::Full { v } = st else {
            unreachable!("moment kind fixed per run")
        };
        for i in 0..g.len() {
            v[i] = decay * v[i] + (1.0 - decay) * sq[i];
            update[i] = g.data()[i] / v[i].sqrt();
        }
    }
    let rms = (update.iter().map(|u| u * u).sum::<f64>() / update.len() as f64).sqrt();
    let denom = (rms / ADAFACTOR_CLIP).max(1.0);
    for (w, u) in p.data_mut().iter_mut().zip(&update) {
        *w -= lr * u / denom;
    }
}
