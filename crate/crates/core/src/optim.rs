//! Parameter update rules and step-decay schedules.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `max(floor, init · 0.5^⌊iter / period⌋)`.
pub fn step_decay(iter: u64, init: f64, period: u64, floor: f64) -> f64 {
    let halvings = (iter / period.max(1)).min(1100) as i32;
    (init * 0.5f64.powi(halvings)).max(floor)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}` (sgd|adam)"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// Plain gradient descent or Adam over a fixed, ordered parameter list.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Apply one update; `grads[i]` belongs to `params[i]`. The parameter list
    /// must keep the same order and shapes across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(Error::dim("optimizer_step", p.shape(), &[g.len()]));
            }
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.sub_scaled(g, lr)?;
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                self.t += 1;
                let c1 = 1.0 - self.beta1.powi(self.t);
                let c2 = 1.0 - self.beta2.powi(self.t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, x) in p.data_mut().iter_mut().enumerate() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                        *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_examples() {
        assert_eq!(step_decay(0, 1e-3, 5000, 1e-4), 1e-3);
        assert_eq!(step_decay(5000, 1e-3, 5000, 1e-4), 5e-4);
        assert_eq!(step_decay(25000, 1e-3, 5000, 1e-4), 1e-4);
        assert_eq!(step_decay(u64::MAX, 1e-3, 1, 1e-4), 1e-4);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        opt.step(&mut [&mut p], &[vec![3.0, -0.5]], 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
        assert!((p.data()[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = Tensor::new(&[1], vec![2.5]).unwrap();
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            Optimizer::new(kind).step(&mut [&mut p], &[vec![4.0]], 0.0).unwrap();
            assert_eq!(p.data(), &[2.5]);
        }
    }
}
