use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    SgdMomentum,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::SgdMomentum => "sgd_momentum",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd_momentum" | "sgd-momentum" => Ok(OptimizerKind::SgdMomentum),
            other => Err(Error::Config(format!("unknown optimizer {other:?}; expected adam or sgd_momentum"))),
        }
    }
}

/// First-order optimizer with per-parameter state, keyed by visit order.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    steps: i32,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Applies one update. Fails without touching anything if a gradient is
    /// non-finite or misshapen.
    pub fn step(&mut self, params: &mut dyn Parameters<T>, grads: &[Tensor<T>]) -> Result<()> {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        params.visit(&mut |n, t| {
            names.push(n.to_string());
            shapes.push(t.shape().to_vec());
        });
        if grads.len() != names.len() {
            return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), names.len())));
        }
        for ((name, shape), g) in names.iter().zip(&shapes).zip(grads) {
            if g.shape() != shape.as_slice() {
                return Err(Error::shape("optimizer gradient", shape, g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        if self.first.is_empty() {
            self.first = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            if self.kind == OptimizerKind::Adam {
                self.second = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            }
        }
        self.steps += 1;
        let lr = T::lit(self.lr);
        let mut i = 0;
        match self.kind {
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2), T::lit(ADAM_EPS));
                let c1 = T::one() - b1.powi(self.steps);
                let c2 = T::one() - b2.powi(self.steps);
                let (first, second) = (&mut self.first, &mut self.second);
                params.visit_mut(&mut |_, p| {
                    let g = grads[i].data();
                    let m = first[i].data_mut();
                    let v = second[i].data_mut();
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                        v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                    i += 1;
                });
            }
            OptimizerKind::SgdMomentum => {
                let mu = T::lit(SGD_MOMENTUM);
                let velocity = &mut self.first;
                params.visit_mut(&mut |_, p| {
                    let g = grads[i].data();
                    let vel = velocity[i].data_mut();
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        vel[j] = mu * vel[j] + g[j];
                        *w -= lr * vel[j];
                    }
                    i += 1;
                });
            }
        }
        Ok(())
    }
}
