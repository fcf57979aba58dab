use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use super::{Gradients, ModelParams};
use crate::{Error, Result};

/// Update rule applied after each gradient computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `momentum = 0` is exactly [`ModelParams::apply_sgd`].
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::Sgd { momentum } if (0.0..1.0).contains(&momentum) => Ok(()),
            OptimizerKind::Adam { beta1, beta2, eps }
                if (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 =>
            {
                Ok(())
            }
            other => Err(Error::config(format!("invalid optimizer settings {other:?}"))),
        }
    }
}

type Slots = Vec<(Array2<f64>, Array1<f64>)>;

/// Stateful optimizer bound to one model's shapes.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    first: Slots,
    second: Slots,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ModelParams) -> Result<Self> {
        kind.validate()?;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        let zeros = || -> Slots {
            params
                .layers()
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len())))
                .collect()
        };
        let (first, second) = match kind {
            OptimizerKind::Sgd { momentum: 0.0 } => (Vec::new(), Vec::new()),
            OptimizerKind::Sgd { .. } => (zeros(), Vec::new()),
            OptimizerKind::Adam { .. } => (zeros(), zeros()),
        };
        Ok(Self {
            kind,
            lr,
            first,
            second,
            steps: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) {
        self.steps = self.steps.saturating_add(1);
        match self.kind {
            OptimizerKind::Sgd { momentum: 0.0 } => params.apply_sgd(grads, self.lr),
            OptimizerKind::Sgd { momentum } => {
                let lr = self.lr;
                for ((layer, (dw, db)), (vw, vb)) in params
                    .layers_mut()
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(self.first.iter_mut())
                {
                    Zip::from(&mut *vw).and(dw).for_each(|v, &g| *v = momentum * *v + g);
                    Zip::from(&mut *vb).and(db).for_each(|v, &g| *v = momentum * *v + g);
                    layer.weights.scaled_add(-lr, vw);
                    layer.bias.scaled_add(-lr, vb);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                let lr = self.lr;
                let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                };
                for (((layer, (dw, db)), (mw, mb)), (vw, vb)) in params
                    .layers_mut()
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    Zip::from(&mut layer.weights)
                        .and(&mut *mw)
                        .and(&mut *vw)
                        .and(dw)
                        .for_each(|p, m, v, &g| update(p, m, v, g));
                    Zip::from(&mut layer.bias)
                        .and(&mut *mb)
                        .and(&mut *vb)
                        .and(db)
                        .for_each(|p, m, v, &g| update(p, m, v, g));
                }
            }
        }
    }
}
