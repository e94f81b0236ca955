use serde::{Deserialize, Serialize};

use super::model::ProjectionModel;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Optimizer state. Adam keeps first and second moments shaped like the
/// model.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Optimizer {
    Sgd,
    Adam {
        m: ProjectionModel,
        v: ProjectionModel,
        t: i32,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &ProjectionModel) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => Self::Adam {
                m: model.zeros_like(),
                v: model.zeros_like(),
                t: 0,
            },
        }
    }

    pub fn step(&mut self, model: &mut ProjectionModel, grads: &ProjectionModel, lr: f64) {
        match self {
            Self::Sgd => {
                for ((_, p), (_, g)) in model.blocks_mut().into_iter().zip(grads.blocks()) {
                    for (p, g) in p.iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }
            }
            Self::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*t);
                let c2 = 1.0 - ADAM_BETA2.powi(*t);
                let params = model.blocks_mut();
                let moments = m.blocks_mut().into_iter().zip(v.blocks_mut());
                for (((_, p), (_, g)), ((_, m), (_, v))) in
                    params.into_iter().zip(grads.blocks()).zip(moments)
                {
                    for k in 0..p.len() {
                        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                        p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}
