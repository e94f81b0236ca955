//! Projection model, hard-negative triplet loss, analytic gradients with the
//! focal mask held constant, optimizers and the training loop.

mod backprop;
mod gradcheck;
mod loss;
mod model;
mod optim;
mod trainer;

pub use backprop::{
    backward, backward_recomputing_masks, forward, forward_backward, Batch, ForwardPass,
    ForwardSignature,
};
pub use gradcheck::{grad_check, relative_error, BlockError, GradReport, REL_ERROR_FLOOR};
pub use loss::{triplet_loss, LossConfig, TripletLoss, DEFAULT_MARGIN};
pub use model::{project, Checkpoint, ProjectionModel};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use trainer::{train, TrainConfig, TrainOutcome, PARAMETER_LIMIT};
