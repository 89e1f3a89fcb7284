//! Model assembly, optimisation, training, evaluation and gradient checking.

pub mod gradcheck;
mod metrics;
mod model;
mod objective;
mod optim;
mod train;

pub use metrics::{miou, IouCounts};
pub use model::{argmax_mask, prototype_vars, BoundHead, BoundModel, Head, HeadMode, Model};
pub use objective::{head_objective, BatchLoss};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, SGD_MOMENTUM};
pub use train::{evaluate, train, train_eval_split, EvalReport, TrainConfig, TrainRun, Trainer};
