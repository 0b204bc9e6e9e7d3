//! Dense matrices, a reverse-mode tape, MLPs and their optimizers.

mod gradcheck;
mod matrix;
mod mlp;
mod optim;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, DEFAULT_STEP};
pub use matrix::{dot, norm, Matrix};
pub use mlp::{Head, Layer, MlpParams, MlpVars};
pub use optim::{adam_step, ema_update, AdamState};
pub use tape::{Gradients, Tape, Var, LOG_FLOOR};
