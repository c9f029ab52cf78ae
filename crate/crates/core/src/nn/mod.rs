//! Small differentiable-model substrate.

pub mod adam;
pub mod gaussian;
pub mod gradcheck;
pub mod mlp;
pub mod params;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use gaussian::{
    gaussian_log_prob, gaussian_log_prob_grad, reparam_sample, standard_normal, GaussianHead, GaussianRegressor,
    LogProbGrad,
};
pub use gradcheck::{check_objective, finite_difference, grad, max_relative_error, HalfSquaredNorm, Objective};
pub use mlp::{Mlp, MlpCache, MlpSpec, SquaredError};
pub use params::{layout_hash, load_checkpoint, read_checkpoint, save_checkpoint, soft_update, write_checkpoint, ParamStore};
