//! A small differentiable-computation core: tensors, a reverse-mode tape,
//! dense/GRU layers, Gaussian heads, Adam and checkpoints.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod policy;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use layers::{gaussian_entropy, gaussian_log_prob, gaussian_log_prob_value, Dense, GruCell, Mlp2};
pub use optim::Adam;
pub use policy::{AbPlannerNet, PlannerArch, StepOutput};
pub use tape::{Gradients, ParamId, ParamStore, Tape, Var};
pub use tensor::Tensor;
