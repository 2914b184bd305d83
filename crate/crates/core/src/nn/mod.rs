//! Dense numerical kernels: matrices, reverse-mode gradients, MLPs,
//! attention, Fourier features and the Adam optimizer.

pub mod adam;
pub mod fourier;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod params;
pub mod tape;

pub use adam::{clip_global_norm, lr_schedule, AdamState};
pub use fourier::FourierEncoder;
pub use gradcheck::grad_check;
pub use matrix::{matmul, softmax_attention, Matrix};
pub use mlp::{mlp_forward, Linear, Mlp, MlpParams};
pub use params::{xavier, ParamId, ParamStore};
pub use tape::{Activation, Bound, Gradients, Tape, Var};
