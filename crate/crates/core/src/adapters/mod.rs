//! Residual adapters that inject the guidance scale, class and noise level
//! into the hidden layers of a frozen denoiser.

mod arch;
mod encoder;
mod stack;

pub use arch::{Adapter, Architecture, Init};
pub use encoder::ConditionEncoder;
pub use stack::{AdapterSpec, AdapterStack, GuidedModel};
