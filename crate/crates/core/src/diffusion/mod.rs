//! Toy conditional diffusion: data, noise grid, base network, samplers.

mod dataset;
mod denoiser;
mod sampler;
mod schedule;
mod train;

pub use dataset::{Cond, GaussianComponent, RingSpec, ToyDataset};
pub use denoiser::{Denoiser, DenoiserSpec, NoHook, TrunkHook};
pub use sampler::{
    cfg_combine, forward_perturb, sample, sample_batch, AnalyticDenoiser, CfgTeacher, EpsModel, SampleOutput,
    SamplerKind, StepRecord,
};
pub use schedule::NoiseSchedule;
pub use train::{train_base, write_log_csv, StepLog, TrainConfig};
