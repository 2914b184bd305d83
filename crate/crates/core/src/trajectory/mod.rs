//! Cached teacher trajectories and the `.agdt` binary store.

mod generate;
mod store;

pub use generate::{
    generate_diffusion_pairs, generate_guided_trajectories, trajectory_divergence, trajectory_seed, TrajectorySpec,
};
pub use store::{
    is_held_out, sample_minibatch, StoreHeader, TrajectoryRecord, TrajectorySource, TrajectoryStore, HEADER_LEN,
    MAGIC, VERSION,
};
