//! Toy denoising diffusion: schedule, data, noise-prediction loss, sampling.

pub mod data;
pub mod loss;
pub mod sampler;
pub mod schedule;

pub use data::{DatasetSpec, ToyDataset};
pub use loss::{noise_mse, noised_batch, task_loss, NoisedBatch};
pub use sampler::{ancestral_sample, ancestral_sample_observed, SampleStep, Trajectory};
pub use schedule::{NoiseSchedule, ScheduleSpec};
