//! Toy host network and adapter attachment.

pub mod attach;
pub mod denoiser;

pub use attach::{attach_adapters, Adapter, AttachedModel};
pub use denoiser::{time_embedding, DenoiseInput, ModelSpec, NoisePredictor, Prediction, ToyDenoiser, TrainScope, EMBEDDER_TABLE};
