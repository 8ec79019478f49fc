//! Low-rank adapters, routed multi-style adapters and parameter accounting.

pub mod config;
pub mod count;
pub mod lora;
pub mod manifest;
pub mod router;
pub mod styleinject;

pub use config::{AdapterConfig, Method, DEFAULT_EPS};
pub use count::{count_params, format_millions, plan_adapters, AdapterKind, LayerCount, ParamBreakdown, PlannedAdapter};
pub use lora::LoraAdapter;
pub use manifest::{AdaptPolicy, LayerKind, LayerManifest, ManifestEntry};
pub use router::{Pooling, StyleRouter};
pub use styleinject::{adain_decompose, Adain, StyleInjectAdapter, StyleInjectInit, StyleInjectOutput, Variant};
