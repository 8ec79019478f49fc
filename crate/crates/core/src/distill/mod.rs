//! Teacher to student distillation of adapter weights.

pub mod config;
pub mod pair;
pub mod run;

pub use config::{DistillConfig, Scenario};
pub use pair::{featkd_loss, outkd_loss, DistillTerms, TeacherOutputs, TeacherStudentPair, Translator};
pub use run::{run_distillation, validation_batch, CONVERGED_LOSS, CheckpointScore, DistillReport, DistillRow};
