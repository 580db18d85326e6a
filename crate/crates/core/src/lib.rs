//! Multi-task transformer training with shared parallel attention layers
//! (SPALs) over a frozen encoder, plus task-relatedness diagnostics.

pub mod analysis;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod engine;
pub mod error;
pub mod io;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod param;
pub mod seeding;
pub mod spal;
pub mod synth;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
