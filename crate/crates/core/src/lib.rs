pub mod depthio;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod patterns;
pub mod pipeline;
pub mod refine;
pub mod sffm;
pub mod synthetic;
pub mod objective;
pub mod twobranch;
pub mod uffm;

pub use error::{Error, Result};
