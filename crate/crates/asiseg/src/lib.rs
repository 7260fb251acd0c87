//! File formats, datasets, training, evaluation and the command-line surface
//! built on `asiseg-core`.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod formats;
pub mod io;
pub mod train;

pub use error::{AppError, AppResult};
