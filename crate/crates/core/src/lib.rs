pub mod checks;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiment;
pub mod io;
pub mod kernel_svm;
pub mod perturb;
pub mod pool;
pub mod rcg;
pub mod stiefel;

pub use error::{DspError, Result};
