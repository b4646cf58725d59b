//! Dynamic dependency network models: Bayesian model averaging over
//! parental structures, lags and discount factors, joint forecast moments,
//! path simulation and mean-variance portfolio rules.

pub mod dlm;
pub mod engine;
pub mod error;
pub mod forecast;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod model_space;
pub mod par;
pub mod pipeline;
pub mod portfolio;
pub mod synthetic;

pub use error::{DdnmError, ErrorKind, Result};
pub use par::Execution;
