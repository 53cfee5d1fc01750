//! Space-time wind field simulation, sparse-sensor extrapolation and
//! uncertainty diagnostics.

pub mod bpfa;
pub mod cs_baseline;
pub mod error;
pub mod io;
pub mod lowrank;
pub mod model;
pub mod pipeline;
pub mod spectral_sim;
pub mod stats;

pub use error::{Result, WflabError};
pub use model::{FieldTensor, GridSpec, ObservationMask};
