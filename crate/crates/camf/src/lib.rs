//! Two-level multi-modal fusion for connectivity-matrix + volume
//! classification: conv feature extractors, batch-level self/cross
//! attention with adaptive simplex weighting, a cross-validated training
//! harness, balanced-class metrics, and a gradient-guided Score-CAM
//! interpretation pipeline. Synthetic datasets with planted, recoverable
//! signal make the whole stack verifiable end to end on a desk machine.

pub mod backbones;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;

pub use error::{CamfError, ErrorKind, Result};
pub use exec::ExecMode;
pub use fusion::{FusionMode, FusionState, ValueSource};
pub use model::{Batch, CamfModel, ModelConfig};
