//! Object-adaptive k-space undersampling for accelerated MRI.
//!
//! A mask predictor (MNet) looks at the low-frequency rows of k-space and
//! proposes which high-frequency rows to acquire. It is trained against
//! per-object labels produced by the mask-backward refinement, alternating
//! with updates of an image reconstructor.

pub mod data;
pub mod error;
pub mod experiment;
pub mod forward_model;
pub mod masks;
pub mod metrics;
pub mod networks;
pub mod ops;
pub mod oracle;
pub mod params;
pub mod training;

pub use error::{Error, Result};
