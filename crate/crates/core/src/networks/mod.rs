//! Mask predictor and reconstructors.

pub mod bundle;
pub mod conv;
pub mod layers;
pub mod mnet;
pub mod modl;
pub mod unet;

use candle_core::Tensor;

use crate::error::Result;
use crate::ops::{CTensor, CenteredDft};
use crate::params::ParamStore;

pub use bundle::{load_bundle, save_bundle, Manifest, Model, ModelKind};
pub use mnet::{MnetConfig, MnetModel};
pub use modl::{cg_solve, dc_block, ModlConfig, ModlModel};
pub use unet::{UnetConfig, UnetModel};

/// Maps masked k-space to a magnitude image, differentiably.
pub trait Reconstructor {
    /// `y`: masked k-space `(b, m, n)`; `mask`: rows `(b, m)` or `(1, m)`.
    /// Returns magnitude images `(b, m, n)`.
    fn reconstruct(&self, y: &CTensor, mask: &Tensor, dft: &CenteredDft) -> Result<Tensor>;

    /// Trainable parameters, if any.
    fn params(&self) -> Option<&ParamStore> {
        None
    }

    fn kind(&self) -> &'static str;
}

/// Magnitude of the zero-filled inverse transform; no parameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroFilled;

impl Reconstructor for ZeroFilled {
    fn reconstruct(&self, y: &CTensor, _mask: &Tensor, dft: &CenteredDft) -> Result<Tensor> {
        dft.inverse(y)?.abs()
    }

    fn kind(&self) -> &'static str {
        "zero-filled"
    }
}
