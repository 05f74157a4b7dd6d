//! Multispectral intrinsic image decomposition.
//!
//! A luminance cube is factored as `L = S .* R`, with the shading spectra
//! restricted to the illumination direction and the reflectance spectra to a
//! low-rank basis learned from a reflectance library. Retinex-style pair
//! terms weighted by spectral similarity regularize the split.

pub mod basis;
pub mod cg;
pub mod cube;
pub mod error;
pub mod field;
pub mod io;
pub mod metrics;
pub mod operators;
pub mod rgb;
pub mod solve;
pub mod sparse;
pub mod sweep;
pub mod synth;
pub mod weights;

pub use basis::{reflectance_basis_pca, shading_basis, BasisMatrix, ReflectanceLibrary};
pub use cube::{PixelSpectrum, SpectralCube};
pub use error::{Error, Result};
pub use field::CoefficientField;
pub use metrics::{combined_lmse, lmse, LmseConfig};
pub use solve::{SolverConfig, WeightRouting};
pub use weights::{compute_weight_field, WeightField, WeightParams};
