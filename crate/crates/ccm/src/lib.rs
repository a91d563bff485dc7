//! Computational cannula microscopy (CCM) toolkit.
//!
//! A cannula (a short multimode fiber segment) scrambles the fluorescence it
//! guides: the sensor sees a speckle-like intensity pattern with little
//! resemblance to the object. Because the transport is incoherent, the map
//! from object intensity to sensor intensity is linear and nonnegative,
//! `y = M x + noise`. This crate provides
//!
//! - [`image`]: the shared image container, aperture masking, resampling,
//!   and the IMGF on-disk format;
//! - [`fiber`]: synthesis of speckle transfer operators and the forward
//!   model, with the CCMM on-disk format;
//! - [`phantom`]: synthetic object generators (beads, neuron-like
//!   structures, quasi-QR glyphs), raster tiling, and paired datasets;
//! - [`linear`]: single-pixel calibration and regularized linear inversion
//!   (Tikhonov, truncated SVD) with cached factorizations;
//! - [`ann`]: a from-scratch dense-block U-net with manual backpropagation,
//!   ADAM training, and the CCMW checkpoint format;
//! - [`metrics`]: SSIM, MAE, line profiles, FWHM, and two-point separation;
//! - [`bench`]: the timing harness comparing neural inference against
//!   linear solves across image sizes.
//!
//! All randomness is seeded; identical seeds give bitwise-identical
//! artifacts regardless of thread count.

pub mod ann;
pub mod bench;
pub mod error;
pub mod fiber;
pub mod image;
pub mod linalg;
pub mod linear;
pub mod metrics;
pub mod phantom;
pub mod util;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
