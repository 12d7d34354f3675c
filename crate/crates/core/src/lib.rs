//! Vessel-aware optimal-transport enhancement of retinal fundus images.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffgraph`]: reverse-mode differentiation over [`Tensor`] values
//! - [`morphology`]: soft and exact morphological skeletons
//! - [`topo`]: skeleton-overlap and endpoint-window losses
//! - [`perceptual`]: SSIM, MS-SSIM and PSNR
//! - [`nets`]: generator, critic and the fixed matched-filter segmenter
//! - [`synthdata`]: vessel phantoms and their degradation
//! - [`trainer`]: two-phase WGAN-GP optimisation
//! - [`metrics`]: evaluation battery
//! - [`gradsuite`]: named finite-difference gradient suites
//! - [`io`]: on-disk formats

pub mod diffgraph;
pub mod error;
pub mod gradsuite;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod morphology;
pub mod nets;
pub mod perceptual;
pub mod rng;
pub mod synthdata;
pub mod topo;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{Grid2D, Tensor};
