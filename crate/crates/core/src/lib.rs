//! Virtual adversarial training (VAT) for semi-supervised classification.
//!
//! The crate bundles everything needed to train and inspect VAT models on a
//! single CPU core, in double precision:
//!
//! - [`autodiff`]: a tape-based reverse-mode engine over dense [`Tensor`]s
//!   with the layer primitives the CNNs need.
//! - [`model`]: the large/small CNNs, a small MLP and a softmax-linear model,
//!   plus the `VATM` checkpoint format.
//! - [`vat`]: adversarial direction estimation by power iteration, the local
//!   distribution smoothness (LDS) value, the averaged regularizer and the
//!   combined loss.
//! - [`train`]: Adam, stratified splitting with label hiding, the
//!   semi-supervised training loop and repeated-run summaries.
//! - [`data`]: PGM rasters, manifests and synthetic datasets.
//! - [`config`] and [`cli`]: the `vatlab` command line.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vat;

pub use autodiff::{Distribution, Graph, NormMode, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{l2_normalize, Tensor};
