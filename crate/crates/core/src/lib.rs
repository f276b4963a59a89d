//! Stability training for small convolutional networks.
//!
//! The crate bundles everything needed to train a network whose outputs stay
//! put under small input perturbations and to measure how well that worked:
//!
//! * [`tensor`] and [`autodiff`]: dense `f64` arrays and a recorded tape for
//!   reverse-mode gradients.
//! * [`network`]: a small conv net with a classifier or unit-norm embedding head.
//! * [`distortions`]: Gaussian sampling plus JPEG-style, thumbnail and crop distortions.
//! * [`objectives`]: task losses, stability losses and the combined training steps.
//! * [`trainer`]: two-phase SGD-with-momentum training and grid search.
//! * [`evaluation`]: near-duplicate PR sweeps, distance CDFs, ranking score and precision@k.
//! * [`dataset`]: synthetic grating corpora, pairs, triplets and PPM I/O.

pub mod autodiff;
pub mod dataset;
pub mod distortions;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod network;
pub mod objectives;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, NodeId, ParamId, Tape};
pub use error::{Error, Result};
pub use image::Image;
pub use tensor::{Tensor, TensorError};
