//! Multi-scale masked autoencoding for 3D point clouds.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with a define-by-run reverse-mode tape.
//! * [`geometry`]: furthest point sampling, k-NN, ball adjacency,
//!   inverse-distance interpolation and Chamfer distance.
//! * [`masking`]: multi-scale seed/neighbour hierarchy and back-projected masks.
//! * [`model`]: hierarchical encoder/decoder, reconstruction head, checkpoints.
//! * [`training`]: AdamW, warmup-cosine schedule, augmentation, training loop.
//! * [`data`]: point-cloud files, normalisation, synthetic shapes, datasets.
//! * [`eval`]: linear probe, few-shot episodes, fine-tuning.
//! * [`config`]: INI run configuration shared by the CLI.

pub(crate) mod bytes;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod masking;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use parallel::Exec;
pub use rng::Rng;
pub use tensor::{Graph, Real, Tensor, Var};
