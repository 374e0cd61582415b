//! Keyed block-shuffling image encryption, encrypted tiny-ViT sub-models,
//! random ensembles of those sub-models, and the l-inf attack engines used
//! to measure how the pieces hold up.
//!
//! The crate is organized around the pipeline:
//!
//! * [`keys`] — secret per-block pixel permutations and the keyset file.
//! * [`vit`] — a fixed tiny patch-embedding transformer with exact analytic
//!   forward/backward (parameter and input gradients).
//! * [`train`] — SGD-with-momentum training on (optionally encrypted) images.
//! * [`ensemble`] — per-key encrypted inference and the random S-of-N ensemble.
//! * [`attack`] — FGSM, PGD (untargeted/targeted, with step-size halving),
//!   the black-box Square Attack, and a worst-case suite runner.
//! * [`data`] — the synthetic 10-class shape dataset and its container format.
//! * [`experiment`] — end-to-end experiment runners producing [`report`]s.

pub mod attack;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod keys;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vit;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
