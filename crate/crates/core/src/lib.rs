//! Hyperspectral target detection with a pyramid selective state-space
//! backbone trained by spectrally contrastive learning.
//!
//! The crate is organised bottom-up: [`tensor`] is a small reverse-mode
//! differentiation engine, [`ssm`] the selective scan, [`model`] the
//! detector backbone, [`augment`] and [`loss`] the contrastive training
//! signal, [`train`] the optimiser loop, [`detect`] and [`eval`] inference
//! and scoring, [`data`] the file formats and synthetic scenes, [`config`] the
//! text configuration format and [`verify`] the oracle self-checks.

mod binio;
pub mod augment;
pub mod config;
pub mod data;
pub mod detect;
pub mod eval;
pub mod error;
pub mod loss;
pub mod model;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
