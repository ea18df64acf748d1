//! Few-shot segmentation guided by language-derived attribute priors.
//!
//! The crate is organized bottom-up: [`autodiff`] provides the reverse-mode
//! engine, [`providers`] the frozen encoder outputs, [`attributes`] the
//! prompt/embedding sets, [`mae`] the Grad-CAM prior stack, [`maa`] the
//! prototype/text alignment, [`fusion`] the decoding path, [`training`] the
//! losses and optimizer loop, [`episodes`] the synthetic data and fold protocol,
//! and [`metrics`] IoU-based evaluation.

pub mod attributes;
pub mod autodiff;
pub mod checksum;
pub mod error;
pub mod episodes;
pub mod exec;
pub mod fusion;
pub mod image;
pub mod maa;
pub mod mae;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod pipeline;
pub mod providers;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{LdagError, Result};
