//! Multi-class anomaly detection over backbone feature maps.
//!
//! A near-identity adapter maps features into a trainable space, per-class
//! contextual centers are averaged from normal samples, and every test
//! feature is recomposed from its matched class center position by position.
//! A small discriminator separates normal features from synthetic anomalies
//! using both the feature and its residual to the recomposed center; noise
//! for the synthetic anomalies is scaled by the distance to that center.

pub mod bench;
pub mod centers;
pub mod cli;
pub mod config;
pub mod crd;
pub mod dafs;
pub mod dataset;
pub mod error;
pub mod feature_prep;
pub mod nn;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod tensor_store;

pub use error::{CrasError, Result};
pub use tensor::{FeatureMap, Mask, Real};
