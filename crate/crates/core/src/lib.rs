//! Dual cluster contrastive learning for re-identification style retrieval.
//!
//! An MLP encoder maps feature vectors onto the unit sphere. Two memory
//! banks hold one vector per class: a sampled or hardest instance feature
//! and a running class mean. Training contrasts each embedding against both
//! banks and ties their class predictions together with a consistency term.
//! Without labels, DBSCAN over the embedded training set supplies
//! pseudo-labels every epoch.

pub mod checkpoint;
pub mod clustering;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod memory;
pub mod numerics;
pub mod run;
pub mod trainer;

pub use error::{Error, Result};
