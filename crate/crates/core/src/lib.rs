//! Federated training of face-embedding models with private per-client classifier
//! heads and server-side gradient correction of the class embeddings.
//!
//! The crate is `no_std` + `alloc`. File formats, configuration and the CLI live in the
//! companion `fedgc` crate.

#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod linalg;
pub mod losses;
pub mod nn;
pub mod numcheck;
pub mod optim;
pub mod regularizers;
pub mod rng;
pub mod simulation;

pub use error::{Error, Result};
pub use linalg::{FeatureVector, Matrix};
