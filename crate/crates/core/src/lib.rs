//! Classifying visualization tasks from interaction and behavior logs.
//!
//! The pipeline runs: [`ingest`] → [`clean`] → [`transform`] → one of the
//! classifiers ([`knn`], [`cnn`], [`rocket`]) → [`eval`] / [`importance`] /
//! [`interpret`]. [`synth`] generates labeled sessions for testing the whole
//! chain.

pub mod clean;
pub mod cnn;
pub mod error;
pub mod eval;
pub mod importance;
pub mod interpret;
pub mod ingest;
pub mod knn;
pub mod model;
pub mod ridge;
pub mod rocket;
pub mod seed;
pub mod synth;
pub mod transform;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    category_code, BehaviorFrame, Environment, FeatureGroup, FeatureKind, FeatureSchema,
    FeatureSpec, Scale, SessionTrace, Space, TaskLabel,
};
