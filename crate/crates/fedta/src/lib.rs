//! Desk-scale simulator of a federated class-incremental learning protocol
//! built around a frozen encoder: clients train input-enhancement tokens and
//! tail anchors locally, exchange knowledge bases and class prototypes, and
//! the server fuses input knowledge and elects global prototypes.

pub mod anchor;
pub mod config;
pub mod datagen;
pub mod encoder;
pub mod enhancement;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod numkit;
pub mod seeding;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use federation::Method;
