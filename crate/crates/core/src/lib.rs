//! A desk-scale distributed deep learning platform.
//!
//! Nets are graphs of [`layers::Layer`]s built from a [`netgraph::NetConfig`],
//! optionally partitioned across workers. Workers run one of the
//! [`training`] algorithms and exchange parameters with the servers of
//! [`paramserver`] through the message routing of [`cluster`].

pub mod checkpoint;
pub mod cluster;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod job;
pub mod layers;
pub mod netgraph;
pub mod paramserver;
pub mod presets;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Blob, Dim};
