//! Curve-skeleton extraction from 3D point clouds.
//!
//! A shape is decomposed into generalized-cylinder parts: for many seed
//! locations a part is grown section by section along its axis, a subset of
//! parts that covers the cloud with little overlap is selected, and the
//! selected axes are linked into a single skeleton graph.

pub mod cloud;
pub mod crosssec;
pub mod error;
pub mod graph;
pub mod grow;
pub mod link;
pub mod pipeline;
pub mod register;
pub mod select;
pub mod synth;

pub use error::{Error, Result};
