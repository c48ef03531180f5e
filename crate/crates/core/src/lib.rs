//! Capsule-network building blocks: a small reverse-mode autodiff tensor
//! engine, capsule layers (squash, ConvCaps, CapsSum), dynamic and 3-D
//! dynamic routing, CapsCells and the multi-level capsule extractor, the
//! full DL-CapsNet model with its class-independent decoder, and the
//! two-phase margin-loss training loop.

pub mod blocks;
pub mod capsule_ops;
pub mod checkpoint;
pub mod config;
pub mod data_io;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod routing;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Padding, Real, Tensor, Var};
