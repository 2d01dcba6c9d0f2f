//! Hierarchical multi-modal enhancement network for RGB + infrared
//! transmission-line segmentation.
//!
//! The crate is self-contained: a small reverse-mode differentiation tape
//! ([`graph`]) over dense NCHW arrays ([`tensor`]) carries the layer
//! primitives ([`numerics`], [`deform`]) from which the dual-stream encoder,
//! the mutual enhancement block ([`mmeb`]), the deformable feature alignment
//! block ([`fab`]) and the decoder are assembled ([`network`]).

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod deform;
pub mod encoder;
pub mod error;
pub mod fab;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod mmeb;
pub mod network;
pub mod nn;
pub mod numerics;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::ParameterStore;
pub use tensor::{Real, Shape, Tensor};
