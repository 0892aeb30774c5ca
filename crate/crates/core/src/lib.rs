//! Graph-convolutional expression recognition on short clips.
//!
//! Frames are encoded by a small CNN, treated as nodes of a fully connected
//! graph with a learned adjacency matrix, refined by graph convolution and a
//! bidirectional recurrent layer, then fused with weights derived from the
//! adjacency matrix and classified.

pub mod config;
pub mod container;
pub mod encoder;
pub mod error;
pub mod export;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
