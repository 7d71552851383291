//! On-disk formats: the `MPF1` tensor container, binary PGM masks, the run
//! configuration, prototype bank files, embedding manifests and checkpoints.

pub mod bank;
pub mod checkpoint;
pub mod config;
pub mod pgm;
pub mod tensor;

pub use tensor::{read_tensor, write_tensor, Tensor};
