//! Grid-structured residual networks for semantic segmentation.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors, convolutions and a reverse-mode tape.
//! - [`grid`]: the stream/column grid, connection masks and counting.
//! - [`regularization`]: total dropout of residual mappings.
//! - [`data`]: synthetic scenes and crop augmentation.
//! - [`train`]: Adam, the training loop and checkpoints.
//! - [`metrics`]: IoU, iIoU and multi-scale prediction.
//! - [`cli`]: the `gridnet` command line.

pub mod cli;
pub mod data;
pub mod grid;
pub mod metrics;
pub mod regularization;
pub mod tensor;
pub mod train;
