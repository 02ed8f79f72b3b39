//! The two-dimensional grid of streams and columns.
//!
//! Stream `i` runs at `F_0 * 2^i` channels and `i` halvings of the input
//! resolution. Column `j` either subsamples (information flows from stream
//! `i - 1` to `i`) or upsamples (from `i + 1` to `i`). Block `(i, j)` adds the
//! horizontal residual step along its stream to the vertical mapping into it.

mod check;
mod count;
mod model;
mod spec;

pub use check::gradcheck_grid;
pub use count::{
    approx_activation_count, approx_param_count, count_params_exact, count_params_pruned,
    exact_activation_count, grid_report, GridReport,
};
pub use model::{fuse_block, BlockAddends, BlockKey, ForwardOutput, GridModel, Param, ParamEntry};
pub use spec::{
    preset_mask, stream_dims, ColumnKind, ConnectionMask, Fusion, GridSpec, MaskChoice,
    MaskPreset, Topology,
};

use crate::tensor::{Shape, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("incompatible mask preset: {0}")]
    IncompatiblePreset(String),
    #[error("input {h}x{w} is too small for {n_streams} streams (need at least {min}x{min})")]
    InputTooSmall {
        h: usize,
        w: usize,
        n_streams: usize,
        min: usize,
    },
    #[error("input has {actual} channels but the grid expects {expected}")]
    InputChannels { expected: usize, actual: usize },
    #[error("the connection mask leaves the output block unreachable")]
    OutputUnreachable,
    #[error("block ({i}, {j}) produced {actual}, expected {expected}")]
    ShapeDrift {
        i: usize,
        j: usize,
        expected: Shape,
        actual: Shape,
    },
    #[error("block fusion received no input terms")]
    NoInput,
    #[error("drop mask covers {mask_streams}x{mask_columns} blocks, grid is {streams}x{columns}")]
    DropMaskShape {
        mask_streams: usize,
        mask_columns: usize,
        streams: usize,
        columns: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
