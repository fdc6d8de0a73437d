//! Reverse-mode differentiation, the layers built on it, and Adam.

mod adam;
pub mod gradcheck;
mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use layers::{
    cosine_sim, layer_norm, lstm_cell, wn_linear, LayerNormParams, LstmCell, WnLinear, WnWeight, COSINE_EPS,
    LAYER_NORM_EPS, LEAKY_SLOPE,
};
pub use params::{ParamId, ParamStore};
pub use tape::{BinaryOp, ConvGeom, Gradients, NodeGradients, Tape, UnaryOp, Var};
pub use tensor::Tensor;

pub(crate) use tape::{sim_row_features, softmax_into};
