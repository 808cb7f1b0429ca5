//! Data-free layer-wise mixed-precision quantization.
//!
//! A pretrained network is quantized pairwise: a low-bit layer (ternary at
//! 2 bits) followed by a high-bit layer whose input channels are rescaled by
//! closed-form coefficients that absorb the low-bit layer's error. No data
//! and no fine-tuning are involved.

pub mod compensation;
pub mod eval;
pub mod graph;
pub mod pipeline;
pub mod quant;
pub mod tensor;

pub use compensation::{
    apply_compensation, empirical_reconstruction_loss, objective_value,
    placement_equivalence_check, solve_coefficients, CompensationResult, LayerPair, Regularization,
};
pub use graph::{parse_graph, ModelGraph, TensorMap};
pub use tensor::{BatchNormParams, Tensor};
