//! Deployment pipeline for tiny encoder-only Transformers on embedded FPGAs:
//! quantization-aware training, bit-exact integer inference, analytic
//! hardware cost models, VHDL generation and hardware-aware
//! multi-objective hyperparameter search.

pub mod codegen;
pub mod data;
pub mod hwmodel;
pub mod intrt;
pub mod model;
pub mod quant;
pub mod search;
pub mod tensor;
pub mod train;

pub use intrt::{export_int, int_forward, IntModel, IntTensor, OpTally};
pub use model::{count_parameters, Mode, ModelConfig, Task, TransformerModel};
pub use quant::{QuantParams, RequantPlan, Scheme};
pub use tensor::{Graph, Tensor, Var};
