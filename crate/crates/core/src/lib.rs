//! Symmetric integer post-training quantization toolkit.
//!
//! - [`quantizer`]: scale factors, quantize/dequantize, per-channel and per-group grouping
//! - [`kernels`]: integer-core matmul with per-channel and per-group rescaling
//! - [`analyzer`]: per-layer max_abs, RMSE and outlier-wall profiling
//! - [`planner`]: mixed per-channel/per-group plans and group-size sweeps
//! - [`synth`]: seeded synthetic weights with injected outlier walls
//! - [`store`]: manifest + blob model container
//! - [`report`]: accuracy aggregation
//! - [`cli`]: the `quantkit` command line

pub mod analyzer;
pub mod cli;
pub mod error;
pub mod kernels;
pub mod planner;
pub mod quantizer;
pub mod report;
pub mod store;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use quantizer::{GroupingScheme, QuantParams, QuantizedTensor};
pub use store::{FpModel, LayerId, LayerKind, QuantizedModel};
pub use tensor::{Matrix64, Tensor};
