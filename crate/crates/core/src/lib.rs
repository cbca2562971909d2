//! INT4 weight-only quantization and a CPU inference runtime for
//! decoder-only transformers.

pub mod autotune;
pub mod bench;
pub mod error;
pub mod kernels;
pub mod kvcache;
pub mod modelio;
pub mod quant;
pub mod runtime;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Matrix;
