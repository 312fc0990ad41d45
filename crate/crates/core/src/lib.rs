//! Compression of convolution kernels by truncated 2D cosine and Chebyshev
//! series.
//!
//! Each `K x K` spatial filter of a weight tensor is treated as samples of a
//! continuous function on a fixed grid. That function is approximated by an
//! `N x N` series (`N <= K`), so a filter costs `N^2` coefficients instead of
//! `K^2` weights. The crate covers the whole pipeline: tensor I/O, basis
//! evaluation, fitting, reconstruction, reference convolution, block
//! floating-point quantization and whole-network parameter accounting.

pub mod arch;
pub mod basis;
mod bytes;
pub mod conv;
pub mod error;
pub mod fit;
pub mod model;
pub mod quant;
pub mod tensor;

pub use arch::{ArchDescriptor, HarmonicConfig, LayerSpec, ParamTotals, ReductionBase};
pub use basis::{BasisKind, DesignMatrix, SampleGrid};
pub use conv::{ConvSpec, OutputError};
pub use error::{Error, Result};
pub use fit::{CoeffTensor, FitConfig, FitMethod, FitReport, Init};
pub use model::{CompressedLayer, FilterError, ParamCounts};
pub use quant::{BfpConfig, Precision, QuantizedLayer};
pub use tensor::{AnyTensor, ElementWidth, Tensor3, Tensor4};
