//! Convolutional slice generators.
//!
//! A convolutional layer's filter tensor is cut into fixed-shape slices
//! ([`slicer`]); every slice of every layer is produced by one shared linear
//! map from a short code vector ([`csg`]). The remaining modules size the
//! codes from DCT compressibility ([`dct`]), count the parameters such a
//! network needs ([`arch`]) and train small networks end to end ([`train`]).
//! Tensors and their on-disk container live in [`tensor`] and [`io`].

// `!(x > 0.0)` style checks are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod csg;
pub mod dct;
pub mod error;
pub mod io;
pub mod slicer;
pub mod tensor;
pub mod train;

pub use arch::{count_params, csg_budget, ArchSpec, CsgConfig, LayerSpec, ParamBudget};
pub use csg::{generate_filterset, generate_slice, init_csg, CodeVector, CsgEncoder, CsgMatrix};
pub use dct::{dct4, estimate_code_size, idct4, CodeSizeEstimate, EstimateConfig, PsnrReport};
pub use error::{Error, Result};
pub use io::Dtype;
pub use slicer::{make_grid, partition, reassemble, SliceGrid, SliceShape};
pub use tensor::{Matrix, Shape4, Tensor4};
pub use train::{Dataset, DatasetStats, LossCurve, Model, TrainConfig};
