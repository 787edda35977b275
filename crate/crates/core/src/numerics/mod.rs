//! Dense tensors, the layer catalog, reverse-mode differentiation and the
//! symmetric eigensolver used by PCA.

pub mod eigh;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod tape;
pub mod tensor;

pub use eigh::{eigh_psd, orthonormalize_columns, Eigen};
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradReport};
pub use layers::{apply_layer, Applied, BatchNormState, Layer, LayerKind, Mode};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{gemm, sign, DType, Scalar, Tensor, Trans};
