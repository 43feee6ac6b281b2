//! Dense `f64` tensors with tape-based reverse-mode differentiation, the
//! layer set of a small Siamese U-Net, batch norm with train /
//! deterministic / Monte Carlo inference modes, weighted cross-entropy and
//! Adam.

pub mod check;
pub mod error;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use check::finite_difference_check;
pub use error::{GradError, Result};
pub use ops::conv::{conv2d_forward, ConvGeom};
pub use ops::layout::{concat_channels, fold_batch, upsample2};
pub use ops::loss::{softmax_channels, weighted_cross_entropy};
pub use ops::norm::{batchnorm_forward, channel_stats, BatchNormState, NormMode};
pub use optim::{adam_step, AdamState};
pub use params::{he_uniform, ParameterSet};
pub use tape::{Gradients, NormStats, Tape, Var};
pub use tensor::Tensor;
