//! MobileOne: train-time over-parameterized blocks, their exact folding into
//! single-branch inference blocks, the published architecture zoo, desk-scale
//! training, and latency / correlation tooling.

pub mod arch;
pub mod bench;
pub mod block;
pub mod container;
pub mod error;
pub mod ops;
pub mod reparam;
pub mod tensor;
pub mod train;

pub use arch::{build_model, count_flops, count_params, variant_spec, ArchSpec, Layer, Model, ModelMode};
pub use block::{BlockActivation, BlockConfig, BlockKind, InitPolicy, Mode, TrainBlock, InferenceBlock};
pub use container::{load_model, save_model};
pub use error::{Error, Result};
pub use reparam::{reparameterize_block, reparameterize_model};
pub use tensor::{Scalar, Tensor4};
