//! Object-centric denoising diffusion for multi-object 2D physics trajectories.
//!
//! The crate is organised bottom-up:
//!
//! - [`ndgrad`]: dense tensors, a reverse-mode tape, Adam, and the binary
//!   tensor container used for checkpoints and datasets.
//! - [`schedule`]: cosine noise schedule, forward noising, v-parameterization
//!   and the Gaussian posterior step.
//! - [`acnet`]: attention-convolution blocks, the temporal U-Net and the two
//!   truncated conditioning networks.
//! - [`anchor`]: hard conditioning by piecewise-linear trajectory shifts and
//!   the two-term training loss.
//! - [`ballworld`]: the deterministic ball/bar simulator that produces
//!   ground-truth trajectories.
//! - [`pipeline`]: dataset generation, training, sampling and evaluation.

pub mod acnet;
pub mod anchor;
pub mod ballworld;
mod error;
pub mod ndgrad;
pub mod pipeline;
pub mod schedule;

pub use error::{Error, Result};

pub use acnet::{ArchVariant, ModelConfig, UNet};
pub use anchor::{Condition, ConditionSet};
pub use ndgrad::{Tape, Tensor, Var};
pub use schedule::{DenoiseMask, NoiseSchedule};

/// Number of features per object and trajectory step.
pub const FEATURE_DIM: usize = 8;
/// Number of changeable features (x, y, rotation) at the front of the layout.
pub const CHANGEABLE_DIM: usize = 3;
/// Version tag of the feature layout; bumped whenever the layout changes.
pub const FEATURE_LAYOUT_VERSION: u32 = 1;
