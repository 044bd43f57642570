//! Attention-convolution denoiser.

mod checkpoint;
mod config;
mod layers;
mod params;
mod unet;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use config::{clamp_groups, ArchVariant, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use layers::{AcBlock, ResBlock};
pub use unet::{cond_infuse, CondOutput, UNet};
