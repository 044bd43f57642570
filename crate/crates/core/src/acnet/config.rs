use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{FEATURE_DIM};

/// Denoiser architecture variants used by the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchVariant {
    /// MLP, object attention with concat-skip, per-object temporal conv.
    Full,
    /// Whole scene as one feature vector; temporal conv only.
    CnnOnly,
    /// Attention and conv without the feature MLP.
    NoMlp,
}

impl ArchVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchVariant::Full => "full",
            ArchVariant::CnnOnly => "cnn_only",
            ArchVariant::NoMlp => "no_mlp",
        }
    }
}

impl std::str::FromStr for ArchVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "cnn_only" | "cnn-only" => Ok(Self::CnnOnly),
            "no_mlp" | "no-mlp" => Ok(Self::NoMlp),
            other => Err(Error::Usage(format!("unknown architecture variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Per-object feature width of the trajectory tensor.
    pub d_in: usize,
    /// Per-object feature width of the conditioning input.
    pub cond_in: usize,
    /// Channel width of each U-Net level, top to bottom.
    pub channels: Vec<usize>,
    pub heads: usize,
    /// Conv kernel half-width `k`; kernels have `2k + 1` taps.
    pub kernel_half: usize,
    pub blocks_per_level: usize,
    /// Number of leading down levels that receive soft conditioning.
    pub cond_levels: usize,
    pub arch: ArchVariant,
    /// Requested group-norm group count; clamped per layer to divide the width.
    pub groups: usize,
    /// Width of the sinusoidal diffusion-step embedding.
    pub time_dim: usize,
    /// Object count baked into a `cnn_only` model.
    #[serde(default)]
    pub cnn_objects: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: FEATURE_DIM,
            cond_in: FEATURE_DIM,
            channels: vec![32, 64, 128],
            heads: 4,
            kernel_half: 2,
            blocks_per_level: 1,
            cond_levels: 2,
            arch: ArchVariant::Full,
            groups: 2,
            time_dim: 64,
            cnn_objects: None,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            channels: vec![8, 16],
            heads: 2,
            kernel_half: 1,
            groups: 2,
            time_dim: 8,
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Required divisor of the trajectory length.
    pub fn stride(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn kernel_width(&self) -> usize {
        2 * self.kernel_half + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("channels must be non-empty and positive".into()));
        }
        if self.d_in == 0 || self.cond_in == 0 || self.blocks_per_level == 0 || self.heads == 0 {
            return Err(Error::Config("widths, heads and blocks per level must be positive".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time_dim {} must be even and >= 2", self.time_dim)));
        }
        for &c in &self.channels {
            if c % self.heads != 0 {
                return Err(Error::Config(format!("channel width {c} not divisible by {} heads", self.heads)));
            }
        }
        if self.cond_levels > self.levels() {
            return Err(Error::Config(format!(
                "cond_levels {} exceeds {} down levels",
                self.cond_levels,
                self.levels()
            )));
        }
        if self.arch == ArchVariant::CnnOnly && !matches!(self.cnn_objects, Some(n) if n > 0) {
            return Err(Error::Config("cnn_only needs a positive object count".into()));
        }
        Ok(())
    }
}

/// Largest group count `<= requested` that divides `width`.
pub fn clamp_groups(width: usize, requested: usize) -> usize {
    (1..=requested.max(1).min(width)).rev().find(|g| width % g == 0).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::default().stride(), 4);
    }

    #[test]
    fn heads_must_divide_channels() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn group_clamping() {
        assert_eq!(clamp_groups(32, 8), 8);
        assert_eq!(clamp_groups(12, 8), 6);
        assert_eq!(clamp_groups(6, 8), 6);
        assert_eq!(clamp_groups(7, 8), 7);
        assert_eq!(clamp_groups(1, 8), 1);
    }

    #[test]
    fn variant_names() {
        for v in [ArchVariant::Full, ArchVariant::CnnOnly, ArchVariant::NoMlp] {
            assert_eq!(v.as_str().parse::<ArchVariant>().unwrap(), v);
        }
        assert_eq!("cnn-only".parse::<ArchVariant>().unwrap(), ArchVariant::CnnOnly);
        assert!("gat".parse::<ArchVariant>().is_err());
    }
}
