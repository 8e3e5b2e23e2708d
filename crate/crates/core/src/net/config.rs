use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frozen transformer core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoreConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
    pub core_channels: usize,
    pub patch_size: usize,
}

impl Default for CoreConfig {
    fn default() -> Self {
        CoreConfig {
            depth: 4,
            heads: 4,
            embed_dim: 64,
            mlp_ratio: 2,
            core_channels: 6,
            patch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub encoder_adapters: usize,
    pub decoder_adapters: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            encoder_adapters: 1,
            decoder_adapters: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Number of (transposed conv -> 3x3 conv -> batch norm) stages; each doubles resolution.
    pub upsampler_blocks: usize,
    pub bn_momentum: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            upsampler_blocks: 4,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub core: CoreConfig,
    pub adapters: AdapterConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.core;
        if c.depth == 0 {
            return Err(Error::Config("core depth must be >= 1".into()));
        }
        if c.heads == 0 || c.embed_dim % c.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                c.embed_dim, c.heads
            )));
        }
        if c.mlp_ratio == 0 || c.core_channels == 0 || c.patch_size == 0 {
            return Err(Error::Config("mlp_ratio, core_channels and patch_size must be positive".into()));
        }
        if self.adapters.encoder_adapters == 0 || self.adapters.decoder_adapters == 0 {
            return Err(Error::Config("at least one encoder and one decoder adapter required".into()));
        }
        let blocks = self.head.upsampler_blocks;
        if blocks >= usize::BITS as usize || 1usize << blocks != c.patch_size {
            return Err(Error::Config(format!(
                "2^upsampler_blocks ({blocks}) must equal patch_size {}",
                c.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.head.bn_momentum) {
            return Err(Error::Config("bn_momentum outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Output channels of upsampler stage `b`: `d / 2^(b+1)`, at least 1.
    pub fn upsampler_channels(&self, b: usize) -> usize {
        (self.core.embed_dim >> (b + 1)).max(1)
    }
}
