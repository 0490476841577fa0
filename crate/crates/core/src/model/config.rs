use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pmsa::{check_heads, PoolingConfig, PoolingMode};

fn default_expansion() -> usize {
    2
}

/// Architecture of an MSPT network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of blocks `B`.
    pub blocks: usize,
    /// Channel width `F`.
    pub width: usize,
    /// Attention heads `H_a`.
    pub heads: usize,
    /// Patches per sample `K`.
    pub patches: usize,
    /// Supernodes per patch `Q`. Zero disables the global context.
    pub supernodes: usize,
    pub pooling: PoolingMode,
    #[serde(default = "default_expansion")]
    pub ffn_expansion: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Carry supernodes from block to block instead of re-pooling from
    /// scratch.
    #[serde(default)]
    pub persistent_supernodes: bool,
    /// Patch size `L`; required by linear pooling, whose weights are `L×Q`.
    #[serde(default)]
    pub patch_size: Option<usize>,
    /// Ball-tree leaf capacity; defaults to `L`.
    #[serde(default)]
    pub leaf_capacity: Option<usize>,
}

impl ModelConfig {
    pub fn pooling_config(&self) -> PoolingConfig {
        PoolingConfig::new(self.pooling, self.supernodes)
    }

    pub fn validate(&self) -> Result<()> {
        check_heads(self.width, self.heads)?;
        if self.blocks == 0 || self.patches == 0 {
            return Err(Error::config("blocks and patches must be at least 1"));
        }
        if self.ffn_expansion == 0 || self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::config("ffn_expansion, in_dim and out_dim must be positive"));
        }
        if self.pooling == PoolingMode::Linear && self.supernodes > 0 {
            match self.patch_size {
                Some(l) if l > 0 => {}
                _ => return Err(Error::config("linear pooling needs patch_size")),
            }
        }
        if let Some(l) = self.patch_size {
            self.pooling_config().validate(l)?;
        }
        Ok(())
    }

    /// Closed-form number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        let (f, h) = (self.width, self.width * self.ffn_expansion);
        let embed = self.in_dim * f + f + f * f + f;
        let pool = match (self.pooling, self.patch_size) {
            (PoolingMode::Linear, Some(l)) if self.supernodes > 0 => l * self.supernodes,
            _ => 0,
        };
        let block = 2 * f + 4 * f * f + pool + 2 * f + f * h + h + h * f + f;
        let head = 2 * f + f * self.out_dim + self.out_dim;
        embed + self.blocks * block + head
    }
}
