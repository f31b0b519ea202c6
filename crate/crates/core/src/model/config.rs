use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
///
/// Defaults are the full-size 336-step model: four channel-time encoder
/// layers, one channel head, sixteen time heads, a 256-wide latent space,
/// a 512-wide feed-forward network, patch length 16 and stride 8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub model_dim: usize,
    pub channel_heads: usize,
    pub time_heads: usize,
    pub encoder_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub revin_eps: f64,
    pub layernorm_eps: f64,
    pub channel_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 336,
            horizon: 96,
            channels: 3,
            patch_len: 16,
            stride: 8,
            model_dim: 256,
            channel_heads: 1,
            time_heads: 16,
            encoder_layers: 4,
            ffn_dim: 512,
            dropout: 0.0,
            revin_eps: 1e-8,
            layernorm_eps: 1e-5,
            channel_attention: true,
        }
    }
}

impl ModelConfig {
    /// The 512-step look-back variant.
    pub fn long_lookback() -> Self {
        Self {
            lookback: 512,
            ..Self::default()
        }
    }

    /// Number of patches per channel, `floor((L - P) / S) + 2`.
    pub fn num_patches(&self) -> usize {
        num_patches(self.lookback, self.patch_len, self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.stride == 0 || self.patch_len == 0 {
            return fail("patch_len and stride must be at least 1".into());
        }
        if self.lookback < self.patch_len {
            return fail(format!(
                "lookback {} is shorter than patch_len {}",
                self.lookback, self.patch_len
            ));
        }
        if self.horizon == 0 || self.channels == 0 || self.encoder_layers == 0 || self.ffn_dim == 0 {
            return fail("horizon, channels, encoder_layers and ffn_dim must be positive".into());
        }
        for (name, heads) in [
            ("channel_heads", self.channel_heads),
            ("time_heads", self.time_heads),
        ] {
            if heads == 0 || !self.model_dim.is_multiple_of(heads) {
                return fail(format!(
                    "model_dim {} is not divisible by {name} {heads}",
                    self.model_dim
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.revin_eps > 0.0 && self.layernorm_eps > 0.0) {
            return fail("epsilons must be positive".into());
        }
        Ok(())
    }
}

/// Patch count for look-back `lookback`, patch length `patch_len` and
/// stride `stride`, counting the extra patch made possible by end padding.
pub fn num_patches(lookback: usize, patch_len: usize, stride: usize) -> usize {
    (lookback - patch_len) / stride + 2
}
