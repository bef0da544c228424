//! Codec plus the scalar latent scale used between codec and diffusion.

use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, LatentCodec, LatentVideo, PixelVideo};
use crate::error::{Error, Result};
use crate::numerics::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentSpaceConfig {
    pub codec: CodecConfig,
    /// Multiplies encoded latents; decoding divides by it.
    pub latent_scale: f64,
}

impl Default for LatentSpaceConfig {
    fn default() -> Self {
        Self {
            codec: CodecConfig::default(),
            latent_scale: 1.0 / 16.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatentSpace {
    pub codec: LatentCodec,
    pub scale: f64,
}

impl LatentSpace {
    pub fn new(cfg: &LatentSpaceConfig) -> Result<Self> {
        if !(cfg.latent_scale > 0.0 && cfg.latent_scale.is_finite()) {
            return Err(Error::Config {
                key: "latent.latent_scale".into(),
                detail: format!("must be positive, got {}", cfg.latent_scale),
            });
        }
        Ok(Self {
            codec: LatentCodec::new(cfg.codec.clone())?,
            scale: cfg.latent_scale,
        })
    }

    pub fn encode<T: Real>(&self, v: &PixelVideo) -> Result<LatentVideo<T>> {
        Ok(self.codec.encode::<T>(v)?.scale(self.scale))
    }

    pub fn decode<T: Real>(&self, z: &LatentVideo<T>, frame_rate: f32) -> Result<PixelVideo> {
        self.codec.decode(&z.scale(1.0 / self.scale), frame_rate)
    }

    /// One latent frame from a still image: frame `index` of `v` held for a
    /// full temporal stride.
    pub fn encode_still<T: Real>(&self, v: &PixelVideo, index: usize) -> Result<LatentVideo<T>> {
        let held = v.repeat_frame(index, self.codec.stride().t)?;
        self.encode(&held)
    }
}
