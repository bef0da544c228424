//! Video-to-video dubbing: encode, partially noise, denoise from `α`.

use serde::{Deserialize, Serialize};

use crate::audio::{extract_layers, AudioTrack};
use crate::codec::{LatentVideo, PixelVideo};
use crate::error::{Error, Result};
use crate::longvideo::{carried_context, Generator, WindowInputs};
use crate::numerics::{Real, Rng};
use crate::sampler::build_schedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DubbingConfig {
    /// Noise strength; denoising starts at the largest timestep `≤ alpha`.
    pub alpha: f64,
    /// Frames per segment; the final segment may be shorter.
    pub segment_frames: usize,
    /// Output frames carried into the next segment.
    pub context_frames: usize,
    pub seed: u64,
}

impl Default for DubbingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            segment_frames: 16,
            context_frames: 12,
            seed: 0,
        }
    }
}

impl DubbingConfig {
    pub fn validate(&self, stride_t: usize) -> Result<()> {
        let err = |key: &str, detail: String| {
            Err(Error::Config {
                key: format!("dub.{key}"),
                detail,
            })
        };
        if !(0.0..=1.0).contains(&self.alpha) {
            return err("alpha", format!("{} outside [0, 1]", self.alpha));
        }
        if self.segment_frames == 0 || !self.segment_frames.is_multiple_of(stride_t) {
            return err("segment_frames", format!("{} must be a positive multiple of {stride_t}", self.segment_frames));
        }
        if !self.context_frames.is_multiple_of(stride_t) {
            return err("context_frames", format!("{} must be a multiple of {stride_t}", self.context_frames));
        }
        Ok(())
    }
}

/// `(1 − α)·z0 + α·ε` with `ε` drawn from `rng`.
pub fn noise_inject<T: Real>(z0: &LatentVideo<T>, alpha: f64, rng: &mut Rng) -> Result<LatentVideo<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let eps = rng.normal_array::<T>(z0.grid.shape(), 1.0);
    let (a, keep) = (T::from_f64(alpha), T::from_f64(1.0 - alpha));
    let grid = z0.grid.zip_map(&eps, "noise_inject", |z, e| keep * z + a * e)?;
    LatentVideo::new(grid, z0.stride)
}

/// Per-segment record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentDiagnostics {
    pub segment: usize,
    pub start: usize,
    pub frames: usize,
    pub reference_frame: Option<usize>,
    pub t_start: f64,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Dubbed {
    pub video: PixelVideo,
    pub segments: Vec<SegmentDiagnostics>,
}

/// `(start, len)` of each segment.
pub fn segment_bounds(frames: usize, segment_frames: usize) -> Vec<(usize, usize)> {
    (0..frames)
        .step_by(segment_frames.max(1))
        .map(|s| (s, segment_frames.min(frames - s)))
        .collect()
}

/// Re-synthesizes `input` to follow `audio`. Each segment takes its
/// reference from one of its own frames, chosen by a seeded draw, unless
/// `reference` overrides it.
pub fn dub<T: Real>(
    gen: &Generator<'_, T>,
    input: &PixelVideo,
    audio: &AudioTrack,
    prompt: &str,
    cfg: &DubbingConfig,
    reference: Option<&PixelVideo>,
) -> Result<Dubbed> {
    let stride = gen.space.codec.stride();
    cfg.validate(stride.t)?;
    gen.space.codec.check_pixels(input)?;
    let frame_rate = input.frame_rate;
    let available = audio.frames(frame_rate)?;
    if available < input.time() {
        return Err(Error::AudioTooShort {
            required: input.time(),
            available,
        });
    }
    let layers = extract_layers(audio, frame_rate, gen.model.audio.bands)?;
    let text = gen.text(prompt);
    let timesteps = build_schedule(gen.config.steps, gen.config.shift)?.truncate(cfg.alpha)?;
    if timesteps.is_empty() {
        return Err(Error::Sampling("alpha below smallest timestep".into()));
    }

    let root = Rng::new(cfg.seed);
    let mut outputs: Vec<PixelVideo> = Vec::new();
    let mut segments = Vec::new();
    for (k, (start, len)) in segment_bounds(input.time(), cfg.segment_frames).into_iter().enumerate() {
        let seg = input.slice_frames(start, len)?;
        let noise_seed = root.derive_seed(2 * k as u64);
        let mut noise_rng = Rng::new(noise_seed);
        let mut ref_rng = root.fork(2 * k as u64 + 1);
        let (reference_frame, ref_img) = match reference {
            Some(r) => (None, r.clone()),
            None => {
                let i = ref_rng.below(len);
                (Some(start + i), seg.slice_frames(i, 1)?)
            }
        };
        let z0 = gen.space.encode::<T>(&seg)?;
        let start_latent = noise_inject(&z0, cfg.alpha, &mut noise_rng)?;
        let context = carried_context(&outputs, cfg.context_frames)?;
        let audio_k = layers.slice_frames(start, len)?;
        let out = gen.window(WindowInputs {
            start: start_latent,
            timesteps: &timesteps,
            text: &text,
            audio: &audio_k,
            reference: &ref_img,
            context: context.as_ref(),
            frame_rate,
        })?;
        segments.push(SegmentDiagnostics {
            segment: k,
            start,
            frames: len,
            reference_frame,
            t_start: timesteps[0],
            steps: timesteps.len() - 1,
            seed: noise_seed,
        });
        outputs.push(out);
    }
    let refs: Vec<&PixelVideo> = outputs.iter().collect();
    Ok(Dubbed {
        video: PixelVideo::concat(&refs)?,
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Stride3;
    use crate::numerics::DenseArray;

    fn latent(v: f32) -> LatentVideo<f32> {
        LatentVideo::new(DenseArray::full(&[2, 3, 2, 2], v), Stride3::new(4, 16, 16)).unwrap()
    }

    #[test]
    fn endpoints_and_default() {
        let z = latent(0.7);
        assert_eq!(noise_inject(&z, 0.0, &mut Rng::new(1)).unwrap(), z);
        let eps = Rng::new(1).normal_array::<f32>(&[2, 3, 2, 2], 1.0);
        assert_eq!(noise_inject(&z, 1.0, &mut Rng::new(1)).unwrap().grid, eps);
        let half = noise_inject(&latent(0.0), 0.95, &mut Rng::new(1)).unwrap();
        for (h, e) in half.grid.data().iter().zip(eps.data()) {
            assert_eq!(*h, 0.95f32 * e);
        }
        assert!(noise_inject(&z, 1.2, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn segments_cover_the_input() {
        assert_eq!(segment_bounds(40, 16), vec![(0, 16), (16, 16), (32, 8)]);
        assert_eq!(segment_bounds(16, 16), vec![(0, 16)]);
    }
}
