//! Sliding-window generation with pixel-space context carry, plus the
//! drift diagnostic.

use serde::{Deserialize, Serialize};

use crate::audio::{extract_layers, AudioLayers, AudioTrack};
use crate::codec::{LatentVideo, PixelVideo};
use crate::dit::{LoraAdapter, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{DenseArray, ParamStore, Real, Rng};
use crate::pipeline::LatentSpace;
use crate::sampler::{build_schedule, sample, DitField, GuidanceConfig};
use crate::text::encode_text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowPlan {
    pub windows: usize,
    /// Frames generated per window `Tv`.
    pub video_frames: usize,
    /// Frames carried into the next window `Tc`.
    pub context_frames: usize,
    pub seed: u64,
}

impl Default for WindowPlan {
    fn default() -> Self {
        Self {
            windows: 4,
            video_frames: 16,
            context_frames: 12,
            seed: 0,
        }
    }
}

impl WindowPlan {
    pub fn paper() -> Self {
        Self {
            windows: 15,
            video_frames: 80,
            context_frames: 72,
            seed: 0,
        }
    }

    pub fn total_frames(&self) -> usize {
        self.windows * self.video_frames
    }

    pub fn duration_secs(&self, frame_rate: f32) -> f64 {
        self.total_frames() as f64 / frame_rate as f64
    }

    /// Seed of window `k`'s noise stream.
    pub fn window_seed(&self, k: usize) -> u64 {
        Rng::new(self.seed).derive_seed(k as u64)
    }

    pub fn validate(&self, stride_t: usize) -> Result<()> {
        let err = |key: &str, detail: String| {
            Err(Error::Config {
                key: format!("window.{key}"),
                detail,
            })
        };
        if self.windows == 0 {
            return err("windows", "need at least one window".into());
        }
        if self.video_frames == 0 || !self.video_frames.is_multiple_of(stride_t) {
            return err("video_frames", format!("{} must be a positive multiple of {stride_t}", self.video_frames));
        }
        if !self.context_frames.is_multiple_of(stride_t) {
            return err("context_frames", format!("{} must be a multiple of {stride_t}", self.context_frames));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub steps: usize,
    pub shift: f64,
    pub guidance: GuidanceConfig,
    pub max_text_tokens: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            shift: 5.0,
            guidance: GuidanceConfig::default(),
            max_text_tokens: 16,
        }
    }
}

/// Model weights plus the codec, borrowed for a generation job.
#[derive(Clone, Copy)]
pub struct Generator<'a, T> {
    pub params: &'a ParamStore<T>,
    pub adapter: Option<&'a LoraAdapter<T>>,
    pub model: &'a ModelConfig,
    pub space: &'a LatentSpace,
    pub config: &'a GenerationConfig,
}

/// Inputs of one window.
pub struct WindowInputs<'a, T> {
    /// Starting latent at `timesteps[0]`.
    pub start: LatentVideo<T>,
    pub timesteps: &'a [f64],
    pub text: &'a DenseArray<T>,
    pub audio: &'a AudioLayers,
    pub reference: &'a PixelVideo,
    /// Pixel context from earlier windows.
    pub context: Option<&'a PixelVideo>,
    pub frame_rate: f32,
}

impl<T: Real> Generator<'_, T> {
    /// Latent dims of `frames` output frames.
    pub fn latent_dims(&self, frames: usize, height: usize, width: usize) -> [usize; 4] {
        self.space.codec.latent_dims(frames, height, width)
    }

    pub fn text(&self, prompt: &str) -> DenseArray<T> {
        encode_text(prompt, self.model.text_dim, self.config.max_text_tokens)
    }

    /// Samples and decodes one window.
    pub fn window(&self, w: WindowInputs<'_, T>) -> Result<PixelVideo> {
        let reference = self.space.encode_still::<T>(w.reference, 0)?;
        let context = w.context.map(|c| self.space.encode::<T>(c)).transpose()?;
        let field = DitField {
            params: self.params,
            adapter: self.adapter,
            cfg: self.model,
            text: Some(w.text),
            audio: Some(w.audio),
            reference: Some(&reference),
            context: context.as_ref(),
        };
        let z = sample(w.start, w.timesteps, &field, &self.config.guidance)?;
        Ok(self.space.decode(&z, w.frame_rate)?.clamp_unit())
    }
}

/// Per-window record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowDiagnostics {
    pub window: usize,
    pub drift_similarity: f64,
    pub seed: u64,
    pub t_start: f64,
}

#[derive(Debug, Clone)]
pub struct LongVideo {
    pub video: PixelVideo,
    pub windows: Vec<PixelVideo>,
    /// Pixel context handed to each window (`None` for window 0).
    pub contexts: Vec<Option<PixelVideo>>,
    pub diagnostics: Vec<WindowDiagnostics>,
}

/// Reference frames used by each window: one shared image or per-window
/// overrides (missing entries fall back to the shared one).
#[derive(Debug, Clone)]
pub struct References {
    pub shared: PixelVideo,
    pub per_window: Vec<Option<PixelVideo>>,
}

impl References {
    pub fn shared(image: PixelVideo) -> Self {
        Self {
            shared: image,
            per_window: Vec::new(),
        }
    }

    pub fn for_window(&self, k: usize) -> &PixelVideo {
        self.per_window.get(k).and_then(Option::as_ref).unwrap_or(&self.shared)
    }
}

/// The last `n` frames of `parts` concatenated, or `None` for `n = 0`.
pub(crate) fn carried_context(parts: &[PixelVideo], n: usize) -> Result<Option<PixelVideo>> {
    if n == 0 || parts.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&PixelVideo> = parts.iter().collect();
    let all = PixelVideo::concat(&refs)?;
    let take = n.min(all.time());
    Ok(Some(all.slice_frames(all.time() - take, take)?))
}

/// Generates `plan.windows` windows. Window 0 has no context; window `k`
/// receives the last `Tc` generated frames, re-encoded.
pub fn generate_long<T: Real>(
    gen: &Generator<'_, T>,
    references: &References,
    audio: &AudioTrack,
    storyline: &str,
    plan: &WindowPlan,
    subject_mask: Option<&[bool]>,
) -> Result<LongVideo> {
    let stride = gen.space.codec.stride();
    plan.validate(stride.t)?;
    let shared = &references.shared;
    let frame_rate = shared.frame_rate;
    let available = audio.frames(frame_rate)?;
    let required = plan.total_frames();
    if available < required {
        return Err(Error::AudioTooShort { required, available });
    }
    let layers = extract_layers(audio, frame_rate, gen.model.audio.bands)?;
    let text = gen.text(storyline);
    let schedule = build_schedule(gen.config.steps, gen.config.shift)?;
    let ref_latent = gen.space.encode_still::<f64>(shared, 0)?;
    let neutral = neutral_latent(gen.space, shared.height(), shared.width())?;
    let dims = gen.latent_dims(plan.video_frames, shared.height(), shared.width());

    let mut windows = Vec::with_capacity(plan.windows);
    let mut contexts = Vec::with_capacity(plan.windows);
    let mut diagnostics = Vec::with_capacity(plan.windows);
    for k in 0..plan.windows {
        let seed = plan.window_seed(k);
        let start = LatentVideo::new(Rng::new(seed).normal_array(&dims, 1.0), stride)?;
        let context = carried_context(&windows, plan.context_frames)?;
        let audio_k = layers.slice_frames(k * plan.video_frames, plan.video_frames)?;
        let out = gen.window(WindowInputs {
            start,
            timesteps: &schedule.timesteps,
            text: &text,
            audio: &audio_k,
            reference: references.for_window(k),
            context: context.as_ref(),
            frame_rate,
        })?;
        let z = gen.space.encode::<f64>(&out)?;
        let sim = drift_similarity(&z, &ref_latent, &neutral, subject_mask);
        diagnostics.push(WindowDiagnostics {
            window: k,
            drift_similarity: sim.value,
            seed,
            t_start: schedule.timesteps[0],
        });
        log::info!("window {k}: drift similarity {:.4}", sim.value);
        contexts.push(context);
        windows.push(out);
    }
    let refs: Vec<&PixelVideo> = windows.iter().collect();
    Ok(LongVideo {
        video: PixelVideo::concat(&refs)?,
        windows,
        contexts,
        diagnostics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub value: f64,
    /// One descriptor was zero; the value was set to 0.
    pub degenerate: bool,
}

/// Per-channel mean over time and the masked latent cells.
pub fn latent_descriptor<T: Real>(z: &LatentVideo<T>, mask: Option<&[bool]>) -> Vec<f64> {
    let (lt, c, h, w) = (z.time(), z.channels(), z.height(), z.width());
    let mask = match mask {
        Some(m) if m.len() == h * w && m.iter().any(|&b| b) => Some(m),
        Some(_) => {
            log::warn!("subject mask unusable; drift over the full frame");
            None
        }
        None => None,
    };
    let data = z.grid.data();
    let mut out = vec![0.0; c];
    let mut count = 0usize;
    for t in 0..lt {
        for (ch, o) in out.iter_mut().enumerate() {
            for cell in 0..h * w {
                if mask.is_none_or(|m| m[cell]) {
                    *o += data[((t * c + ch) * h * w) + cell].as_f64();
                    if ch == 0 {
                        count += 1;
                    }
                }
            }
        }
    }
    let n = count.max(1) as f64;
    out.iter().map(|x| x / n).collect()
}

/// Latent of a mid-gray still at the given size. Descriptors are measured
/// relative to it so that overall brightness alone does not read as
/// resemblance.
pub fn neutral_latent(space: &LatentSpace, height: usize, width: usize) -> Result<LatentVideo<f64>> {
    let t = space.codec.stride().t;
    let gray = PixelVideo::new(DenseArray::full(&[t, 3, height, width], 0.5), 25.0)?;
    space.encode(&gray)
}

/// Cosine similarity of the subject descriptors of `window` and
/// `reference`, both taken relative to `neutral`.
pub fn drift_similarity<T: Real>(
    window: &LatentVideo<T>,
    reference: &LatentVideo<T>,
    neutral: &LatentVideo<T>,
    mask: Option<&[bool]>,
) -> Similarity {
    let base = latent_descriptor(neutral, mask);
    let centered = |z: &LatentVideo<T>| -> Vec<f64> {
        latent_descriptor(z, mask).iter().zip(&base).map(|(x, b)| x - b).collect()
    };
    let (a, b) = (centered(window), centered(reference));
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Similarity {
            value: 0.0,
            degenerate: true,
        };
    }
    Similarity {
        value: dot / (na * nb),
        degenerate: false,
    }
}

/// Similarity of each window against `reference` (a single still frame).
pub fn drift_curve(space: &LatentSpace, windows: &[PixelVideo], reference: &PixelVideo, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("drift curve needs at least one window".into()));
    }
    let r = space.encode_still::<f64>(reference, 0)?;
    let neutral = neutral_latent(space, reference.height(), reference.width())?;
    windows
        .iter()
        .map(|w| Ok(drift_similarity(&space.encode::<f64>(w)?, &r, &neutral, mask).value))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::LatentSpaceConfig;
    use crate::synth::{make_fixture, FixtureSpec};

    #[test]
    fn plan_arithmetic() {
        assert!((WindowPlan::default().duration_secs(25.0) - 2.56).abs() < 1e-12);
        assert!((WindowPlan::paper().duration_secs(25.0) - 48.0).abs() < 1e-12);
    }

    #[test]
    fn windows_get_distinct_reproducible_seeds() {
        let p = WindowPlan { seed: 7, ..Default::default() };
        let seeds: Vec<u64> = (0..6).map(|k| p.window_seed(k)).collect();
        for (i, a) in seeds.iter().enumerate() {
            assert!(seeds[i + 1..].iter().all(|b| b != a));
        }
        assert_eq!(seeds, (0..6).map(|k| p.window_seed(k)).collect::<Vec<_>>());
    }

    #[test]
    fn drift_of_reference_is_one_and_gray_is_flagged() {
        let space = LatentSpace::new(&LatentSpaceConfig::default()).unwrap();
        let fx = make_fixture(&FixtureSpec::default()).unwrap();
        let still = fx.video.repeat_frame(0, 8).unwrap();
        let curve = drift_curve(&space, std::slice::from_ref(&still), &fx.video.slice_frames(0, 1).unwrap(), None).unwrap();
        assert!((curve[0] - 1.0).abs() < 1e-12);
        let neutral = neutral_latent(&space, 64, 64).unwrap();
        let r = space.encode::<f64>(&still).unwrap();
        let s = drift_similarity(&neutral, &r, &neutral, None);
        assert!(s.degenerate && s.value == 0.0);
    }
}
