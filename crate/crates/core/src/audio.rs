//! Speech-feature stand-in and the per-latent audio token path.
//!
//! Raw audio is turned into `L = 3` feature "layers": band energies over
//! trailing windows of 1, 2 and 4 video frames. The learned part mixes the
//! layers with softmax weights, projects them to `audio_dim`, and runs a
//! causal strided 1-D convolution that emits `tokens_per_latent` tokens per
//! latent frame. Latent frame `t` sees only audio frames up to
//! `(t + 1) * stride_t - 1`.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{DenseArray, Graph, ParamStore, Real, Rng, Var};

/// Trailing window lengths (in video frames) of the three feature layers.
pub const LAYER_SCALES: [usize; 3] = [1, 2, 4];

/// Fixed input gain on band RMS values so speech-level audio (RMS around
/// 0.25) enters the projection at unit scale.
pub const FEATURE_GAIN: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioTrack {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn silent(frames: usize, frame_rate: f32, sample_rate: u32) -> Self {
        let spf = (sample_rate as f32 / frame_rate).round() as usize;
        Self::new(vec![0.0; frames * spf], sample_rate)
    }

    pub fn samples_per_frame(&self, frame_rate: f32) -> Result<usize> {
        samples_per_frame(self.sample_rate, frame_rate)
    }

    pub fn frames(&self, frame_rate: f32) -> Result<usize> {
        Ok(self.samples.len() / self.samples_per_frame(frame_rate)?)
    }

    /// Samples of video frames `[start, start+len)`.
    pub fn slice_frames(&self, start: usize, len: usize, frame_rate: f32) -> Result<Self> {
        let spf = self.samples_per_frame(frame_rate)?;
        let (a, b) = (start * spf, (start + len) * spf);
        if b > self.samples.len() {
            return Err(Error::AudioTooShort {
                required: start + len,
                available: self.samples.len() / spf,
            });
        }
        Ok(Self::new(self.samples[a..b].to_vec(), self.sample_rate))
    }

    /// Per-frame RMS energy.
    pub fn energy_envelope(&self, frame_rate: f32) -> Result<Vec<f64>> {
        let spf = self.samples_per_frame(frame_rate)?;
        Ok(self
            .samples
            .chunks_exact(spf)
            .map(|c| (c.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / spf as f64).sqrt())
            .collect())
    }

    pub fn reversed(&self) -> Self {
        let mut s = self.samples.clone();
        s.reverse();
        Self::new(s, self.sample_rate)
    }
}

pub fn samples_per_frame(sample_rate: u32, frame_rate: f32) -> Result<usize> {
    let ratio = sample_rate as f64 / frame_rate as f64;
    if !(frame_rate > 0.0) || ratio.fract() != 0.0 || ratio < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "{sample_rate} Hz / {frame_rate} fps is not an integer sample count per frame"
        )));
    }
    Ok(ratio as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioConfig {
    pub bands: usize,
    pub audio_dim: usize,
    pub tokens_per_latent: usize,
    /// Causal kernel length in video frames.
    pub kernel_frames: usize,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            bands: 8,
            audio_dim: 16,
            tokens_per_latent: 4,
            kernel_frames: 8,
        }
    }
}

/// Per-frame feature layers, each `frames × bands`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioLayers {
    pub layers: Vec<DenseArray<f32>>,
}

impl AudioLayers {
    pub fn frames(&self) -> usize {
        self.layers.first().map_or(0, |l| l.rows())
    }

    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            layers: self
                .layers
                .iter()
                .map(|l| l.slice_rows(start, len))
                .collect::<Result<_>>()?,
        })
    }
}

/// Band-energy features at the three trailing-window scales.
pub fn extract_layers(audio: &AudioTrack, frame_rate: f32, bands: usize) -> Result<AudioLayers> {
    let spf = audio.samples_per_frame(frame_rate)?;
    if bands == 0 {
        return Err(Error::InvalidArgument("bands must be positive".into()));
    }
    let frames = audio.samples.len() / spf;
    let mut planner = FftPlanner::<f64>::new();
    let mut layers = Vec::with_capacity(LAYER_SCALES.len());
    for &scale in &LAYER_SCALES {
        let n = scale * spf;
        let fft = planner.plan_fft_forward(n);
        let mut out = vec![0f32; frames * bands];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for f in 0..frames {
            let end = (f + 1) * spf;
            let start = end as isize - n as isize;
            let mut any = false;
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = start + i as isize;
                let x = if idx >= 0 { audio.samples[idx as usize] as f64 } else { 0.0 };
                any |= x != 0.0;
                *slot = Complex::new(x, 0.0);
            }
            if !any {
                continue;
            }
            fft.process(&mut buf);
            band_rms(&buf, bands, &mut out[f * bands..(f + 1) * bands]);
        }
        layers.push(DenseArray::new(vec![frames, bands], out)?);
    }
    Ok(AudioLayers { layers })
}

/// RMS amplitude per equal-width band over the positive half spectrum.
fn band_rms(spec: &[Complex<f64>], bands: usize, out: &mut [f32]) {
    let n = spec.len();
    let half = n / 2;
    for (b, o) in out.iter_mut().enumerate() {
        let lo = 1 + b * half / bands;
        let hi = 1 + (b + 1) * half / bands;
        let power: f64 = spec[lo.min(half)..hi.min(half + 1)]
            .iter()
            .map(|c| c.norm_sqr())
            .sum();
        *o = ((2.0 * power).sqrt() / n as f64) as f32;
    }
}

/// Names of the audio path parameters.
pub mod names {
    pub const LAYER_LOGITS: &str = "audio.layer_logits";
    pub const PROJ_W: &str = "audio.proj.w";
    pub const PROJ_B: &str = "audio.proj.b";
    pub const CONV_W: &str = "audio.conv.w";
    pub const CONV_B: &str = "audio.conv.b";
}

pub fn init_params<T: Real>(cfg: &AudioConfig, rng: &mut Rng, store: &mut ParamStore<T>) -> Result<()> {
    let a = cfg.audio_dim;
    let k = cfg.kernel_frames;
    let m = cfg.tokens_per_latent;
    store.insert(names::LAYER_LOGITS, DenseArray::zeros(&[1, LAYER_SCALES.len()]), false)?;
    store.insert(
        names::PROJ_W,
        rng.normal_array(&[cfg.bands, a], 1.0 / (cfg.bands as f64).sqrt()),
        false,
    )?;
    store.insert(names::PROJ_B, DenseArray::zeros(&[a]), false)?;
    store.insert(
        names::CONV_W,
        rng.normal_array(&[k * a, m * a], 1.0 / ((k * a) as f64).sqrt()),
        false,
    )?;
    store.insert(names::CONV_B, DenseArray::zeros(&[m * a]), false)?;
    Ok(())
}

/// Softmax-normalized layer weights.
pub fn layer_weights<T: Real>(params: &ParamStore<T>) -> Result<Vec<f64>> {
    let logits = params.require(names::LAYER_LOGITS)?;
    Ok(logits.softmax_rows()?.to_f64_vec())
}

/// Mixes, projects and causally compresses feature layers on the tape.
/// Returns `(frames / stride_t * tokens_per_latent) × audio_dim` tokens,
/// latent-frame major.
pub fn aggregate_and_compress<T: Real>(
    graph: &mut Graph<T>,
    layers: &AudioLayers,
    params: &ParamStore<T>,
    cfg: &AudioConfig,
    stride_t: usize,
) -> Result<Var> {
    let frames = layers.frames();
    if layers.layers.len() != LAYER_SCALES.len() {
        return Err(shape_err(
            "aggregate_and_compress",
            format!("expected {} layers, got {}", LAYER_SCALES.len(), layers.layers.len()),
        ));
    }
    for (i, l) in layers.layers.iter().enumerate() {
        if l.rows() != frames || l.cols() != cfg.bands {
            return Err(shape_err(
                "aggregate_and_compress",
                format!("layer {i} is {:?}, layer 0 has {frames} frames × {} bands", l.shape(), cfg.bands),
            ));
        }
    }
    if frames == 0 || !frames.is_multiple_of(stride_t) {
        return Err(shape_err(
            "aggregate_and_compress",
            format!("{frames} frames not divisible by stride {stride_t}"),
        ));
    }
    let latent_time = frames / stride_t;
    let a = cfg.audio_dim;
    let k = cfg.kernel_frames;

    let logits = graph.param(params, names::LAYER_LOGITS)?;
    let weights = graph.softmax_rows(logits)?;
    let mut mixed: Option<Var> = None;
    for (i, layer) in layers.layers.iter().enumerate() {
        let x = graph.constant(layer.cast::<T>().scale(T::from_f64(FEATURE_GAIN)));
        let w = graph.element(weights, i)?;
        let term = graph.mul_scalar(x, w)?;
        mixed = Some(match mixed {
            None => term,
            Some(acc) => graph.add(acc, term)?,
        });
    }
    let mixed = mixed.expect("three layers");
    let pw = graph.param(params, names::PROJ_W)?;
    let pb = graph.param(params, names::PROJ_B)?;
    let proj = graph.linear(mixed, pw, Some(pb))?;
    let proj = graph.silu(proj);

    // im2col: latent t takes frames (t+1)*stride - k ..= (t+1)*stride - 1.
    let mut index = Vec::with_capacity(latent_time * k);
    for t in 0..latent_time {
        let end = (t + 1) * stride_t;
        for j in 0..k {
            let f = end as isize - k as isize + j as isize;
            index.push(if f >= 0 { Some(f as usize) } else { None });
        }
    }
    let cols = graph.gather_rows(proj, index)?;
    let cols = graph.reshape(cols, &[latent_time, k * a])?;
    let cw = graph.param(params, names::CONV_W)?;
    let cb = graph.param(params, names::CONV_B)?;
    let out = graph.linear(cols, cw, Some(cb))?;
    graph.reshape(out, &[latent_time * cfg.tokens_per_latent, a])
}

/// Evaluated audio tokens, `latent_time × tokens_per_latent × audio_dim`.
#[derive(Debug, Clone)]
pub struct AudioTrackFeatures<T> {
    pub per_latent_tokens: DenseArray<T>,
    pub layer_weights: Vec<f64>,
}

impl<T: Real> AudioTrackFeatures<T> {
    pub fn compute(
        layers: &AudioLayers,
        params: &ParamStore<T>,
        cfg: &AudioConfig,
        stride_t: usize,
    ) -> Result<Self> {
        let mut g = Graph::new();
        let v = aggregate_and_compress(&mut g, layers, params, cfg, stride_t)?;
        let lt = layers.frames() / stride_t;
        Ok(Self {
            per_latent_tokens: g
                .value(v)
                .clone()
                .reshape(&[lt, cfg.tokens_per_latent, cfg.audio_dim])?,
            layer_weights: layer_weights(params)?,
        })
    }

    pub fn latent_time(&self) -> usize {
        self.per_latent_tokens.shape()[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(frames: usize, amp: f32) -> AudioTrack {
        let sr = 16_000;
        let n = frames * 640;
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f32::consts::PI * 500.0 * i as f32 / sr as f32).sin())
            .collect();
        AudioTrack::new(samples, sr)
    }

    #[test]
    fn samples_per_frame_at_defaults() {
        assert_eq!(samples_per_frame(16_000, 25.0).unwrap(), 640);
        assert!(samples_per_frame(16_000, 24.0).is_err());
    }

    #[test]
    fn one_second_gives_25_vectors_per_layer() {
        let layers = extract_layers(&tone(25, 0.5), 25.0, 8).unwrap();
        assert_eq!(layers.layers.len(), 3);
        for l in &layers.layers {
            assert_eq!(l.shape(), &[25, 8]);
        }
    }

    #[test]
    fn silence_gives_zero_energy() {
        let layers = extract_layers(&AudioTrack::silent(8, 25.0, 16_000), 25.0, 8).unwrap();
        for l in &layers.layers {
            assert!(l.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn tone_energy_lands_in_its_band() {
        let layers = extract_layers(&tone(4, 0.5), 25.0, 8).unwrap();
        let row = &layers.layers[0].data()[3 * 8..4 * 8];
        // 500 Hz sits in the first 1 kHz band; RMS of a 0.5 sine is 0.354.
        assert!((row[0] - 0.3536).abs() < 0.01, "{row:?}");
        assert!(row[1..].iter().all(|&x| x < 1e-3));
    }

    #[test]
    fn uniform_logits_give_uniform_weights() {
        let mut store = ParamStore::<f64>::new();
        init_params(&AudioConfig::default(), &mut Rng::new(0), &mut store).unwrap();
        let w = layer_weights(&store).unwrap();
        for x in w {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn token_shape_and_mismatch() {
        let cfg = AudioConfig::default();
        let mut store = ParamStore::<f64>::new();
        init_params(&cfg, &mut Rng::new(0), &mut store).unwrap();
        let layers = extract_layers(&tone(16, 0.5), 25.0, 8).unwrap();
        let f = AudioTrackFeatures::compute(&layers, &store, &cfg, 4).unwrap();
        assert_eq!(f.per_latent_tokens.shape(), &[4, 4, 16]);

        let mut bad = layers.clone();
        bad.layers[2] = bad.layers[2].slice_rows(0, 12).unwrap();
        assert!(AudioTrackFeatures::compute(&bad, &store, &cfg, 4).is_err());
        let short = layers.slice_frames(0, 10).unwrap();
        assert!(AudioTrackFeatures::compute(&short, &store, &cfg, 4).is_err());
    }

    #[test]
    fn later_audio_never_reaches_earlier_blocks() {
        let cfg = AudioConfig::default();
        let mut store = ParamStore::<f64>::new();
        init_params(&cfg, &mut Rng::new(1), &mut store).unwrap();
        let base = tone(16, 0.3);
        let mut perturbed = base.clone();
        for s in perturbed.samples[8 * 640..].iter_mut() {
            *s += 0.25;
        }
        let fa = AudioTrackFeatures::compute(&extract_layers(&base, 25.0, 8).unwrap(), &store, &cfg, 4).unwrap();
        let fb =
            AudioTrackFeatures::compute(&extract_layers(&perturbed, 25.0, 8).unwrap(), &store, &cfg, 4).unwrap();
        let block = 4 * 16;
        assert_eq!(fa.per_latent_tokens.data()[..2 * block], fb.per_latent_tokens.data()[..2 * block]);
        assert_ne!(fa.per_latent_tokens.data()[2 * block..], fb.per_latent_tokens.data()[2 * block..]);
    }
}
