//! Synthetic talking-figure fixtures and audio-visual sync metrics.
//!
//! A fixture is a flat background, a body ellipse, a head ellipse and a
//! dark mouth ellipse whose height follows `g · e(t)`, where `e` is the
//! per-frame energy envelope of the fixture's audio. Audio is a sum of a
//! few partials with a per-frame amplitude, so its frame RMS is
//! `e(t) / 2`.

use serde::{Deserialize, Serialize};

use crate::audio::{samples_per_frame, AudioTrack};
use crate::codec::{PixelVideo, Stride3};
use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Rng};

/// Palette entries: name and RGB.
const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.8, 0.2, 0.2]),
    ("green", [0.25, 0.7, 0.3]),
    ("blue", [0.2, 0.35, 0.8]),
    ("yellow", [0.85, 0.8, 0.25]),
    ("purple", [0.55, 0.3, 0.7]),
    ("orange", [0.9, 0.55, 0.2]),
    ("grey", [0.55, 0.55, 0.55]),
    ("teal", [0.2, 0.65, 0.65]),
];
const SKIN: [f32; 3] = [0.92, 0.78, 0.66];
const MOUTH: [f32; 3] = [0.12, 0.05, 0.05];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureSpec {
    pub frames: usize,
    pub frame_rate: f32,
    pub height: usize,
    pub width: usize,
    pub sample_rate: u32,
    /// Mouth aperture gain `g`.
    pub gain: f64,
    /// Horizontal sway amplitude in pixels.
    pub sway: f64,
    /// Audio lags the video by this many frames (negative: leads).
    pub audio_delay_frames: i64,
    /// Replace the audio by silence (the envelope becomes zero).
    pub silent: bool,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            frames: 48,
            frame_rate: 25.0,
            height: 64,
            width: 64,
            sample_rate: 16_000,
            gain: 1.0,
            sway: 0.5,
            audio_delay_frames: 0,
            silent: false,
            seed: 0,
        }
    }
}

/// Axis-aligned pixel box, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl PixelBox {
    pub fn contains_box(&self, o: &PixelBox) -> bool {
        self.top <= o.top && self.left <= o.left && self.bottom >= o.bottom && self.right >= o.right
    }

    /// Cells of a `cell_h × cell_w` grid that intersect the box, row-major.
    pub fn cell_mask(&self, cells_h: usize, cells_w: usize, cell_h: usize, cell_w: usize) -> Vec<bool> {
        let mut m = vec![false; cells_h * cells_w];
        for y in 0..cells_h {
            for x in 0..cells_w {
                let (t, l) = (y * cell_h, x * cell_w);
                m[y * cells_w + x] = t < self.bottom && t + cell_h > self.top && l < self.right && l + cell_w > self.left;
            }
        }
        m
    }

    pub fn pixel_mask(&self, height: usize, width: usize) -> Vec<bool> {
        let mut m = vec![false; height * width];
        for y in self.top..self.bottom.min(height) {
            for x in self.left..self.right.min(width) {
                m[y * width + x] = true;
            }
        }
        m
    }
}

/// Region masks at latent resolution, one `latent_h × latent_w` mask per
/// latent frame, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMasks {
    pub latent_h: usize,
    pub latent_w: usize,
    pub body: Vec<Vec<bool>>,
    pub face: Vec<Vec<bool>>,
}

impl RoiMasks {
    pub fn full(latent_t: usize, latent_h: usize, latent_w: usize) -> Self {
        let m = vec![vec![true; latent_h * latent_w]; latent_t];
        Self {
            latent_h,
            latent_w,
            body: m.clone(),
            face: m,
        }
    }

    pub fn latent_time(&self) -> usize {
        self.body.len()
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            latent_h: self.latent_h,
            latent_w: self.latent_w,
            body: self.body[start..start + len].to_vec(),
            face: self.face[start..start + len].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixtureRecord {
    pub spec: FixtureSpec,
    pub video: PixelVideo,
    pub audio: AudioTrack,
    /// Envelope driving the mouth, one value per video frame.
    pub envelope: Vec<f64>,
    /// Mouth aperture `min(g · e, 1)` per frame.
    pub aperture: Vec<f64>,
    pub head_box: PixelBox,
    pub body_box: PixelBox,
    pub caption: String,
}

impl FixtureRecord {
    /// Face and body masks at latent resolution for `stride`.
    pub fn roi_masks(&self, stride: Stride3) -> RoiMasks {
        let (lh, lw) = (self.spec.height / stride.h, self.spec.width / stride.w);
        let lt = self.spec.frames / stride.t;
        let face = self.head_box.cell_mask(lh, lw, stride.h, stride.w);
        let body_only = self.body_box.cell_mask(lh, lw, stride.h, stride.w);
        let body: Vec<bool> = face.iter().zip(&body_only).map(|(&a, &b)| a || b).collect();
        RoiMasks {
            latent_h: lh,
            latent_w: lw,
            body: vec![body; lt],
            face: vec![face; lt],
        }
    }

    /// Subject (head ∪ body) mask at latent resolution.
    pub fn subject_mask(&self, stride: Stride3) -> Vec<bool> {
        self.roi_masks(stride).body.first().cloned().unwrap_or_default()
    }

    pub fn head_pixel_mask(&self) -> Vec<bool> {
        self.head_box.pixel_mask(self.spec.height, self.spec.width)
    }
}

/// Random syllable-like bursts: raised-cosine bumps separated by pauses.
fn burst_envelope(frames: usize, rng: &mut Rng) -> Vec<f64> {
    let mut e = vec![0.0; frames];
    let mut f = rng.below(4);
    while f < frames {
        let len = 3 + rng.below(6);
        let amp = 0.4 + 0.6 * rng.uniform();
        for k in 0..len {
            if f + k >= frames {
                break;
            }
            let phase = (k as f64 + 0.5) / len as f64;
            e[f + k] = amp * (std::f64::consts::PI * phase).sin();
        }
        f += len + 1 + rng.below(6);
    }
    e
}

const REVERSAL_TARGET: f64 = 0.1;
const MAX_REDRAWS: usize = 256;
const REDRAW_STREAM: u64 = 0x7e5e;

fn reversal_correlation(video: &[f64], audio: &[f64]) -> f64 {
    let rev: Vec<f64> = audio.iter().rev().copied().collect();
    pearson(video, &rev).map_or(0.0, f64::abs)
}

fn check_spec(spec: &FixtureSpec) -> Result<()> {
    let bad = |d: String| Err(Error::InvalidArgument(format!("fixture: {d}")));
    if spec.height < 32 || spec.width < 32 || !spec.height.is_multiple_of(16) || !spec.width.is_multiple_of(16) {
        return bad(format!("resolution {}x{} must be multiples of 16, at least 32", spec.height, spec.width));
    }
    if spec.frames == 0 || !spec.frames.is_multiple_of(4) {
        return bad(format!("{} frames must be a positive multiple of 4", spec.frames));
    }
    samples_per_frame(spec.sample_rate, spec.frame_rate)?;
    Ok(())
}

/// Renders a fixture deterministically from its spec.
pub fn make_fixture(spec: &FixtureSpec) -> Result<FixtureRecord> {
    check_spec(spec)?;
    let mut rng = Rng::new(spec.seed);
    let (h, w, n) = (spec.height, spec.width, spec.frames);
    let bg_i = rng.below(COLORS.len());
    let shirt_i = (bg_i + 1 + rng.below(COLORS.len() - 1)) % COLORS.len();
    let (bg_name, bg) = COLORS[bg_i];
    let (shirt_name, shirt) = COLORS[shirt_i];

    let hf = h as f64;
    let wf = w as f64;
    // Close-up framing: the mouth sits at the centre of one 16-pixel cell
    // so its motion is not split across latent cells.
    let cx = 0.375 * wf + (rng.uniform() - 0.5) * 0.02 * wf;
    let head_r = (0.25 * hf, 0.2 * wf);
    let mouth_dy = 0.45 * head_r.0;
    let head_c = (0.625 * hf - mouth_dy, cx);
    let body_c = (1.05 * hf, cx);
    let body_r = (0.36 * hf, 0.32 * wf);
    let mouth_rx = 0.6 * head_r.1;
    let mouth_open = 0.4 * head_r.0;

    let pad = 16usize;
    let delay = spec.audio_delay_frames;
    if delay.unsigned_abs() as usize > pad {
        return Err(Error::InvalidArgument(format!("audio delay {delay} beyond ±{pad} frames")));
    }
    let split = |base: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let video = base[pad..pad + n].to_vec();
        let audio = (0..n).map(|f| base[(pad as i64 + f as i64 - delay) as usize]).collect();
        (video, audio)
    };
    let (envelope, audio_env) = if spec.silent {
        split(&vec![0.0; n + 2 * pad])
    } else {
        // Redraw until the mouth track is nearly uncorrelated with the
        // time-reversed audio, so reversed audio is a clean null probe.
        let mut best = split(&burst_envelope(n + 2 * pad, &mut rng));
        let mut best_r = reversal_correlation(&best.0, &best.1);
        let mut extra = Rng::new(spec.seed).fork(REDRAW_STREAM);
        for _ in 0..MAX_REDRAWS {
            if best_r < REVERSAL_TARGET {
                break;
            }
            let cand = split(&burst_envelope(n + 2 * pad, &mut extra));
            let r = reversal_correlation(&cand.0, &cand.1);
            if r < best_r {
                best = cand;
                best_r = r;
            }
        }
        best
    };
    let aperture: Vec<f64> = envelope.iter().map(|&e| (spec.gain * e).clamp(0.0, 1.0)).collect();

    let sway_phase = rng.uniform() * std::f64::consts::TAU;
    let sway_period = 40.0 + 20.0 * rng.uniform();
    let plane = h * w;
    let mut data = vec![0f32; n * 3 * plane];
    // 3×3 supersampling keeps region means smooth in the aperture.
    const SS: usize = 3;
    for f in 0..n {
        let dx = spec.sway * (std::f64::consts::TAU * f as f64 / sway_period + sway_phase).sin();
        let mouth_ry = 0.06 * head_r.0 + mouth_open * aperture[f];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0f32; 3];
                for sy in 0..SS {
                    for sx in 0..SS {
                        let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                        let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                        let inside = |c: (f64, f64), r: (f64, f64)| {
                            let u = (py - c.0) / r.0;
                            let v = (px - c.1 - dx) / r.1;
                            u * u + v * v <= 1.0
                        };
                        let col = if inside((head_c.0 + mouth_dy, head_c.1), (mouth_ry, mouth_rx)) {
                            MOUTH
                        } else if inside(head_c, head_r) {
                            SKIN
                        } else if inside(body_c, body_r) {
                            shirt
                        } else {
                            bg
                        };
                        for c in 0..3 {
                            acc[c] += col[c];
                        }
                    }
                }
                for c in 0..3 {
                    data[(f * 3 + c) * plane + y * w + x] = acc[c] / (SS * SS) as f32;
                }
            }
        }
    }
    let video = PixelVideo::new(DenseArray::new(vec![n, 3, h, w], data)?, spec.frame_rate)?;

    let spf = samples_per_frame(spec.sample_rate, spec.frame_rate)?;
    // Whole cycles per frame keep frame RMS exactly proportional to the
    // envelope.
    let pitch = spec.frame_rate as f64 * (6 + rng.below(5)) as f64;
    let partials = [(1.0, 1.0), (2.0, 0.5), (3.0, 0.3)];
    let norm = partials.iter().map(|(_, a)| a * a).sum::<f64>().sqrt();
    let sr = spec.sample_rate as f64;
    let mut samples = Vec::with_capacity(n * spf);
    for (f, &amp) in audio_env.iter().enumerate() {
        for i in 0..spf {
            let t = (f * spf + i) as f64 / sr;
            let s: f64 = partials
                .iter()
                .map(|&(k, a)| a * (std::f64::consts::TAU * k * pitch * t).sin())
                .sum();
            samples.push((amp * s / norm * std::f64::consts::SQRT_2 * 0.5) as f32);
        }
    }
    let audio = AudioTrack::new(samples, spec.sample_rate);

    let bbox = |c: (f64, f64), r: (f64, f64), extra: f64| PixelBox {
        top: (c.0 - r.0).floor().max(0.0) as usize,
        left: (c.1 - r.1 - extra).floor().max(0.0) as usize,
        bottom: ((c.0 + r.0).ceil() as usize).min(h),
        right: ((c.1 + r.1 + extra).ceil() as usize).min(w),
    };
    let head_box = bbox(head_c, head_r, spec.sway.abs());
    let body_raw = bbox(body_c, body_r, spec.sway.abs());
    let body_box = PixelBox {
        top: body_raw.top.min(head_box.top),
        left: body_raw.left.min(head_box.left),
        bottom: body_raw.bottom.max(head_box.bottom),
        right: body_raw.right.max(head_box.right),
    };
    let caption = format!("a person in a {shirt_name} shirt talking in front of a {bg_name} wall");
    Ok(FixtureRecord {
        spec: spec.clone(),
        video,
        audio,
        envelope,
        aperture,
        head_box,
        body_box,
        caption,
    })
}

/// `count` fixtures with seeds `seed, seed + 1, …`.
pub fn fixture_set(base: &FixtureSpec, count: usize) -> Result<Vec<FixtureRecord>> {
    (0..count)
        .map(|i| {
            make_fixture(&FixtureSpec {
                seed: base.seed.wrapping_add(i as u64),
                ..base.clone()
            })
        })
        .collect()
}

/// Per-frame mean intensity over `mask`, all colour planes.
pub fn region_intensity(video: &PixelVideo, mask: &[bool]) -> Result<Vec<f64>> {
    let plane = video.height() * video.width();
    if mask.len() != plane {
        return Err(Error::InvalidArgument(format!("mask has {} pixels, frame has {plane}", mask.len())));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::InvalidArgument("empty region mask".into()));
    }
    let d = video.frames.data();
    Ok((0..video.time())
        .map(|f| {
            let mut s = 0.0;
            for c in 0..3 {
                let p = &d[(f * 3 + c) * plane..(f * 3 + c + 1) * plane];
                s += p.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v as f64).sum::<f64>();
            }
            s / (3 * count) as f64
        })
        .collect())
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let (a, b) = (&a[..n], &b[..n]);
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let den = (saa * sbb).sqrt();
    if den <= 1e-12 * n as f64 || saa <= 1e-18 || sbb <= 1e-18 {
        None
    } else {
        Some((sab / den).clamp(-1.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncScore {
    pub correlation: f64,
    /// Set when either signal was constant; `correlation` is then 0.
    pub degenerate: bool,
}

fn mouth_signal(video: &PixelVideo, audio: &AudioTrack, head_mask: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    let env = audio.energy_envelope(video.frame_rate)?;
    if env.len() != video.time() {
        return Err(Error::InvalidArgument(format!(
            "audio covers {} frames, video has {}",
            env.len(),
            video.time()
        )));
    }
    // An opening mouth darkens the head region.
    let m: Vec<f64> = region_intensity(video, head_mask)?.into_iter().map(|v| -v).collect();
    Ok((m, env))
}

/// Correlation between head-region darkening and audio frame energy.
pub fn sync_correlation(video: &PixelVideo, audio: &AudioTrack, head_mask: &[bool]) -> Result<SyncScore> {
    let (m, env) = mouth_signal(video, audio, head_mask)?;
    Ok(match pearson(&m, &env) {
        Some(r) => SyncScore {
            correlation: r,
            degenerate: false,
        },
        None => SyncScore {
            correlation: 0.0,
            degenerate: true,
        },
    })
}

/// Offset confidence below this reads as no reliable sync.
pub const SYNC_CONFIDENCE_GATE: f64 = 1.6;

#[derive(Debug, Clone, PartialEq)]
pub struct SyncOffset {
    /// Positive when the audio lags the video.
    pub offset: i64,
    pub confidence: f64,
    /// Correlation at each offset from `-max_offset` to `max_offset`.
    pub curve: Vec<f64>,
}

/// Offset maximizing the correlation of `video[f]` with `audio[f + d]` over
/// the overlap; confidence is the peak minus the mean off-peak value.
pub fn sync_offset(video: &PixelVideo, audio: &AudioTrack, head_mask: &[bool], max_offset: usize) -> Result<SyncOffset> {
    if video.time() <= 2 * max_offset {
        return Err(Error::InvalidArgument(format!(
            "{} frames too short for offsets up to ±{max_offset}",
            video.time()
        )));
    }
    let (m, env) = mouth_signal(video, audio, head_mask)?;
    let n = m.len() as i64;
    let k = max_offset as i64;
    let curve: Vec<f64> = (-k..=k)
        .map(|d| {
            let lo = 0.max(-d);
            let hi = n.min(n - d);
            let a: Vec<f64> = (lo..hi).map(|f| m[f as usize]).collect();
            let b: Vec<f64> = (lo..hi).map(|f| env[(f + d) as usize]).collect();
            pearson(&a, &b).unwrap_or(0.0)
        })
        .collect();
    let (peak_i, &peak) = curve
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let off: Vec<f64> = curve
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != peak_i)
        .map(|(_, &c)| c)
        .collect();
    let mean_off = if off.is_empty() { 0.0 } else { off.iter().sum::<f64>() / off.len() as f64 };
    Ok(SyncOffset {
        offset: peak_i as i64 - k,
        confidence: peak - mean_off,
        curve,
    })
}
