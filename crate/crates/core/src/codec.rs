//! Deterministic linear stand-in for the video autoencoder.
//!
//! Each `(3 × st × sh × sw)` pixel block maps to `latent_channels`
//! coefficients of a separable orthonormal basis. The per-axis bases are
//! built by classical Gram–Schmidt over the sequence `[constant vector,
//! seeded Gaussian draws...]`, so the first row of every axis basis is the
//! normalized mean. Separable basis vectors `(a, b, p, q)` (channel, time,
//! height, width) are kept in ascending order of the key
//! `(p + q, p, b, a)`; the codec retains the first `latent_channels` of
//! them. With the default stride the first twelve are the per-frame,
//! per-colour block means.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{DenseArray, ParamStore, Real, Rng};

pub const PIXEL_CHANNELS: usize = 3;

/// `(t, h, w)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stride3 {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Stride3 {
    pub const fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub stride: Stride3,
    pub latent_channels: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            stride: Stride3::new(4, 16, 16),
            latent_channels: 16,
            seed: 0x5eed_c0de,
        }
    }
}

/// Pixel video, `time × 3 × height × width`, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelVideo {
    pub frames: DenseArray<f32>,
    pub frame_rate: f32,
}

impl PixelVideo {
    pub fn new(frames: DenseArray<f32>, frame_rate: f32) -> Result<Self> {
        if frames.shape().len() != 4 || frames.shape()[1] != PIXEL_CHANNELS {
            return Err(shape_err(
                "PixelVideo",
                format!("expected T×3×H×W, got {:?}", frames.shape()),
            ));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn zeros(time: usize, height: usize, width: usize, frame_rate: f32) -> Self {
        Self {
            frames: DenseArray::zeros(&[time, PIXEL_CHANNELS, height, width]),
            frame_rate,
        }
    }

    pub fn time(&self) -> usize {
        self.frames.shape()[0]
    }
    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }
    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn frame_len(&self) -> usize {
        PIXEL_CHANNELS * self.height() * self.width()
    }

    /// Frames `[start, start+len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.time() {
            return Err(shape_err(
                "slice_frames",
                format!("frames {start}..{} of {}", start + len, self.time()),
            ));
        }
        let fl = self.frame_len();
        let data = self.frames.data()[start * fl..(start + len) * fl].to_vec();
        Ok(Self {
            frames: DenseArray::new(vec![len, PIXEL_CHANNELS, self.height(), self.width()], data)?,
            frame_rate: self.frame_rate,
        })
    }

    /// A single frame repeated `n` times.
    pub fn repeat_frame(&self, index: usize, n: usize) -> Result<Self> {
        let one = self.slice_frames(index, 1)?;
        let mut data = Vec::with_capacity(n * self.frame_len());
        for _ in 0..n {
            data.extend_from_slice(one.frames.data());
        }
        Ok(Self {
            frames: DenseArray::new(vec![n, PIXEL_CHANNELS, self.height(), self.width()], data)?,
            frame_rate: self.frame_rate,
        })
    }

    pub fn concat(parts: &[&PixelVideo]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero videos".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::new();
        let mut t = 0;
        for p in parts {
            if p.height() != h || p.width() != w {
                return Err(shape_err("concat", "frame size mismatch"));
            }
            t += p.time();
            data.extend_from_slice(p.frames.data());
        }
        Ok(Self {
            frames: DenseArray::new(vec![t, PIXEL_CHANNELS, h, w], data)?,
            frame_rate: first.frame_rate,
        })
    }

    pub fn clamp_unit(&self) -> Self {
        Self {
            frames: self.frames.map(|x| x.clamp(0.0, 1.0)),
            frame_rate: self.frame_rate,
        }
    }
}

/// Latent grid `latent_time × channels × latent_height × latent_width`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo<T> {
    pub grid: DenseArray<T>,
    pub stride: Stride3,
}

impl<T: Real> LatentVideo<T> {
    pub fn new(grid: DenseArray<T>, stride: Stride3) -> Result<Self> {
        if grid.shape().len() != 4 {
            return Err(shape_err(
                "LatentVideo",
                format!("expected 4 axes, got {:?}", grid.shape()),
            ));
        }
        Ok(Self { grid, stride })
    }

    pub fn zeros(dims: [usize; 4], stride: Stride3) -> Self {
        Self {
            grid: DenseArray::zeros(&dims),
            stride,
        }
    }

    pub fn time(&self) -> usize {
        self.grid.shape()[0]
    }
    pub fn channels(&self) -> usize {
        self.grid.shape()[1]
    }
    pub fn height(&self) -> usize {
        self.grid.shape()[2]
    }
    pub fn width(&self) -> usize {
        self.grid.shape()[3]
    }

    pub fn frame_len(&self) -> usize {
        self.channels() * self.height() * self.width()
    }

    pub fn slice_time(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.time() {
            return Err(shape_err(
                "slice_time",
                format!("latents {start}..{} of {}", start + len, self.time()),
            ));
        }
        let fl = self.frame_len();
        Ok(Self {
            grid: DenseArray::new(
                vec![len, self.channels(), self.height(), self.width()],
                self.grid.data()[start * fl..(start + len) * fl].to_vec(),
            )?,
            stride: self.stride,
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            grid: self.grid.scale(T::from_f64(c)),
            stride: self.stride,
        }
    }

    pub fn cast<U: Real>(&self) -> LatentVideo<U> {
        LatentVideo {
            grid: self.grid.cast(),
            stride: self.stride,
        }
    }
}

/// Separable orthonormal patch codec.
#[derive(Debug, Clone)]
pub struct LatentCodec {
    config: CodecConfig,
    /// Row-major orthonormal matrices for channel, time, height, width.
    axes: [Vec<f64>; 4],
    /// Retained basis indices `(a, b, p, q)`, in latent-channel order.
    order: Vec<[usize; 4]>,
}

fn axis_basis(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut candidate = vec![1.0; n];
    loop {
        for r in &rows {
            let dot: f64 = r.iter().zip(&candidate).map(|(a, b)| a * b).sum();
            for (c, &x) in candidate.iter_mut().zip(r) {
                *c -= dot * x;
            }
        }
        let norm = candidate.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            rows.push(candidate.iter().map(|x| x / norm).collect());
        }
        if rows.len() == n {
            break;
        }
        candidate = (0..n).map(|_| rng.normal()).collect();
    }
    rows.concat()
}

fn retained_order(stride: Stride3, count: usize) -> Vec<[usize; 4]> {
    let mut all = Vec::with_capacity(PIXEL_CHANNELS * stride.volume());
    for a in 0..PIXEL_CHANNELS {
        for b in 0..stride.t {
            for p in 0..stride.h {
                for q in 0..stride.w {
                    all.push([a, b, p, q]);
                }
            }
        }
    }
    all.sort_by_key(|&[a, b, p, q]| (p + q, p, b, a));
    all.truncate(count);
    all
}

impl LatentCodec {
    pub fn new(config: CodecConfig) -> Result<Self> {
        let s = config.stride;
        if s.t == 0 || s.h == 0 || s.w == 0 {
            return Err(Error::Config {
                key: "codec.stride".into(),
                detail: "stride components must be positive".into(),
            });
        }
        let full = PIXEL_CHANNELS * s.volume();
        if config.latent_channels == 0 || config.latent_channels > full {
            return Err(Error::Config {
                key: "codec.latent_channels".into(),
                detail: format!("must be in 1..={full}"),
            });
        }
        let mut rng = Rng::new(config.seed);
        let axes = [
            axis_basis(PIXEL_CHANNELS, &mut rng),
            axis_basis(s.t, &mut rng),
            axis_basis(s.h, &mut rng),
            axis_basis(s.w, &mut rng),
        ];
        let order = retained_order(s, config.latent_channels);
        Ok(Self {
            config,
            axes,
            order,
        })
    }

    /// Rebuilds a codec from persisted axis bases.
    pub fn from_parts(config: CodecConfig, axes: [Vec<f64>; 4]) -> Result<Self> {
        let s = config.stride;
        let dims = [PIXEL_CHANNELS, s.t, s.h, s.w];
        for (m, n) in axes.iter().zip(dims) {
            if m.len() != n * n {
                return Err(shape_err("codec basis", format!("axis of {} values, want {}", m.len(), n * n)));
            }
        }
        let order = retained_order(s, config.latent_channels);
        Ok(Self {
            config,
            axes,
            order,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn stride(&self) -> Stride3 {
        self.config.stride
    }

    pub fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    pub fn axes(&self) -> &[Vec<f64>; 4] {
        &self.axes
    }

    /// Stores the axis bases as frozen `codec.basis.*` entries.
    pub fn export_basis<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let s = self.config.stride;
        let names = ["channel", "time", "height", "width"];
        let dims = [PIXEL_CHANNELS, s.t, s.h, s.w];
        for ((name, n), m) in names.iter().zip(dims).zip(&self.axes) {
            store.insert(
                format!("codec.basis.{name}"),
                DenseArray::from_f64_slice(&[n, n], m)?,
                true,
            )?;
        }
        Ok(())
    }

    pub fn import_basis<T: Real>(config: CodecConfig, store: &ParamStore<T>) -> Result<Self> {
        let get = |n: &str| -> Result<Vec<f64>> {
            Ok(store.require(&format!("codec.basis.{n}"))?.to_f64_vec())
        };
        Self::from_parts(
            config,
            [get("channel")?, get("time")?, get("height")?, get("width")?],
        )
    }

    pub fn check_pixels(&self, v: &PixelVideo) -> Result<()> {
        let s = self.config.stride;
        for (axis, len, st) in [
            ("time", v.time(), s.t),
            ("height", v.height(), s.h),
            ("width", v.width(), s.w),
        ] {
            if len == 0 || len % st != 0 {
                return Err(shape_err(
                    "encode",
                    format!("{axis} {len} not divisible by stride {st}"),
                ));
            }
        }
        Ok(())
    }

    pub fn latent_dims(&self, time: usize, height: usize, width: usize) -> [usize; 4] {
        let s = self.config.stride;
        [time / s.t, self.config.latent_channels, height / s.h, width / s.w]
    }

    pub fn encode<T: Real>(&self, v: &PixelVideo) -> Result<LatentVideo<T>> {
        self.check_pixels(v)?;
        let s = self.config.stride;
        let dims = self.latent_dims(v.time(), v.height(), v.width());
        let [lt, lc, lh, lw] = dims;
        let (h, w) = (v.height(), v.width());
        let px = v.frames.data();
        let mut out = vec![T::zero(); lt * lc * lh * lw];
        let mut block = vec![0.0f64; PIXEL_CHANNELS * s.volume()];
        for bt in 0..lt {
            for bh in 0..lh {
                for bw in 0..lw {
                    for c in 0..PIXEL_CHANNELS {
                        for t in 0..s.t {
                            for y in 0..s.h {
                                for x in 0..s.w {
                                    let fi = bt * s.t + t;
                                    let src = ((fi * PIXEL_CHANNELS + c) * h + bh * s.h + y) * w
                                        + bw * s.w
                                        + x;
                                    block[((c * s.t + t) * s.h + y) * s.w + x] = px[src] as f64;
                                }
                            }
                        }
                    }
                    let coeffs = self.forward_block(&block);
                    for (k, idx) in self.order.iter().enumerate() {
                        let flat = ((idx[0] * s.t + idx[1]) * s.h + idx[2]) * s.w + idx[3];
                        out[((bt * lc + k) * lh + bh) * lw + bw] = T::from_f64(coeffs[flat]);
                    }
                }
            }
        }
        LatentVideo::new(DenseArray::new(dims.to_vec(), out)?, s)
    }

    pub fn decode<T: Real>(&self, z: &LatentVideo<T>, frame_rate: f32) -> Result<PixelVideo> {
        let s = self.config.stride;
        if z.stride != s {
            return Err(shape_err(
                "decode",
                format!("latent stride {:?} vs codec {:?}", z.stride, s),
            ));
        }
        if z.channels() != self.config.latent_channels {
            return Err(shape_err(
                "decode",
                format!(
                    "latent has {} channels, codec {}",
                    z.channels(),
                    self.config.latent_channels
                ),
            ));
        }
        let (lt, lc, lh, lw) = (z.time(), z.channels(), z.height(), z.width());
        let (t_len, h, w) = (lt * s.t, lh * s.h, lw * s.w);
        let mut px = vec![0f32; t_len * PIXEL_CHANNELS * h * w];
        let mut coeffs = vec![0.0f64; PIXEL_CHANNELS * s.volume()];
        let zd = z.grid.data();
        for bt in 0..lt {
            for bh in 0..lh {
                for bw in 0..lw {
                    coeffs.iter_mut().for_each(|c| *c = 0.0);
                    for (k, idx) in self.order.iter().enumerate() {
                        let flat = ((idx[0] * s.t + idx[1]) * s.h + idx[2]) * s.w + idx[3];
                        coeffs[flat] = zd[((bt * lc + k) * lh + bh) * lw + bw].as_f64();
                    }
                    let block = self.inverse_block(&coeffs);
                    for c in 0..PIXEL_CHANNELS {
                        for t in 0..s.t {
                            for y in 0..s.h {
                                for x in 0..s.w {
                                    let fi = bt * s.t + t;
                                    let dst = ((fi * PIXEL_CHANNELS + c) * h + bh * s.h + y) * w
                                        + bw * s.w
                                        + x;
                                    px[dst] = block[((c * s.t + t) * s.h + y) * s.w + x] as f32;
                                }
                            }
                        }
                    }
                }
            }
        }
        PixelVideo::new(
            DenseArray::new(vec![t_len, PIXEL_CHANNELS, h, w], px)?,
            frame_rate,
        )
    }

    fn block_dims(&self) -> [usize; 4] {
        let s = self.config.stride;
        [PIXEL_CHANNELS, s.t, s.h, s.w]
    }

    fn forward_block(&self, block: &[f64]) -> Vec<f64> {
        let mut cur = block.to_vec();
        for axis in 0..4 {
            cur = mode_product(&cur, self.block_dims(), axis, &self.axes[axis], false);
        }
        cur
    }

    fn inverse_block(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut cur = coeffs.to_vec();
        for axis in 0..4 {
            cur = mode_product(&cur, self.block_dims(), axis, &self.axes[axis], true);
        }
        cur
    }
}

/// Applies `m` (or `mᵀ`) along `axis` of a 4-axis row-major tensor.
fn mode_product(x: &[f64], dims: [usize; 4], axis: usize, m: &[f64], transpose: bool) -> Vec<f64> {
    let n = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            for r in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    let coef = if transpose { m[k * n + r] } else { m[r * n + k] };
                    acc += coef * x[(o * n + k) * inner + i];
                }
                out[(o * n + r) * inner + i] = acc;
            }
        }
    }
    out
}

/// Token count of a latent grid under `patch`.
pub fn token_count<T: Real>(z: &LatentVideo<T>, patch: Stride3) -> Result<usize> {
    token_count_dims(z.time(), z.height(), z.width(), patch)
}

pub fn token_count_dims(time: usize, height: usize, width: usize, patch: Stride3) -> Result<usize> {
    for (axis, len, p) in [("time", time, patch.t), ("height", height, patch.h), ("width", width, patch.w)] {
        if p == 0 || len % p != 0 {
            return Err(shape_err(
                "token_count",
                format!("latent {axis} {len} not divisible by patch {p}"),
            ));
        }
    }
    Ok((time / patch.t) * (height / patch.h) * (width / patch.w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_video(t: usize, h: usize, w: usize, seed: u64) -> PixelVideo {
        let mut r = Rng::new(seed);
        PixelVideo::new(r.uniform_array(&[t, 3, h, w], 0.0, 1.0), 25.0).unwrap()
    }

    #[test]
    fn encode_shape_follows_stride() {
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        let v = PixelVideo::zeros(16, 128, 128, 25.0);
        let z: LatentVideo<f32> = codec.encode(&v).unwrap();
        assert_eq!(z.grid.shape(), &[4, 16, 8, 8]);
        assert!(z.grid.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bad_time_axis_is_named() {
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        let v = PixelVideo::zeros(15, 32, 32, 25.0);
        let msg = codec.encode::<f32>(&v).unwrap_err().to_string();
        assert!(msg.contains("time"), "{msg}");
    }

    #[test]
    fn axis_bases_are_orthonormal_with_mean_first() {
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        for (m, n) in codec.axes().iter().zip([3, 4, 16, 16]) {
            for i in 0..n {
                for j in 0..n {
                    let dot: f64 = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-12);
                }
            }
            let c = 1.0 / (n as f64).sqrt();
            assert!(m[..n].iter().all(|&x| (x - c).abs() < 1e-12));
        }
    }

    #[test]
    fn full_rank_round_trip_is_exact() {
        let cfg = CodecConfig {
            latent_channels: 3 * 4 * 16 * 16,
            ..Default::default()
        };
        let codec = LatentCodec::new(cfg).unwrap();
        let v = random_video(4, 16, 32, 3);
        let z: LatentVideo<f64> = codec.encode(&v).unwrap();
        let back = codec.decode(&z, 25.0).unwrap();
        assert!(back.frames.max_abs_diff(&v.frames) < 1e-6);
    }

    #[test]
    fn reconstruction_error_shrinks_with_channels() {
        let v = random_video(4, 16, 16, 9);
        let mut last = f64::INFINITY;
        for c in [4, 16, 64, 256, 1024, 3072] {
            let codec = LatentCodec::new(CodecConfig {
                latent_channels: c,
                ..Default::default()
            })
            .unwrap();
            let back = codec.decode(&codec.encode::<f64>(&v).unwrap(), 25.0).unwrap();
            let err = back.frames.sub(&v.frames).unwrap().sum_sq() as f64;
            assert!(err < last, "channels {c}: {err} !< {last}");
            last = err;
        }
    }

    #[test]
    fn decode_zero_is_zero() {
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        let z = LatentVideo::<f32>::zeros([2, 16, 2, 2], codec.stride());
        let v = codec.decode(&z, 25.0).unwrap();
        assert_eq!(v.frames.shape(), &[8, 3, 32, 32]);
        assert!(v.frames.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn decode_rejects_foreign_stride() {
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        let z = LatentVideo::<f32>::zeros([1, 16, 1, 1], Stride3::new(4, 8, 8));
        assert!(codec.decode(&z, 25.0).is_err());
    }

    #[test]
    fn token_counts() {
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        let z: LatentVideo<f32> = codec.encode(&PixelVideo::zeros(16, 128, 128, 25.0)).unwrap();
        assert_eq!(token_count(&z, Stride3::new(1, 2, 2)).unwrap(), 64);
        assert_eq!(token_count(&z, Stride3::new(1, 1, 1)).unwrap(), 256);

        let fine = LatentCodec::new(CodecConfig {
            stride: Stride3::new(4, 8, 8),
            ..Default::default()
        })
        .unwrap();
        let zf: LatentVideo<f32> = fine.encode(&PixelVideo::zeros(16, 128, 128, 25.0)).unwrap();
        assert_eq!(token_count(&zf, Stride3::new(1, 2, 2)).unwrap(), 256);
        assert!(token_count(&z, Stride3::new(1, 3, 3)).is_err());
    }

    #[test]
    fn persisted_basis_reproduces_codec() {
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        let mut store = ParamStore::<f64>::new();
        codec.export_basis(&mut store).unwrap();
        let back = LatentCodec::import_basis(codec.config().clone(), &store).unwrap();
        let v = random_video(4, 16, 16, 1);
        assert_eq!(codec.encode::<f32>(&v).unwrap(), back.encode::<f32>(&v).unwrap());
    }
}
