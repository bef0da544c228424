//! Recency-aware packing of context latents.
//!
//! The most recent context latents are patchified finely, older ones with
//! larger patches, so long motion histories cost few tokens. Each bucket
//! has its own learned linear patchify.

use serde::{Deserialize, Serialize};

use crate::codec::{LatentVideo, Stride3};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{DenseArray, Graph, ParamStore, Real, Rng, Var};

/// Integer token coordinates. `h` and `w` are in units of the video patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Position {
    pub t: i64,
    pub h: i64,
    pub w: i64,
}

/// One recency bucket. `frames = None` takes every remaining latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bucket {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
    pub patch: Stride3,
}

/// Buckets ordered newest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackPlan {
    pub buckets: Vec<Bucket>,
}

impl Default for PackPlan {
    fn default() -> Self {
        Self {
            buckets: vec![
                Bucket {
                    frames: Some(1),
                    patch: Stride3::new(1, 2, 2),
                },
                Bucket {
                    frames: None,
                    patch: Stride3::new(2, 4, 4),
                },
            ],
        }
    }
}

/// A bucket resolved against a concrete context length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedBucket {
    /// Index into [`PackPlan::buckets`].
    pub bucket: usize,
    /// First context latent covered (0 is the oldest).
    pub start: usize,
    pub len: usize,
    pub patch: Stride3,
}

impl PackPlan {
    /// A single fine bucket over every latent: plain video-style patchify.
    pub fn degenerate(patch: Stride3) -> Self {
        Self {
            buckets: vec![Bucket { frames: None, patch }],
        }
    }

    pub fn validate(&self, video_patch: Stride3) -> Result<()> {
        if self.buckets.is_empty() {
            return Err(Error::Config {
                key: "model.pack".into(),
                detail: "at least one bucket required".into(),
            });
        }
        for (i, b) in self.buckets.iter().enumerate() {
            let p = b.patch;
            if p.t == 0 || p.h == 0 || p.w == 0 {
                return Err(Error::Config {
                    key: format!("model.pack.buckets[{i}].patch"),
                    detail: "patch sizes must be positive".into(),
                });
            }
            if p.h % video_patch.h != 0 || p.w % video_patch.w != 0 {
                return Err(Error::Config {
                    key: format!("model.pack.buckets[{i}].patch"),
                    detail: format!(
                        "spatial patch {}x{} is not a multiple of the video patch {}x{}",
                        p.h, p.w, video_patch.h, video_patch.w
                    ),
                });
            }
            if b.frames.is_none() && i + 1 != self.buckets.len() {
                return Err(Error::Config {
                    key: format!("model.pack.buckets[{i}].frames"),
                    detail: "only the last bucket may take the remaining frames".into(),
                });
            }
            if b.frames == Some(0) {
                return Err(Error::Config {
                    key: format!("model.pack.buckets[{i}].frames"),
                    detail: "bucket frame count must be positive".into(),
                });
            }
        }
        Ok(())
    }

    /// Splits `context_len` latents over the buckets, newest first. A
    /// bucket only takes a multiple of its temporal patch; latents that fit
    /// no bucket are the oldest and are dropped. Buckets left empty are
    /// omitted.
    pub fn resolve(&self, context_len: usize) -> Vec<ResolvedBucket> {
        let mut end = context_len;
        let mut out = Vec::new();
        for (i, b) in self.buckets.iter().enumerate() {
            if end == 0 {
                break;
            }
            let want = b.frames.unwrap_or(end).min(end);
            let len = want - want % b.patch.t;
            if len == 0 {
                continue;
            }
            out.push(ResolvedBucket {
                bucket: i,
                start: end - len,
                len,
                patch: b.patch,
            });
            end -= len;
        }
        out
    }

    /// Packed token count for a `context_len × · × height × width` context.
    pub fn token_count(&self, context_len: usize, height: usize, width: usize) -> Result<usize> {
        let mut n = 0;
        for r in self.resolve(context_len) {
            check_spatial(r.patch, height, width)?;
            n += (r.len / r.patch.t) * (height / r.patch.h) * (width / r.patch.w);
        }
        Ok(n)
    }

    pub fn weight_name(bucket: usize) -> String {
        format!("framepack.bucket{bucket}.w")
    }

    pub fn bias_name(bucket: usize) -> String {
        format!("framepack.bucket{bucket}.b")
    }

    /// Adds one trainable patchify per bucket.
    pub fn init_params<T: Real>(
        &self,
        channels: usize,
        model_dim: usize,
        rng: &mut Rng,
        store: &mut ParamStore<T>,
    ) -> Result<()> {
        for (i, b) in self.buckets.iter().enumerate() {
            let fan_in = channels * b.patch.volume();
            store.insert(
                Self::weight_name(i),
                rng.normal_array(&[fan_in, model_dim], 1.0 / (fan_in as f64).sqrt()),
                false,
            )?;
            store.insert(Self::bias_name(i), DenseArray::zeros(&[model_dim]), false)?;
        }
        Ok(())
    }
}

fn check_spatial(patch: Stride3, height: usize, width: usize) -> Result<()> {
    if !height.is_multiple_of(patch.h) || !width.is_multiple_of(patch.w) {
        return Err(shape_err(
            "patchify",
            format!("latent {height}x{width} not divisible by patch {}x{}", patch.h, patch.w),
        ));
    }
    Ok(())
}

/// Cuts `z` into non-overlapping patches. Rows are ordered `(t, h, w)`;
/// each row is `(channel, dt, dh, dw)` flattened.
pub fn patchify<T: Real>(z: &LatentVideo<T>, patch: Stride3) -> Result<DenseArray<T>> {
    let (lt, c, h, w) = (z.time(), z.channels(), z.height(), z.width());
    if lt % patch.t != 0 {
        return Err(shape_err(
            "patchify",
            format!("{lt} latent frames not divisible by temporal patch {}", patch.t),
        ));
    }
    check_spatial(patch, h, w)?;
    let (nt, nh, nw) = (lt / patch.t, h / patch.h, w / patch.w);
    let dim = c * patch.volume();
    let src = z.grid.data();
    let mut out = Vec::with_capacity(nt * nh * nw * dim);
    for ti in 0..nt {
        for hi in 0..nh {
            for wi in 0..nw {
                for ch in 0..c {
                    for dt in 0..patch.t {
                        for dh in 0..patch.h {
                            let t = ti * patch.t + dt;
                            let y = hi * patch.h + dh;
                            let base = ((t * c + ch) * h + y) * w + wi * patch.w;
                            out.extend_from_slice(&src[base..base + patch.w]);
                        }
                    }
                }
            }
        }
    }
    DenseArray::new(vec![nt * nh * nw, dim], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(
    tokens: &DenseArray<T>,
    dims: [usize; 4],
    patch: Stride3,
    stride: Stride3,
) -> Result<LatentVideo<T>> {
    let [lt, c, h, w] = dims;
    if lt % patch.t != 0 {
        return Err(shape_err("unpatchify", format!("{lt} frames vs patch {}", patch.t)));
    }
    check_spatial(patch, h, w)?;
    let (nt, nh, nw) = (lt / patch.t, h / patch.h, w / patch.w);
    let dim = c * patch.volume();
    if tokens.shape() != [nt * nh * nw, dim] {
        return Err(shape_err(
            "unpatchify",
            format!("tokens {:?} vs expected [{}, {dim}]", tokens.shape(), nt * nh * nw),
        ));
    }
    let mut grid = vec![T::zero(); lt * c * h * w];
    let src = tokens.data();
    let mut k = 0;
    for ti in 0..nt {
        for hi in 0..nh {
            for wi in 0..nw {
                for ch in 0..c {
                    for dt in 0..patch.t {
                        for dh in 0..patch.h {
                            let t = ti * patch.t + dt;
                            let y = hi * patch.h + dh;
                            let base = ((t * c + ch) * h + y) * w + wi * patch.w;
                            grid[base..base + patch.w].copy_from_slice(&src[k..k + patch.w]);
                            k += patch.w;
                        }
                    }
                }
            }
        }
    }
    LatentVideo::new(DenseArray::new(dims.to_vec(), grid)?, stride)
}

/// Positions of patchified tokens whose first latent sits at `t0`.
pub fn patch_positions(
    t0: i64,
    time: usize,
    height: usize,
    width: usize,
    patch: Stride3,
    video_patch: Stride3,
) -> Vec<Position> {
    let (nt, nh, nw) = (time / patch.t, height / patch.h, width / patch.w);
    let (sh, sw) = (patch.h / video_patch.h, patch.w / video_patch.w);
    let mut out = Vec::with_capacity(nt * nh * nw);
    for ti in 0..nt {
        for hi in 0..nh {
            for wi in 0..nw {
                out.push(Position {
                    t: t0 + (ti * patch.t) as i64,
                    h: (hi * sh) as i64,
                    w: (wi * sw) as i64,
                });
            }
        }
    }
    out
}

/// Packed context on a tape.
#[derive(Debug, Clone)]
pub struct Packed {
    /// `N × model_dim`, absent when the context is empty.
    pub tokens: Option<Var>,
    pub positions: Vec<Position>,
    /// Bucket index of every token.
    pub bucket_of: Vec<usize>,
    /// Oldest latents that fit no bucket.
    pub dropped: usize,
}

/// Embeds `context` bucket by bucket. Temporal positions count back from
/// the newest latent, which lands on `t = -1`; coarse tokens take the
/// position of the oldest latent they cover.
pub fn pack<T: Real>(
    graph: &mut Graph<T>,
    context: Option<&LatentVideo<T>>,
    plan: &PackPlan,
    video_patch: Stride3,
    params: &ParamStore<T>,
) -> Result<Packed> {
    let empty = Packed {
        tokens: None,
        positions: Vec::new(),
        bucket_of: Vec::new(),
        dropped: 0,
    };
    let Some(ctx) = context else { return Ok(empty) };
    let lc = ctx.time();
    if lc == 0 {
        return Ok(empty);
    }
    let resolved = plan.resolve(lc);
    let mut parts = Vec::new();
    let mut positions = Vec::new();
    let mut bucket_of = Vec::new();
    let mut used = 0;
    // Oldest bucket first so sequence order follows time.
    for r in resolved.iter().rev() {
        let slice = ctx.slice_time(r.start, r.len)?;
        let rows = patchify(&slice, r.patch)?;
        let x = graph.constant(rows);
        let w = graph.param(params, &PackPlan::weight_name(r.bucket))?;
        let b = graph.param(params, &PackPlan::bias_name(r.bucket))?;
        parts.push(graph.linear(x, w, Some(b))?);
        let pos = patch_positions(
            r.start as i64 - lc as i64,
            r.len,
            ctx.height(),
            ctx.width(),
            r.patch,
            video_patch,
        );
        bucket_of.extend(std::iter::repeat_n(r.bucket, pos.len()));
        positions.extend(pos);
        used += r.len;
    }
    let tokens = match parts.len() {
        0 => None,
        1 => Some(parts[0]),
        _ => Some(graph.concat_rows(&parts)?),
    };
    Ok(Packed {
        tokens,
        positions,
        bucket_of,
        dropped: lc - used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent(t: usize, c: usize, h: usize, w: usize, seed: u64) -> LatentVideo<f64> {
        let grid = Rng::new(seed).normal_array(&[t, c, h, w], 1.0);
        LatentVideo::new(grid, Stride3::new(4, 16, 16)).unwrap()
    }

    fn store(plan: &PackPlan, c: usize, d: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        plan.init_params(c, d, &mut Rng::new(1), &mut s).unwrap();
        s
    }

    #[test]
    fn two_tier_counts() {
        let plan = PackPlan {
            buckets: vec![
                Bucket { frames: Some(1), patch: Stride3::new(1, 2, 2) },
                Bucket { frames: Some(2), patch: Stride3::new(2, 4, 4) },
            ],
        };
        assert_eq!(plan.token_count(3, 8, 8).unwrap(), 20);
        let flat = PackPlan::degenerate(Stride3::new(1, 2, 2));
        assert_eq!(flat.token_count(3, 8, 8).unwrap(), 48);
        assert_eq!(PackPlan::default().token_count(3, 8, 8).unwrap(), 20);
    }

    #[test]
    fn patchify_round_trips() {
        let z = latent(4, 3, 8, 4, 7);
        for p in [Stride3::new(1, 2, 2), Stride3::new(2, 4, 4), Stride3::new(4, 8, 4)] {
            let tok = patchify(&z, p).unwrap();
            let back = unpatchify(&tok, [4, 3, 8, 4], p, z.stride).unwrap();
            assert_eq!(back, z);
        }
    }

    #[test]
    fn positions_end_at_minus_one() {
        let plan = PackPlan::default();
        let z = latent(5, 2, 4, 4, 3);
        let s = store(&plan, 2, 8);
        let mut g = Graph::new();
        let p = pack(&mut g, Some(&z), &plan, Stride3::new(1, 2, 2), &s).unwrap();
        assert_eq!(p.dropped, 0);
        assert_eq!(p.positions.iter().map(|q| q.t).max(), Some(-1));
        assert!(p.positions.iter().all(|q| q.t < 0));
        // fine bucket: 4 tokens at t=-1; coarse: 2 temporal × 1 spatial.
        assert_eq!(p.positions.len(), 4 + 2);
        let coarse_t: Vec<i64> = p.positions[..2].iter().map(|q| q.t).collect();
        assert_eq!(coarse_t, vec![-5, -3]);
    }

    #[test]
    fn leftover_oldest_latent_is_dropped() {
        let plan = PackPlan::default();
        assert_eq!(plan.resolve(4).iter().map(|r| r.len).sum::<usize>(), 3);
        assert_eq!(plan.resolve(4)[1].start, 1);
        assert_eq!(plan.resolve(1).len(), 1);
        assert!(plan.resolve(0).is_empty());
    }

    #[test]
    fn empty_context_is_empty() {
        let plan = PackPlan::default();
        let s = store(&plan, 2, 8);
        let mut g = Graph::<f64>::new();
        let p = pack(&mut g, None, &plan, Stride3::new(1, 2, 2), &s).unwrap();
        assert!(p.tokens.is_none() && p.positions.is_empty());
    }

    #[test]
    fn bad_spatial_patch_is_a_shape_error() {
        let plan = PackPlan::default();
        assert!(matches!(plan.token_count(3, 6, 6), Err(Error::Shape { .. })));
    }

    #[test]
    fn validate_rejects_rest_before_last() {
        let plan = PackPlan {
            buckets: vec![
                Bucket { frames: None, patch: Stride3::new(1, 2, 2) },
                Bucket { frames: Some(1), patch: Stride3::new(1, 2, 2) },
            ],
        };
        assert!(plan.validate(Stride3::new(1, 2, 2)).is_err());
        assert!(PackPlan::default().validate(Stride3::new(1, 2, 2)).is_ok());
    }
}
