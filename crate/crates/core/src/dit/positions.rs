//! Token positions and the three-axis rotary table.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::framepack::Position;
use crate::numerics::{Real, RotaryTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Context,
    Video,
    Reference,
}

/// Per-token positions and roles, in sequence order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PositionGrid {
    pub positions: Vec<Position>,
    pub roles: Vec<Role>,
}

/// Token counts of the three segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Segments {
    pub context: usize,
    pub video: usize,
    pub reference: usize,
}

impl Segments {
    pub fn total(&self) -> usize {
        self.context + self.video + self.reference
    }
}

impl PositionGrid {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, p: Position, role: Role) {
        self.positions.push(p);
        self.roles.push(role);
    }

    /// Indices of tokens with `role`.
    pub fn indices(&self, role: Role) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i] == role).collect()
    }

    /// Video token indices grouped by latent frame.
    pub fn video_by_frame(&self, latent_time: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); latent_time];
        for i in self.indices(Role::Video) {
            let t = self.positions[i].t;
            if (0..latent_time as i64).contains(&t) {
                out[t as usize].push(i);
            }
        }
        out
    }

    pub fn segments(&self) -> Segments {
        let count = |r| self.roles.iter().filter(|&&x| x == r).count();
        Segments {
            context: count(Role::Context),
            video: count(Role::Video),
            reference: count(Role::Reference),
        }
    }

    /// Checks the placement rules: context strictly before the video ending
    /// at `-1`, video on `0..video_latents`, reference at
    /// `video_latents - 1 + ref_offset`.
    pub fn check(&self, video_latents: usize, ref_offset: i64) -> Result<()> {
        let fail = |detail: String| Err(Error::InvalidArgument(format!("position grid: {detail}")));
        let ctx: Vec<i64> = self.indices(Role::Context).iter().map(|&i| self.positions[i].t).collect();
        if let Some(&m) = ctx.iter().max() {
            if m != -1 {
                return fail(format!("context ends at t={m}, expected -1"));
            }
        }
        let vid: Vec<i64> = self.indices(Role::Video).iter().map(|&i| self.positions[i].t).collect();
        let (lo, hi) = (vid.iter().min().copied(), vid.iter().max().copied());
        if lo != Some(0) || hi != Some(video_latents as i64 - 1) {
            return fail(format!("video spans {lo:?}..={hi:?}, expected 0..={}", video_latents - 1));
        }
        let want = video_latents as i64 - 1 + ref_offset;
        for i in self.indices(Role::Reference) {
            if self.positions[i].t != want {
                return fail(format!("reference at t={}, expected {want}", self.positions[i].t));
            }
        }
        Ok(())
    }

    /// Reorders tokens; `perm[k]` is the old index of new token `k`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            roles: perm.iter().map(|&i| self.roles[i]).collect(),
        }
    }
}

/// Channel pairs per axis `(t, h, w)` for a head of width `head_dim`: the
/// spatial axes get `head_dim / 6` pairs each, time takes the rest.
pub fn axis_pairs(head_dim: usize) -> Result<[usize; 3]> {
    if !head_dim.is_multiple_of(2) || head_dim < 6 {
        return Err(Error::Config {
            key: "model.heads".into(),
            detail: format!("head width {head_dim} must be even and at least 6"),
        });
    }
    let spatial = head_dim / 6;
    Ok([head_dim / 2 - 2 * spatial, spatial, spatial])
}

/// Rotation angles for every token: pairs are laid out time first, then
/// height, then width, each with frequencies `theta^(-i/n)`.
pub fn rotary_table<T: Real>(grid: &PositionGrid, head_dim: usize, theta: f64) -> Result<Rc<RotaryTable<T>>> {
    let axes = axis_pairs(head_dim)?;
    let pairs = head_dim / 2;
    let mut cos = Vec::with_capacity(grid.len() * pairs);
    let mut sin = Vec::with_capacity(grid.len() * pairs);
    for p in &grid.positions {
        for (axis, &n) in axes.iter().enumerate() {
            let pos = [p.t, p.h, p.w][axis] as f64;
            for i in 0..n {
                let angle = pos * theta.powf(-(i as f64) / n as f64);
                cos.push(T::from_f64(angle.cos()));
                sin.push(T::from_f64(angle.sin()));
            }
        }
    }
    Ok(Rc::new(RotaryTable {
        rows: grid.len(),
        pairs,
        cos,
        sin,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_split_follows_head_width() {
        assert_eq!(axis_pairs(16).unwrap(), [4, 2, 2]);
        assert_eq!(axis_pairs(128).unwrap(), [22, 21, 21]);
        assert!(axis_pairs(5).is_err());
    }

    #[test]
    fn zero_position_is_identity_rotation() {
        let mut g = PositionGrid::default();
        g.push(Position { t: 0, h: 0, w: 0 }, Role::Video);
        g.push(Position { t: -3, h: 1, w: 2 }, Role::Context);
        let tab = rotary_table::<f64>(&g, 16, 10_000.0).unwrap();
        assert!(tab.cos[..8].iter().all(|&c| c == 1.0));
        assert!(tab.sin[..8].iter().all(|&s| s == 0.0));
        // first time pair of the second token rotates by -3 rad
        assert!((tab.sin[8] - (-3.0f64).sin()).abs() < 1e-15);
    }
}
