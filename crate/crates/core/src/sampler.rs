//! Shifted flow-matching schedule, guidance and the Euler solver.
//!
//! Along the linear path `z_t = (1 - t) z_0 + t ε` the velocity
//! `ε - z_0` is constant, so an exact velocity makes Euler exact for any
//! step count.

use serde::{Deserialize, Serialize};

use crate::audio::AudioLayers;
use crate::codec::LatentVideo;
use crate::dit::{predict_velocity, Conditions, LoraAdapter, ModelConfig};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{DenseArray, ParamStore, Real};

/// Descending timesteps from 1 to 0, `steps + 1` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSchedule {
    pub steps: usize,
    pub shift: f64,
    pub timesteps: Vec<f64>,
}

/// `t = s·u / (1 + (s - 1)·u)`, with the endpoints pinned exactly.
pub fn shift_time(u: f64, shift: f64) -> f64 {
    if u == 0.0 || u == 1.0 {
        return u;
    }
    shift * u / (1.0 + (shift - 1.0) * u)
}

/// Inverse of [`shift_time`].
pub fn unshift_time(t: f64, shift: f64) -> f64 {
    t / (shift - (shift - 1.0) * t)
}

pub fn build_schedule(steps: usize, shift: f64) -> Result<SamplerSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sampler needs at least one step".into()));
    }
    if !(shift > 0.0 && shift.is_finite()) {
        return Err(Error::InvalidArgument(format!("shift must be positive, got {shift}")));
    }
    let timesteps = (0..=steps)
        .map(|i| shift_time(1.0 - i as f64 / steps as f64, shift))
        .collect();
    Ok(SamplerSchedule {
        steps,
        shift,
        timesteps,
    })
}

impl SamplerSchedule {
    /// The tail of the schedule starting at the largest timestep not above
    /// `t_start`. `t_start = 0` leaves only the endpoint, i.e. no steps.
    pub fn truncate(&self, t_start: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t_start) {
            return Err(Error::Sampling(format!(
                "t_start {t_start} below smallest timestep or above 1"
            )));
        }
        let first = self
            .timesteps
            .iter()
            .position(|&t| t <= t_start)
            .ok_or_else(|| Error::Sampling("t_start below smallest timestep".into()))?;
        Ok(self.timesteps[first..].to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    /// One unconditional branch with text and audio dropped together.
    Joint,
    /// Separate text and audio scales over three branches.
    Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub mode: GuidanceMode,
    pub text_scale: f64,
    pub audio_scale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 6.5,
            mode: GuidanceMode::Joint,
            text_scale: 6.5,
            audio_scale: 6.5,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("scale", self.scale), ("text_scale", self.text_scale), ("audio_scale", self.audio_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    key: format!("guidance.{k}"),
                    detail: format!("must be a finite non-negative number, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// `v_uncond + scale · (v_cond - v_uncond)`; scales 0 and 1 return the
/// matching branch unchanged.
pub fn cfg_velocity<T: Real>(v_cond: &DenseArray<T>, v_uncond: &DenseArray<T>, scale: f64) -> Result<DenseArray<T>> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(shape_err(
            "cfg_velocity",
            format!("{:?} vs {:?}", v_cond.shape(), v_uncond.shape()),
        ));
    }
    if scale == 1.0 {
        return Ok(v_cond.clone());
    }
    if scale == 0.0 {
        return Ok(v_uncond.clone());
    }
    let s = T::from_f64(scale);
    v_cond.zip_map(v_uncond, "cfg_velocity", |c, u| u + s * (c - u))
}

/// Which conditions a branch keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Full,
    /// Text and audio dropped.
    Unconditional,
    /// Audio dropped.
    TextOnly,
}

/// Anything that predicts a velocity for a latent at time `t`.
pub trait VelocityField<T> {
    fn velocity(&self, z: &LatentVideo<T>, t: f64, branch: Branch) -> Result<LatentVideo<T>>;
}

/// The transformer with fixed conditions.
pub struct DitField<'a, T> {
    pub params: &'a ParamStore<T>,
    pub adapter: Option<&'a LoraAdapter<T>>,
    pub cfg: &'a ModelConfig,
    pub text: Option<&'a DenseArray<T>>,
    pub audio: Option<&'a AudioLayers>,
    pub reference: Option<&'a LatentVideo<T>>,
    pub context: Option<&'a LatentVideo<T>>,
}

impl<T: Real> VelocityField<T> for DitField<'_, T> {
    fn velocity(&self, z: &LatentVideo<T>, t: f64, branch: Branch) -> Result<LatentVideo<T>> {
        let (text, audio) = match branch {
            Branch::Full => (self.text, self.audio),
            Branch::Unconditional => (None, None),
            Branch::TextOnly => (self.text, None),
        };
        let cond = Conditions {
            text,
            audio,
            reference: self.reference,
            context: self.context,
        };
        predict_velocity(self.params, self.adapter, self.cfg, z, t, cond)
    }
}

/// Guided velocity at one point.
pub fn guided_velocity<T: Real, F: VelocityField<T> + ?Sized>(
    field: &F,
    z: &LatentVideo<T>,
    t: f64,
    guidance: &GuidanceConfig,
) -> Result<LatentVideo<T>> {
    let full = field.velocity(z, t, Branch::Full)?;
    let grid = match guidance.mode {
        GuidanceMode::Joint => {
            if guidance.scale == 1.0 {
                return Ok(full);
            }
            let un = field.velocity(z, t, Branch::Unconditional)?;
            cfg_velocity(&full.grid, &un.grid, guidance.scale)?
        }
        GuidanceMode::Split => {
            let un = field.velocity(z, t, Branch::Unconditional)?;
            let text = field.velocity(z, t, Branch::TextOnly)?;
            let (st, sa) = (T::from_f64(guidance.text_scale), T::from_f64(guidance.audio_scale));
            let mut g = un.grid.clone();
            for (((o, &u), &tx), &f) in g
                .data_mut()
                .iter_mut()
                .zip(un.grid.data())
                .zip(text.grid.data())
                .zip(full.grid.data())
            {
                *o = u + st * (tx - u) + sa * (f - tx);
            }
            g
        }
    };
    LatentVideo::new(grid, z.stride)
}

/// Euler integration over `timesteps` (descending, ending at 0), starting
/// from `z` at `timesteps[0]`.
pub fn sample<T: Real, F: VelocityField<T> + ?Sized>(
    z: LatentVideo<T>,
    timesteps: &[f64],
    field: &F,
    guidance: &GuidanceConfig,
) -> Result<LatentVideo<T>> {
    if timesteps.is_empty() {
        return Err(Error::Sampling("t_start below smallest timestep".into()));
    }
    if timesteps.windows(2).any(|w| w[1] >= w[0]) || *timesteps.last().unwrap() != 0.0 {
        return Err(Error::Sampling("timesteps must decrease strictly to 0".into()));
    }
    let mut z = z;
    for w in timesteps.windows(2) {
        let (t, next) = (w[0], w[1]);
        let v = guided_velocity(field, &z, t, guidance)?;
        let dt = T::from_f64(next - t);
        for (x, &dv) in z.grid.data_mut().iter_mut().zip(v.grid.data()) {
            *x += dt * dv;
        }
        if !z.grid.all_finite() {
            return Err(Error::Sampling(format!("non-finite latent after step to t={next}")));
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Stride3;
    use crate::numerics::Rng;

    struct Oracle {
        v: LatentVideo<f32>,
    }

    impl VelocityField<f32> for Oracle {
        fn velocity(&self, _: &LatentVideo<f32>, _: f64, _: Branch) -> Result<LatentVideo<f32>> {
            Ok(self.v.clone())
        }
    }

    #[test]
    fn shift_examples() {
        assert!((shift_time(0.5, 5.0) - 2.5 / 3.0).abs() < 1e-15);
        for s in [0.3, 1.0, 5.0, 16.0] {
            assert_eq!(shift_time(0.0, s), 0.0);
            assert_eq!(shift_time(1.0, s), 1.0);
        }
        let sch = build_schedule(4, 1.0).unwrap();
        assert_eq!(sch.timesteps, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        assert!(build_schedule(0, 5.0).is_err());
    }

    #[test]
    fn truncation_counts_against_inverse_map() {
        let sch = build_schedule(50, 5.0).unwrap();
        let kept = sch.truncate(0.95).unwrap();
        // t <= 0.95 ⇔ u <= 0.95 / (5 - 4·0.95) = 0.7917 ⇔ i >= 50·(1 - 0.7917) = 10.4
        let u_max = unshift_time(0.95, 5.0);
        let first = (0..=50).find(|&i| 1.0 - i as f64 / 50.0 <= u_max).unwrap();
        assert_eq!(first, 11);
        assert_eq!(kept.len(), 51 - first);
        assert!(kept.iter().all(|&t| t <= 0.95));
        assert_eq!(sch.truncate(0.0).unwrap(), vec![0.0]);
        assert!(sch.truncate(-0.1).is_err());
    }

    #[test]
    fn cfg_arithmetic() {
        let c = DenseArray::<f64>::from_rows(&[&[1.0]]);
        let u = DenseArray::<f64>::from_rows(&[&[0.0]]);
        assert_eq!(cfg_velocity(&c, &u, 6.5).unwrap().data(), &[6.5]);
        assert_eq!(cfg_velocity(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_velocity(&c, &u, 0.0).unwrap(), u);
    }

    #[test]
    fn euler_is_exact_under_the_oracle() {
        let mut rng = Rng::new(9);
        let z0: DenseArray<f32> = rng.normal_array(&[2, 3, 2, 2], 1.0);
        let eps: DenseArray<f32> = rng.normal_array(&[2, 3, 2, 2], 1.0);
        let v = LatentVideo::new(eps.sub(&z0).unwrap(), Stride3::new(4, 16, 16)).unwrap();
        let oracle = Oracle { v };
        let g = GuidanceConfig { scale: 1.0, ..Default::default() };
        for steps in [1, 7, 50] {
            let sch = build_schedule(steps, 5.0).unwrap();
            let start = LatentVideo::new(eps.clone(), Stride3::new(4, 16, 16)).unwrap();
            let out = sample(start, &sch.timesteps, &oracle, &g).unwrap();
            assert!(out.grid.max_abs_diff(&z0) < 1e-6, "steps={steps}");
        }
    }
}
