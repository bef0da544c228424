//! Run configuration: one TOML file over a named preset, with `--set`
//! style overrides on top.
//!
//! Precedence, lowest first: preset defaults, file values, `key=value`
//! overrides, dedicated flags such as `--seed`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::director::DirectorConfig;
use crate::dit::ModelConfig;
use crate::dubbing::DubbingConfig;
use crate::error::{Error, Result};
use crate::longvideo::{GenerationConfig, WindowPlan};
use crate::pipeline::LatentSpaceConfig;
use crate::synth::FixtureSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureSet {
    pub count: usize,
    pub spec: FixtureSpec,
}

impl Default for FixtureSet {
    fn default() -> Self {
        Self {
            count: 16,
            spec: FixtureSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    /// Master seed: model initialization and training streams.
    pub seed: u64,
    pub model: ModelConfig,
    pub latent: LatentSpaceConfig,
    pub generation: GenerationConfig,
    pub train: TrainConfig,
    pub window: WindowPlan,
    pub dub: DubbingConfig,
    pub director: DirectorConfig,
    pub fixtures: FixtureSet,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self {
                preset: p,
                seed: 0,
                model: ModelConfig::desk(),
                latent: LatentSpaceConfig::default(),
                generation: GenerationConfig::default(),
                train: TrainConfig::desk(),
                window: WindowPlan::default(),
                dub: DubbingConfig::default(),
                director: DirectorConfig::default(),
                fixtures: FixtureSet::default(),
            },
            Preset::Paper => {
                let mut latent = LatentSpaceConfig::default();
                latent.codec.latent_channels = 48;
                Self {
                    preset: p,
                    model: ModelConfig::paper_scale(),
                    latent,
                    train: TrainConfig::paper(),
                    window: WindowPlan::paper(),
                    dub: DubbingConfig {
                        segment_frames: 80,
                        context_frames: 72,
                        ..DubbingConfig::default()
                    },
                    ..Self::preset(Preset::Desk)
                }
            }
        }
    }

    /// Parses `text` over the preset it names, then applies `overrides`
    /// (`dotted.key=toml_value`).
    pub fn load(text: &str, overrides: &[String]) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config {
            key: "<file>".into(),
            detail: e.message().to_string(),
        })?;
        let mut over = toml::Table::new();
        for o in overrides {
            set_dotted(&mut over, o)?;
        }
        let preset_value = over.get("preset").or_else(|| file.get("preset")).cloned();
        let preset = match preset_value {
            None => Preset::Desk,
            Some(v) => Preset::deserialize(v.clone()).map_err(|_| Error::Config {
                key: "preset".into(),
                detail: format!("expected \"desk\" or \"paper\", got {v}"),
            })?,
        };
        let base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config {
            key: "<preset>".into(),
            detail: e.to_string(),
        })?;
        let mut merged = base;
        merge(&mut merged, file);
        merge(&mut merged, over);
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            let key = match inner.strip_prefix("unknown field `").and_then(|r| r.split('`').next()) {
                Some(field) if path == "." => field.to_string(),
                Some(field) if path.ends_with(field) => path,
                Some(field) => format!("{path}.{field}"),
                None => path,
            };
            Error::Config { key, detail: inner }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets the model, window and dubbing seeds. Fixture seeds are left alone
    /// so the standard fixture set stays fixed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.window.seed = seed;
        self.dub.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let stride = self.latent.codec.stride;
        if self.latent.codec.latent_channels != self.model.latent_channels {
            return Err(Error::Config {
                key: "latent.codec.latent_channels".into(),
                detail: format!(
                    "{} differs from model.latent_channels {}",
                    self.latent.codec.latent_channels, self.model.latent_channels
                ),
            });
        }
        if self.model.audio.tokens_per_latent == 0 {
            return Err(Error::Config {
                key: "model.audio.tokens_per_latent".into(),
                detail: "must be positive".into(),
            });
        }
        self.model.pack.validate(self.model.patch)?;
        self.train.validate(stride.t)?;
        self.window.validate(stride.t)?;
        self.dub.validate(stride.t)?;
        self.generation.guidance.validate()?;
        if self.generation.steps == 0 || !(self.generation.shift > 0.0) {
            return Err(Error::Config {
                key: "generation".into(),
                detail: "steps and shift must be positive".into(),
            });
        }
        let s = &self.fixtures.spec;
        let cell = (stride.h * self.model.patch.h, stride.w * self.model.patch.w);
        if !s.height.is_multiple_of(cell.0) || !s.width.is_multiple_of(cell.1) || !s.frames.is_multiple_of(stride.t) {
            return Err(Error::Config {
                key: "fixtures.spec".into(),
                detail: format!(
                    "{}x{}x{} frames not divisible by the token cell {cell:?} and stride {}",
                    s.height, s.width, s.frames, stride.t
                ),
            });
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config {
            key: "<serialize>".into(),
            detail: e.to_string(),
        })
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.to_toml()?.as_bytes()).into())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`; the value is TOML, with bare words taken as
/// strings.
fn set_dotted(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config {
        key: assignment.into(),
        detail: "override must look like key=value".into(),
    })?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config {
            key: key.into(),
            detail: "empty key segment".into(),
        });
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    detail: format!("`{p}` is not a table"),
                })
            }
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_desk_preset() {
        assert_eq!(RunConfig::load("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_names_its_path() {
        match RunConfig::load("[train]\nlr_ful = 1.0\n", &[]) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.lr_ful"),
            other => panic!("{other:?}"),
        }
        match RunConfig::load("bogus = 1\n", &[]) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "bogus"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_beat_file_values() {
        let c = RunConfig::load("[train]\nsteps = 5\n", &["train.steps=7".into(), "generation.guidance.mode=split".into()]).unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.generation.guidance.mode, crate::sampler::GuidanceMode::Split);
    }

    #[test]
    fn round_trip_and_digest() {
        let c = RunConfig::preset(Preset::Paper);
        let back = RunConfig::load(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest().unwrap(), c.digest().unwrap());
        assert_ne!(c.digest().unwrap(), RunConfig::default().digest().unwrap());
    }
}
