//! Glue between a resolved [`RunConfig`] and the engine: fresh models,
//! checkpoints, fixture sets.

use crate::codec::LatentCodec;
use crate::config::RunConfig;
use crate::dit::LoraAdapter;
use crate::dit::{init_audio_from_text, init_params};
use crate::error::{Error, Result};
use crate::formats::Checkpoint;
use crate::numerics::{ParamStore, Real, Rng};
use crate::pipeline::LatentSpace;
use crate::synth::{fixture_set, FixtureRecord, FixtureSpec};
use crate::trainer::{apply_routing, PreparedClip, TrainState};

/// Fixture seeds at or above this offset are never used for training.
pub const HELD_OUT_SEED_OFFSET: u64 = 1000;

/// The untrained model: seeded base weights, audio path copied from the
/// text path with zero gates, and a fresh adapter.
pub fn fresh_state<T: Real>(cfg: &RunConfig) -> Result<TrainState<T>> {
    let mut params = init_params::<T>(&cfg.model, cfg.seed)?;
    let mut rng = Rng::new(cfg.seed);
    init_audio_from_text(&cfg.model, &mut params, &mut rng)?;
    TrainState::new(params, &cfg.model, &cfg.train, &mut rng)
}

pub fn latent_space(cfg: &RunConfig) -> Result<LatentSpace> {
    LatentSpace::new(&cfg.latent)
}

/// Base weights, adapter pairs and the codec basis in one container.
pub fn to_checkpoint<T: Real>(state: &TrainState<T>, space: &LatentSpace, digest: [u8; 32]) -> Result<Checkpoint> {
    // The basis stays in double precision whatever the model precision.
    let mut basis = ParamStore::<f64>::new();
    space.codec.export_basis(&mut basis)?;
    let mut ck = Checkpoint::from_stores(digest, &[&state.params, &state.adapter.params]);
    ck.records.extend(Checkpoint::from_stores(digest, &[&basis]).records);
    Ok(ck)
}

fn is_lora(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

fn is_codec(name: &str) -> bool {
    name.starts_with("codec.")
}

/// Restores the weights and codec of `ck`. The optimizer restarts; group
/// routing is recomputed from `cfg`.
pub fn from_checkpoint<T: Real>(ck: &Checkpoint, cfg: &RunConfig) -> Result<(TrainState<T>, LatentSpace)> {
    let fresh = fresh_state::<T>(cfg)?;
    let mut params = ck.to_store::<T>(|n| !is_lora(n) && !is_codec(n))?;
    check_names(&fresh.params, &params, "model")?;
    apply_routing(&mut params, &cfg.model, &cfg.train.unfreeze)?;
    let lora = ck.to_store::<T>(is_lora)?;
    check_names(&fresh.adapter.params, &lora, "adapter")?;
    let adapter = LoraAdapter {
        params: lora,
        ..fresh.adapter
    };
    let basis = ck.to_store::<f64>(is_codec)?;
    let space = LatentSpace {
        codec: LatentCodec::import_basis(cfg.latent.codec.clone(), &basis)?,
        scale: cfg.latent.latent_scale,
    };
    Ok((
        TrainState {
            params,
            adapter,
            opt: fresh.opt,
            step: 0,
        },
        space,
    ))
}

fn check_names<T: Real>(want: &ParamStore<T>, got: &ParamStore<T>, what: &str) -> Result<()> {
    for (name, p) in want.iter() {
        match got.get(name) {
            None => {
                return Err(Error::Format {
                    format: "WGN1",
                    detail: format!("{what} record `{name}` missing"),
                })
            }
            Some(v) if v.shape() != p.value.shape() => {
                return Err(Error::Format {
                    format: "WGN1",
                    detail: format!("`{name}` has shape {:?}, config expects {:?}", v.shape(), p.value.shape()),
                })
            }
            Some(_) => {}
        }
    }
    if got.len() != want.len() {
        return Err(Error::Format {
            format: "WGN1",
            detail: format!("{} {what} records, config expects {}", got.len(), want.len()),
        });
    }
    Ok(())
}

/// The standard training fixture set.
pub fn training_fixtures(cfg: &RunConfig) -> Result<Vec<FixtureRecord>> {
    fixture_set(&cfg.fixtures.spec, cfg.fixtures.count)
}

/// Held-out fixture `i`: same spec, seed shifted out of the training range.
pub fn held_out_fixture(cfg: &RunConfig, i: u64) -> Result<FixtureRecord> {
    let spec = FixtureSpec {
        seed: cfg.fixtures.spec.seed + HELD_OUT_SEED_OFFSET + i,
        ..cfg.fixtures.spec.clone()
    };
    crate::synth::make_fixture(&spec)
}

pub fn prepare_clips(cfg: &RunConfig, space: &LatentSpace, fixtures: Vec<FixtureRecord>) -> Result<Vec<PreparedClip>> {
    fixtures
        .into_iter()
        .map(|f| PreparedClip::new(f, &cfg.model, space, cfg.train.max_text_tokens))
        .collect()
}
