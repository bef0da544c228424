//! Subcommands of the `wg` binary.
//!
//! Settings resolve in this order, later wins: preset, config file,
//! `--set key=value`, dedicated flags (`--seed`, `--steps`, ...).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use wg_core::audio::AudioTrack;
use wg_core::codec::PixelVideo;
use wg_core::config::{hex, RunConfig};
use wg_core::director::{rewrite, AudioSummary, DirectorRequest, StorySource};
use wg_core::dubbing::dub;
use wg_core::formats::{decode_audio, decode_video, encode_audio, encode_video, write_atomic, write_jsonl, Checkpoint};
use wg_core::longvideo::{drift_curve, generate_long, Generator, References};
use wg_core::pipeline::LatentSpace;
use wg_core::probe;
use wg_core::run;
use wg_core::synth::{make_fixture, sync_correlation, FixtureSpec};
use wg_core::trainer::{train, TrainState};
use wg_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "wg", version, about = "Audio-driven talking-video engine at desk scale")]
pub struct Cli {
    /// TOML run configuration; omitted keys take preset defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Seed for model initialization, windows and dubbing noise.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the standard fixture set.
    Synth,
    /// Fine-tune on the standard fixture set.
    Train {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate a long video window by window.
    Generate(GenerateArgs),
    /// Re-synthesize a video to follow new audio.
    Dub(DubArgs),
    /// Run every invariant suite.
    Probe,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// WGN1 checkpoint; without one the untrained model is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// WGA1 audio; defaults to a held-out fixture's track.
    #[arg(long)]
    pub audio: Option<PathBuf>,
    /// WGV1 video whose first frame is the reference image.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub windows: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DubArgs {
    /// WGV1 video to re-synthesize.
    #[arg(long)]
    pub input: PathBuf,
    /// WGA1 audio to follow.
    #[arg(long)]
    pub audio: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// WGV1 video whose first frame replaces the per-segment reference.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value = "a person talking")]
    pub prompt: String,
    /// Noise strength in [0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

/// Process exit code for an error: 2 configuration, 3 checksum, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        Error::Checksum { .. } => 3,
        _ => 1,
    }
}

/// Resolves the configuration for `cli`, including command flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Config {
            key: "<file>".into(),
            detail: format!("{}: {e}", p.display()),
        })?,
        None => String::new(),
    };
    let mut sets = cli.sets.clone();
    let mut flag = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            sets.push(format!("{key}={v}"));
        }
    };
    match &cli.command {
        Command::Train { steps } => flag("train.steps", steps.map(|s| s.to_string())),
        Command::Generate(a) => {
            flag("window.windows", a.windows.map(|s| s.to_string()));
            flag("generation.steps", a.steps.map(|s| s.to_string()));
            flag("generation.guidance.scale", a.guidance.map(|s| format!("{s:?}")));
        }
        Command::Dub(a) => {
            flag("dub.alpha", a.alpha.map(|s| format!("{s:?}")));
            flag("generation.steps", a.steps.map(|s| s.to_string()));
        }
        Command::Synth | Command::Probe => {}
    }
    let mut cfg = RunConfig::load(&text, &sets)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

pub fn run_cli(cli: &Cli) -> Result<()> {
    // Resolved even for `probe`, so a broken config is reported up front.
    let cfg = resolve_config(cli)?;
    if let Command::Probe = cli.command {
        return cmd_probe(&mut std::io::stdout());
    }
    let name = match cli.command {
        Command::Synth => "synth",
        Command::Train { .. } => "train",
        Command::Generate(_) => "generate",
        Command::Dub(_) => "dub",
        Command::Probe => unreachable!(),
    };
    let out = cli.out.clone().unwrap_or_else(|| Path::new("runs").join(name));
    fs::create_dir_all(&out)?;
    echo_config(&cfg, &out)?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, &out),
        Command::Train { .. } => cmd_train(&cfg, &out),
        Command::Generate(a) => cmd_generate(&cfg, a, &out),
        Command::Dub(a) => cmd_dub(&cfg, a, &out),
        Command::Probe => unreachable!(),
    }
}

/// Writes `config.toml` and its digest into `dir`.
pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    write_atomic(&dir.join("config.sha256"), format!("{}\n", hex(&cfg.digest()?)).as_bytes())
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_atomic(path, format!("{text}\n").as_bytes())
}

fn jsonl<R: serde::Serialize>(path: &Path, records: &[R]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dir = out.join("fixtures");
    fs::create_dir_all(&dir)?;
    let fixtures = run::training_fixtures(cfg)?;
    for (i, f) in fixtures.iter().enumerate() {
        let d = dir.join(format!("{i:04}"));
        fs::create_dir_all(&d)?;
        write_atomic(&d.join("video.wgv"), &encode_video(&f.video)?)?;
        write_atomic(&d.join("audio.wga"), &encode_audio(&f.audio)?)?;
        let frames: Vec<_> = f
            .envelope
            .iter()
            .zip(&f.aperture)
            .enumerate()
            .map(|(t, (e, a))| json!({"frame": t, "envelope": e, "aperture": a}))
            .collect();
        jsonl(&d.join("series.jsonl"), &frames)?;
        write_json(
            &d.join("meta.json"),
            &json!({
                "seed": f.spec.seed,
                "caption": f.caption,
                "head_box": f.head_box,
                "body_box": f.body_box,
                "gain": f.spec.gain,
                "audio_delay_frames": f.spec.audio_delay_frames,
            }),
        )?;
    }
    log::info!("wrote {} fixtures to {}", fixtures.len(), dir.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let space = run::latent_space(cfg)?;
    let clips = run::prepare_clips(cfg, &space, run::training_fixtures(cfg)?)?;
    let mut state = run::fresh_state::<f32>(cfg)?;
    let digest = cfg.digest()?;
    let ckdir = out.join("checkpoints");
    fs::create_dir_all(&ckdir)?;
    let mut metrics = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let every = cfg.train.checkpoint_every;
    let (initial, last) = train(&mut state, &cfg.model, &cfg.train, &clips, &space, cfg.seed, |rec, st| {
        write_jsonl(&mut metrics, std::slice::from_ref(rec))?;
        if every > 0 && rec.step % every == 0 {
            save_checkpoint(st, &space, digest, &ckdir.join(format!("step-{:06}.wgn", rec.step)))?;
        }
        Ok(())
    })?;
    metrics.flush()?;
    save_checkpoint(&state, &space, digest, &out.join("model.wgn"))?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "steps": state.step,
            "initial_eval_loss": initial,
            "final_eval_loss": last,
            "ratio": last / initial,
        }),
    )?;
    log::info!("eval loss {initial:.4} -> {last:.4}");
    Ok(())
}

fn save_checkpoint(st: &TrainState<f32>, space: &LatentSpace, digest: [u8; 32], path: &Path) -> Result<()> {
    write_atomic(path, &run::to_checkpoint(st, space, digest)?.encode()?)
}

/// Model and codec from `path`, or the untrained model.
fn load_model(cfg: &RunConfig, path: Option<&Path>) -> Result<(TrainState<f32>, LatentSpace, Option<String>)> {
    match path {
        None => Ok((run::fresh_state(cfg)?, run::latent_space(cfg)?, None)),
        Some(p) => {
            let ck = Checkpoint::decode(&fs::read(p)?)?;
            let stored = hex(&ck.digest);
            if ck.digest != cfg.digest()? {
                log::warn!("checkpoint was trained under config {stored}, running under a different one");
            }
            let (st, space) = run::from_checkpoint(&ck, cfg)?;
            Ok((st, space, Some(stored)))
        }
    }
}

fn read_video(p: &Path) -> Result<PixelVideo> {
    decode_video(&fs::read(p)?)
}

fn read_audio(p: &Path) -> Result<AudioTrack> {
    decode_audio(&fs::read(p)?)
}

pub fn cmd_generate(cfg: &RunConfig, a: &GenerateArgs, out: &Path) -> Result<()> {
    let (state, space, ck_digest) = load_model(cfg, a.checkpoint.as_deref())?;
    let plan = &cfg.window;
    // Stand-in inputs come from a held-out fixture long enough for the plan.
    let fixture = make_fixture(&FixtureSpec {
        frames: plan.total_frames(),
        seed: cfg.fixtures.spec.seed + run::HELD_OUT_SEED_OFFSET,
        ..cfg.fixtures.spec.clone()
    })?;
    let audio = match &a.audio {
        Some(p) => read_audio(p)?,
        None => fixture.audio.clone(),
    };
    let reference = match &a.reference {
        Some(p) => read_video(p)?.slice_frames(0, 1)?,
        None => fixture.video.slice_frames(0, 1)?,
    };
    let prompt = a.prompt.clone().unwrap_or_else(|| "a person talks to the camera".into());
    let frame_rate = reference.frame_rate;
    let req = DirectorRequest {
        user_prompt: prompt,
        audio_summary: AudioSummary::from_audio(&audio, frame_rate)?,
        reference_descriptor: if a.reference.is_none() { fixture.caption.clone() } else { String::new() },
        template_id: cfg.director.template.clone(),
    };
    let story = rewrite(&req, &cfg.director)?;
    write_atomic(&out.join("storyline.txt"), story.storyline.render().as_bytes())?;

    let gen = Generator {
        params: &state.params,
        adapter: Some(&state.adapter),
        model: &cfg.model,
        space: &space,
        config: &cfg.generation,
    };
    let mask = (a.reference.is_none()).then(|| fixture.subject_mask(space.codec.stride()));
    let result = generate_long(&gen, &References::shared(reference.clone()), &audio, &story.storyline.prompt(), plan, mask.as_deref())?;
    write_atomic(&out.join("video.wgv"), &encode_video(&result.video)?)?;
    jsonl(&out.join("windows.jsonl"), &result.diagnostics)?;
    let curve = drift_curve(&space, &result.windows, &reference, mask.as_deref())?;
    let sync = match (&a.audio, &a.reference) {
        (None, None) => {
            let n = result.video.time();
            let s = sync_correlation(&result.video, &audio.slice_frames(0, n, frame_rate)?, &fixture.head_pixel_mask())?;
            Some(s.correlation)
        }
        _ => None,
    };
    write_json(
        &out.join("summary.json"),
        &json!({
            "frames": result.video.time(),
            "windows": result.windows.len(),
            "drift_curve": curve,
            "sync_correlation": sync,
            "storyline_source": match story.source { StorySource::Endpoint => "endpoint", StorySource::Fallback => "fallback" },
            "director_downgrade": story.downgrade,
            "checkpoint_config_sha256": ck_digest,
        }),
    )?;
    Ok(())
}

pub fn cmd_dub(cfg: &RunConfig, a: &DubArgs, out: &Path) -> Result<()> {
    let (state, space, ck_digest) = load_model(cfg, a.checkpoint.as_deref())?;
    let input = read_video(&a.input)?;
    let audio = read_audio(&a.audio)?;
    let reference = a.reference.as_deref().map(read_video).transpose()?.map(|v| v.slice_frames(0, 1)).transpose()?;
    let gen = Generator {
        params: &state.params,
        adapter: Some(&state.adapter),
        model: &cfg.model,
        space: &space,
        config: &cfg.generation,
    };
    let result = dub(&gen, &input, &audio, &a.prompt, &cfg.dub, reference.as_ref())?;
    write_atomic(&out.join("video.wgv"), &encode_video(&result.video)?)?;
    jsonl(&out.join("segments.jsonl"), &result.segments)?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "frames": result.video.time(),
            "segments": result.segments.len(),
            "alpha": cfg.dub.alpha,
            "checkpoint_config_sha256": ck_digest,
        }),
    )?;
    Ok(())
}

/// Prints one line per invariant; fails if any failed.
pub fn cmd_probe(w: &mut impl Write) -> Result<()> {
    let results = probe::run_all();
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        writeln!(w, "{tag} {}/{}: {}", r.suite, r.name, r.detail)?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    writeln!(w, "{} passed, {failed} failed", results.len() - failed)?;
    probe::summarize(&results)
}
