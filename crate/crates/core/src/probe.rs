//! Quick invariant suites, one per module, for `wg probe`.

use serde::Serialize;

use crate::audio::{extract_layers, AudioTrack};
use crate::codec::{token_count_dims, CodecConfig, LatentCodec, LatentVideo, PixelVideo, Stride3};
use crate::config::{Preset, RunConfig};
use crate::director::{fallback, parse_response, parse_storyline, AudioSummary, DirectorRequest};
use crate::dit::{apply_lora, assemble_positions, init_audio_from_text, init_params, predict_velocity, Conditions, ModelConfig};
use crate::dubbing::noise_inject;
use crate::error::Result;
use crate::formats::{decode_audio, decode_video, encode_audio, encode_video, Checkpoint};
use crate::framepack::{PackPlan, Position};
use crate::longvideo::{generate_long, GenerationConfig, Generator, References, WindowPlan};
use crate::numerics::{finite_diff_check, DenseArray, Graph, ParamStore, ProbePlan, Rng};
use crate::pipeline::LatentSpace;
use crate::run;
use crate::sampler::{build_schedule, cfg_velocity};
use crate::synth::{make_fixture, sync_correlation, sync_offset, FixtureSpec, SYNC_CONFIDENCE_GATE};
use crate::trainer::{apply_condition_dropout, clip_grad_norm, route, Group};

#[derive(Debug, Clone, Serialize)]
pub struct ProbeResult {
    pub suite: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> std::result::Result<String, String>;

const CHECKS: &[(&str, &str, Check)] = &[
    ("numerics", "gradient oracle on a small graph", numerics_gradcheck),
    ("numerics", "rng streams reproducible", numerics_rng),
    ("latent_codec", "encode inverts decode", codec_projection),
    ("latent_codec", "4x token reduction", codec_tokens),
    ("audio_features", "features are causal", audio_causal),
    ("dit_core", "position placement", dit_positions),
    ("dit_core", "zero gate ignores audio", dit_zero_gate),
    ("dit_core", "fresh lora is a no-op", dit_lora_noop),
    ("framepack", "context ends at t=-1", framepack_positions),
    ("sampler", "schedule endpoints and truncation", sampler_schedule),
    ("sampler", "guidance at scale 1 is the conditional", sampler_cfg),
    ("trainer", "dropout rates", trainer_dropout),
    ("trainer", "gradient clipping", trainer_clip),
    ("trainer", "base blocks frozen", trainer_routing),
    ("longvideo", "carried context is bit-exact", longvideo_carry),
    ("dubbing", "noise endpoints", dubbing_endpoints),
    ("director_client", "fallback is deterministic and parses back", director_fallback),
    ("synth_world", "offset recovery and decorrelated gate", synth_offsets),
    ("cli", "containers round-trip", cli_containers),
    ("cli", "config round-trip", cli_config),
];

/// Runs every suite. Panics inside a check count as failures.
pub fn run_all() -> Vec<ProbeResult> {
    CHECKS
        .iter()
        .map(|&(suite, name, f)| {
            let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            ProbeResult { suite, name, passed, detail }
        })
        .collect()
}

fn ensure(cond: bool, detail: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(detail.into())
    }
}

fn e(err: crate::Error) -> String {
    err.to_string()
}

fn numerics_gradcheck() -> std::result::Result<String, String> {
    let mut rng = Rng::new(11);
    let mut p = ParamStore::<f64>::new();
    p.insert("x", rng.normal_array(&[4, 6], 1.0), false).map_err(e)?;
    p.insert("w", rng.normal_array(&[6, 5], 0.5), false).map_err(e)?;
    let plan = ProbePlan::sample(&p, 100, &mut rng);
    let report = finite_diff_check(
        |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let x = g.param(s, "x")?;
            let w = g.param(s, "w")?;
            let h = g.matmul(x, w)?;
            let h = g.layer_norm(h, 1e-5)?;
            let h = g.silu(h);
            let h = g.softmax_rows(h)?;
            let sq = g.mul(h, h)?;
            Ok(g.sum_all(sq))
        },
        &p,
        &plan,
        1e-5,
        1e-6,
    )
    .map_err(e)?;
    let worst = report.worst().map_or(0.0, |c| c.rel_error);
    ensure(worst < 1e-6, format!("max relative error {worst:.2e}"))?;
    Ok(format!("{} coordinates, max relative error {worst:.2e}", plan.coords.len()))
}

fn numerics_rng() -> std::result::Result<String, String> {
    let a: Vec<u64> = (0..8).map(|_| Rng::new(5).fork(3).next_u64()).collect();
    ensure(a.iter().all(|&x| x == a[0]), "fork not reproducible")?;
    ensure(Rng::new(5).fork(3).next_u64() != Rng::new(5).fork(4).next_u64(), "forks collide")?;
    Ok("forks reproducible and distinct".into())
}

fn codec_projection() -> std::result::Result<String, String> {
    let codec = LatentCodec::new(CodecConfig::default()).map_err(e)?;
    let z = LatentVideo::<f64>::new(Rng::new(1).normal_array(&[2, 16, 2, 2], 1.0), codec.stride()).map_err(e)?;
    let v = codec.decode(&z, 25.0).map_err(e)?;
    // Pixels are single precision, so the round trip is exact only to that.
    let back = codec.encode::<f64>(&v).map_err(e)?;
    let err = back.grid.max_abs_diff(&z.grid);
    ensure(err < 1e-4, format!("max error {err:.2e}"))?;
    Ok(format!("max error {err:.2e}"))
}

fn codec_tokens() -> std::result::Result<String, String> {
    let patch = Stride3::new(1, 2, 2);
    for (t, h, w) in [(16, 64, 64), (80, 256, 256), (8, 128, 64)] {
        let fine = token_count_dims(t / 4, h / 8, w / 8, patch).map_err(e)?;
        let coarse = token_count_dims(t / 4, h / 16, w / 16, patch).map_err(e)?;
        ensure(fine == 4 * coarse, format!("{fine} vs 4x{coarse} at {t}x{h}x{w}"))?;
    }
    Ok("exact at three sizes".into())
}

fn audio_causal() -> std::result::Result<String, String> {
    let mut rng = Rng::new(2);
    let samples: Vec<f32> = (0..640 * 12).map(|_| rng.normal() as f32 * 0.1).collect();
    let a = AudioTrack::new(samples.clone(), 16_000);
    let mut tail = samples;
    for s in &mut tail[640 * 8..] {
        *s *= 3.0;
    }
    let b = AudioTrack::new(tail, 16_000);
    let la = extract_layers(&a, 25.0, 8).map_err(e)?.slice_frames(0, 8).map_err(e)?;
    let lb = extract_layers(&b, 25.0, 8).map_err(e)?.slice_frames(0, 8).map_err(e)?;
    ensure(la == lb, "early frames depend on later audio")?;
    Ok("first 8 frames unchanged by later audio".into())
}

fn dit_positions() -> std::result::Result<String, String> {
    let mut rng = Rng::new(3);
    for _ in 0..50 {
        let tc = rng.below(6);
        let tv = 1 + rng.below(6);
        let off = 1 + rng.below(20) as i64;
        let ctx: Vec<Position> = (-(tc as i64)..0).map(|t| Position { t, h: 0, w: 0 }).collect();
        assemble_positions(&ctx, tv, 2, 2, off).check(tv, off).map_err(e)?;
    }
    Ok("50 random layouts".into())
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        model_dim: 32,
        blocks: 2,
        heads: 2,
        ffn_dim: 48,
        audio_blocks: vec![0, 1],
        ..ModelConfig::desk()
    }
}

fn dit_zero_gate() -> std::result::Result<String, String> {
    let cfg = tiny_model();
    let mut p = init_params::<f64>(&cfg, 1).map_err(e)?;
    init_audio_from_text(&cfg, &mut p, &mut Rng::new(2)).map_err(e)?;
    let z = LatentVideo::<f64>::new(Rng::new(3).normal_array(&[2, cfg.latent_channels, 2, 2], 1.0), Stride3::new(4, 16, 16))
        .map_err(e)?;
    let mut rng = Rng::new(4);
    let samples: Vec<f32> = (0..640 * 8).map(|_| rng.normal() as f32 * 0.1).collect();
    let layers = extract_layers(&AudioTrack::new(samples, 16_000), 25.0, cfg.audio.bands).map_err(e)?;
    let with = Conditions {
        audio: Some(&layers),
        ..Default::default()
    };
    let a = predict_velocity(&p, None, &cfg, &z, 0.6, with).map_err(e)?;
    let b = predict_velocity(&p, None, &cfg, &z, 0.6, Conditions::default()).map_err(e)?;
    ensure(a == b, "outputs differ")?;
    Ok("bit-identical".into())
}

fn dit_lora_noop() -> std::result::Result<String, String> {
    let cfg = tiny_model();
    let p = init_params::<f64>(&cfg, 1).map_err(e)?;
    let adapter = crate::dit::LoraAdapter::init(&p, &cfg.lora_targets(), 4, 4.0, &mut Rng::new(1)).map_err(e)?;
    ensure(apply_lora(&p, &adapter).map_err(e)? == p, "merged weights differ")?;
    Ok(format!("{} targets", adapter.targets.len()))
}

fn framepack_positions() -> std::result::Result<String, String> {
    let plan = PackPlan::default();
    let patch = Stride3::new(1, 2, 2);
    let cfg = tiny_model();
    let mut params = ParamStore::<f64>::new();
    plan.init_params(cfg.latent_channels, cfg.model_dim, &mut Rng::new(1), &mut params)
        .map_err(e)?;
    for lc in 1..6 {
        let ctx = LatentVideo::<f64>::new(Rng::new(lc as u64).normal_array(&[lc, cfg.latent_channels, 4, 4], 1.0), Stride3::new(4, 16, 16))
            .map_err(e)?;
        let mut g = Graph::new();
        let packed = crate::framepack::pack(&mut g, Some(&ctx), &plan, patch, &params).map_err(e)?;
        let max_t = packed.positions.iter().map(|p| p.t).max();
        ensure(max_t == Some(-1), format!("context of {lc} ends at {max_t:?}"))?;
        let n = plan.token_count(lc, 4, 4).map_err(e)?;
        ensure(packed.positions.len() == n, format!("{} tokens, plan says {n}", packed.positions.len()))?;
    }
    Ok("context lengths 1..5".into())
}

fn sampler_schedule() -> std::result::Result<String, String> {
    let s = build_schedule(50, 5.0).map_err(e)?;
    ensure(s.timesteps[0] == 1.0 && *s.timesteps.last().unwrap() == 0.0, "endpoints not pinned")?;
    ensure(s.timesteps.windows(2).all(|w| w[0] > w[1]), "not strictly decreasing")?;
    let tail = s.truncate(0.95).map_err(e)?;
    ensure(tail.iter().all(|&t| t <= 0.95), "truncated schedule exceeds 0.95")?;
    Ok(format!("{} of 50 steps at or below 0.95", tail.len() - 1))
}

fn sampler_cfg() -> std::result::Result<String, String> {
    let mut rng = Rng::new(6);
    let c: DenseArray<f64> = rng.normal_array(&[3, 4], 1.0);
    let u: DenseArray<f64> = rng.normal_array(&[3, 4], 1.0);
    ensure(cfg_velocity(&c, &u, 1.0).map_err(e)? == c, "scale 1 differs from conditional")?;
    ensure(cfg_velocity(&c, &u, 0.0).map_err(e)? == u, "scale 0 differs from unconditional")?;
    Ok("exact".into())
}

fn trainer_dropout() -> std::result::Result<String, String> {
    let mut rng = Rng::new(7);
    let mut counts = [0usize; 3];
    let n = 10_000;
    for _ in 0..n {
        let d = apply_condition_dropout([0.1; 3], &mut rng).map_err(e)?;
        counts[0] += d.text as usize;
        counts[1] += d.image as usize;
        counts[2] += d.audio as usize;
    }
    let rates: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    ensure(rates.iter().all(|r| (0.08..=0.12).contains(r)), format!("rates {rates:?}"))?;
    Ok(format!("rates {:.4} {:.4} {:.4}", rates[0], rates[1], rates[2]))
}

fn trainer_clip() -> std::result::Result<String, String> {
    let mut p = ParamStore::<f64>::new();
    p.insert("x", DenseArray::from_f64_slice(&[2], &[1.2, 1.6]).map_err(e)?, false).map_err(e)?;
    let mut g = Graph::new();
    let x = g.param(&p, "x").map_err(e)?;
    let sq = g.mul(x, x).map_err(e)?;
    let loss = g.sum_all(sq);
    // d/dx sum(x²) = 2x, norm 4.
    let mut grads = crate::numerics::grad(&g, loss, &p).map_err(e)?;
    let before = clip_grad_norm(&mut grads, 1.0);
    let after = grads.global_norm();
    ensure((before - 4.0).abs() < 1e-12 && (after - 1.0).abs() < 1e-12, format!("{before} -> {after}"))?;
    Ok(format!("{before} -> {after}"))
}

fn trainer_routing() -> std::result::Result<String, String> {
    let cfg = ModelConfig::desk();
    let unfreeze = RunConfig::default().train.unfreeze;
    let p = init_params::<f32>(&cfg, 0).map_err(e)?;
    let mut full = 0;
    for name in p.names() {
        let g = route(name, &cfg, &unfreeze);
        let base_block = name.starts_with("blocks.") && !name.contains(".audio.") && !name.contains("gate");
        ensure(!(base_block && g == Group::Full), format!("{name} trains at full lr"))?;
        full += (g == Group::Full) as usize;
    }
    Ok(format!("{full} full-lr tensors, no base block weights among them"))
}

fn longvideo_carry() -> std::result::Result<String, String> {
    let cfg = RunConfig::default();
    let model = tiny_model();
    let space = LatentSpace::new(&cfg.latent).map_err(e)?;
    let params = init_params::<f32>(&model, 0).map_err(e)?;
    let gc = GenerationConfig {
        steps: 2,
        ..Default::default()
    };
    let gen = Generator {
        params: &params,
        adapter: None,
        model: &model,
        space: &space,
        config: &gc,
    };
    let fx = make_fixture(&FixtureSpec { frames: 64, ..Default::default() }).map_err(e)?;
    let plan = WindowPlan { windows: 3, ..Default::default() };
    let out = generate_long(&gen, &References::shared(fx.video.slice_frames(0, 1).map_err(e)?), &fx.audio, "a person talking", &plan, None)
        .map_err(e)?;
    for k in 1..plan.windows {
        let prev: Vec<&PixelVideo> = out.windows[..k].iter().collect();
        let all = PixelVideo::concat(&prev).map_err(e)?;
        let n = plan.context_frames.min(all.time());
        let want = all.slice_frames(all.time() - n, n).map_err(e)?;
        ensure(out.contexts[k].as_ref() == Some(&want), format!("window {k} context differs"))?;
    }
    ensure(out.contexts[0].is_none(), "window 0 has context")?;
    Ok(format!("{} windows", plan.windows))
}

fn dubbing_endpoints() -> std::result::Result<String, String> {
    let s = Stride3::new(4, 16, 16);
    let z = LatentVideo::<f32>::new(Rng::new(8).normal_array(&[2, 4, 2, 2], 1.0), s).map_err(e)?;
    let z2 = LatentVideo::<f32>::new(Rng::new(9).normal_array(&[2, 4, 2, 2], 1.0), s).map_err(e)?;
    ensure(noise_inject(&z, 0.0, &mut Rng::new(1)).map_err(e)? == z, "alpha 0 is not identity")?;
    let a = noise_inject(&z, 1.0, &mut Rng::new(1)).map_err(e)?;
    let b = noise_inject(&z2, 1.0, &mut Rng::new(1)).map_err(e)?;
    ensure(a == b, "alpha 1 depends on the input")?;
    Ok("identity at 0, input-free at 1".into())
}

fn director_fallback() -> std::result::Result<String, String> {
    let fx = make_fixture(&FixtureSpec::default()).map_err(e)?;
    let req = DirectorRequest {
        user_prompt: "a person explains a recipe".into(),
        audio_summary: AudioSummary::from_audio(&fx.audio, 25.0).map_err(e)?,
        reference_descriptor: fx.caption.clone(),
        template_id: "default".into(),
    };
    let a = fallback(&req);
    ensure(a == fallback(&req), "fallback not deterministic")?;
    ensure(parse_storyline(&a.render()).as_ref() == Some(&a), "render does not parse back")?;
    let body = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": a.render()}}]}).to_string();
    let (b, parsed) = parse_response(&body).map_err(e)?;
    ensure(parsed && b == a, "chat response does not parse back")?;
    Ok("stable".into())
}

fn synth_offsets() -> std::result::Result<String, String> {
    let mut worst = f64::MIN;
    for d in [-10i64, -4, 0, 5, 10] {
        let fx = make_fixture(&FixtureSpec {
            frames: 128,
            audio_delay_frames: d,
            seed: 40 + d.unsigned_abs(),
            ..Default::default()
        })
        .map_err(e)?;
        let o = sync_offset(&fx.video, &fx.audio, &fx.head_pixel_mask(), 15).map_err(e)?;
        ensure(o.offset == d, format!("shift {d} estimated as {}", o.offset))?;
        let rev = sync_offset(&fx.video, &fx.audio.reversed(), &fx.head_pixel_mask(), 15).map_err(e)?;
        worst = worst.max(rev.confidence);
        ensure(
            rev.confidence < SYNC_CONFIDENCE_GATE,
            format!("reversed audio confidence {:.3}", rev.confidence),
        )?;
        let r = sync_correlation(&fx.video, &fx.audio.reversed(), &fx.head_pixel_mask()).map_err(e)?;
        ensure(r.correlation.abs() < 0.2, format!("reversed correlation {:.3}", r.correlation))?;
    }
    Ok(format!("5 shifts exact, decorrelated confidence at most {worst:.3}"))
}

fn cli_containers() -> std::result::Result<String, String> {
    let fx = make_fixture(&FixtureSpec { frames: 8, ..Default::default() }).map_err(e)?;
    ensure(decode_video(&encode_video(&fx.video).map_err(e)?).map_err(e)? == fx.video, "WGV1")?;
    ensure(decode_audio(&encode_audio(&fx.audio).map_err(e)?).map_err(e)? == fx.audio, "WGA1")?;
    let p = init_params::<f32>(&tiny_model(), 3).map_err(e)?;
    let ck = Checkpoint::from_stores([7; 32], &[&p]);
    let mut bytes = ck.encode().map_err(e)?;
    ensure(Checkpoint::decode(&bytes).map_err(e)? == ck, "WGN1")?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    ensure(
        matches!(Checkpoint::decode(&bytes), Err(crate::Error::Checksum { .. })),
        "corrupted checkpoint accepted",
    )?;
    Ok("WGV1, WGA1, WGN1 bit-exact; corruption detected".into())
}

fn cli_config() -> std::result::Result<String, String> {
    for p in [Preset::Desk, Preset::Paper] {
        let c = RunConfig::preset(p);
        let back = RunConfig::load(&c.to_toml().map_err(e)?, &[]).map_err(e)?;
        ensure(back == c, format!("{p:?} preset does not round-trip"))?;
    }
    ensure(RunConfig::load("nope = 1", &[]).is_err(), "unknown key accepted")?;
    let fresh = run::fresh_state::<f32>(&RunConfig::default()).map_err(e)?;
    Ok(format!("both presets; desk model has {} parameters", fresh.params.numel() + fresh.adapter.params.numel()))
}

/// Fails if any check failed.
pub fn summarize(results: &[ProbeResult]) -> Result<()> {
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(crate::Error::InvalidArgument(format!("failed invariants: {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_suite_passes() {
        let results = super::run_all();
        for r in &results {
            assert!(r.passed, "{}/{}: {}", r.suite, r.name, r.detail);
        }
    }
}
