//! Small diffusion transformer predicting flow velocities.
//!
//! A sequence is `[packed context | video | reference]`. Every block runs
//! modulated self-attention with three-axis rotary positions, text
//! cross-attention and an MLP; blocks in the injection set also run
//! per-latent audio cross-attention behind a zero-initialized gate. The
//! head reads video tokens only.

mod lora;
mod positions;

pub use lora::{apply_lora, LoraAdapter, WeightView};
pub use positions::{axis_pairs, rotary_table, PositionGrid, Role, Segments};

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioConfig, AudioLayers};
use crate::codec::{LatentVideo, Stride3};
use crate::error::{shape_err, Error, Result};
use crate::framepack::{self, patch_positions, patchify, unpatchify, PackPlan, Position};
use crate::numerics::{DenseArray, Graph, ParamStore, Real, Rng, RotaryTable, Var};

/// How the audio cross-attention output joins the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    /// One learned scalar per injected block.
    Scalar,
    /// A `model_dim × model_dim` output matrix.
    Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub freq_dim: usize,
    pub text_dim: usize,
    pub latent_channels: usize,
    pub patch: Stride3,
    pub audio_blocks: Vec<usize>,
    pub ref_offset: i64,
    pub gate: GateKind,
    pub rope_theta: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub audio: AudioConfig,
    pub pack: PackPlan,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            model_dim: 64,
            blocks: 6,
            heads: 4,
            ffn_dim: 128,
            freq_dim: 32,
            text_dim: 16,
            latent_channels: 16,
            patch: Stride3::new(1, 2, 2),
            audio_blocks: vec![0, 3, 5],
            ref_offset: 10,
            gate: GateKind::Matrix,
            rope_theta: 10_000.0,
            lora_rank: 8,
            lora_alpha: 8.0,
            audio: AudioConfig::default(),
            pack: PackPlan::default(),
        }
    }

    /// Full-size shape. Not exercised by tests beyond validation.
    pub fn paper_scale() -> Self {
        let mut audio_blocks: Vec<usize> = (0..30).step_by(3).collect();
        audio_blocks.push(29);
        Self {
            model_dim: 3072,
            blocks: 30,
            heads: 24,
            ffn_dim: 14_336,
            freq_dim: 256,
            text_dim: 4096,
            latent_channels: 48,
            patch: Stride3::new(1, 2, 2),
            audio_blocks,
            ref_offset: 10,
            gate: GateKind::Matrix,
            rope_theta: 10_000.0,
            lora_rank: 128,
            lora_alpha: 128.0,
            audio: AudioConfig {
                bands: 8,
                audio_dim: 1024,
                tokens_per_latent: 4,
                kernel_frames: 8,
            },
            pack: PackPlan::default(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn token_dim(&self) -> usize {
        self.latent_channels * self.patch.volume()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |key: &str, detail: String| {
            Err(Error::Config {
                key: format!("model.{key}"),
                detail,
            })
        };
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return cfg_err("heads", format!("{} heads do not divide model_dim {}", self.heads, self.model_dim));
        }
        axis_pairs(self.head_dim())?;
        if self.blocks == 0 {
            return cfg_err("blocks", "at least one block required".into());
        }
        if let Some(&b) = self.audio_blocks.iter().find(|&&b| b >= self.blocks) {
            return cfg_err("audio_blocks", format!("block {b} does not exist ({} blocks)", self.blocks));
        }
        if !self.audio_blocks.contains(&(self.blocks - 1)) {
            return cfg_err("audio_blocks", "the final block must receive audio".into());
        }
        if self.ref_offset < 1 {
            return cfg_err("ref_offset", format!("{} must be at least 1", self.ref_offset));
        }
        if self.patch.t == 0 || self.patch.h == 0 || self.patch.w == 0 {
            return cfg_err("patch", "patch sizes must be positive".into());
        }
        if self.lora_rank == 0 {
            return cfg_err("lora_rank", "must be positive".into());
        }
        self.pack.validate(self.patch)
    }

    pub fn injects_audio(&self, block: usize) -> bool {
        self.audio_blocks.contains(&block)
    }

    /// Base weights that receive LoRA adapters: every attention and MLP
    /// matrix inside the blocks.
    pub fn lora_targets(&self) -> Vec<String> {
        let mut out = Vec::new();
        for b in 0..self.blocks {
            for part in ["attn.q", "attn.k", "attn.v", "attn.o", "text.q", "text.k", "text.v", "text.o", "mlp.w1", "mlp.w2"] {
                out.push(format!("block{b}.{part}"));
            }
        }
        out
    }
}

/// Parameter names.
pub mod names {
    pub const EMBED_W: &str = "embed.video.w";
    pub const EMBED_B: &str = "embed.video.b";
    pub const TIME_W1: &str = "time.w1";
    pub const TIME_B1: &str = "time.b1";
    pub const TIME_W2: &str = "time.w2";
    pub const TIME_B2: &str = "time.b2";
    pub const HEAD_MOD_W: &str = "head.mod.w";
    pub const HEAD_MOD_B: &str = "head.mod.b";
    pub const HEAD_W: &str = "head.w";
    pub const HEAD_B: &str = "head.b";

    pub fn block(b: usize, part: &str) -> String {
        format!("block{b}.{part}")
    }

    pub fn gate(b: usize) -> String {
        block(b, "audio.gate")
    }
}

/// Seeded parameters for every weight of `cfg`. Block weights stand in for
/// a pretrained base and start frozen; the audio path, FramePack patchify
/// and gates start trainable.
/// Scale on the output projections that write into the residual stream, so
/// each block starts as a small update on its input.
pub const RESIDUAL_INIT: f64 = 0.1;

pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    let d = cfg.model_dim;
    let w = |s: &mut ParamStore<T>, rng: &mut Rng, name: &str, rows: usize, cols: usize, std: f64, frozen: bool| {
        s.insert(name, rng.normal_array(&[rows, cols], std), frozen)
    };
    let inv = |n: usize| 1.0 / (n as f64).sqrt();

    w(&mut s, &mut rng, names::EMBED_W, cfg.token_dim(), d, inv(cfg.token_dim()), true)?;
    s.insert(names::EMBED_B, DenseArray::zeros(&[d]), true)?;
    w(&mut s, &mut rng, names::TIME_W1, cfg.freq_dim, d, inv(cfg.freq_dim), true)?;
    s.insert(names::TIME_B1, DenseArray::zeros(&[d]), true)?;
    w(&mut s, &mut rng, names::TIME_W2, d, d, inv(d), true)?;
    s.insert(names::TIME_B2, DenseArray::zeros(&[d]), true)?;

    for b in 0..cfg.blocks {
        let n = |part: &str| names::block(b, part);
        w(&mut s, &mut rng, &n("mod.w"), d, 4 * d, 0.1 * inv(d), true)?;
        s.insert(n("mod.b"), DenseArray::zeros(&[4 * d]), true)?;
        for p in ["attn.q", "attn.k", "attn.v", "text.q"] {
            w(&mut s, &mut rng, &n(p), d, d, inv(d), true)?;
        }
        for p in ["attn.o", "text.o"] {
            w(&mut s, &mut rng, &n(p), d, d, RESIDUAL_INIT * inv(d), true)?;
        }
        for p in ["text.k", "text.v"] {
            w(&mut s, &mut rng, &n(p), cfg.text_dim, d, inv(cfg.text_dim), true)?;
        }
        w(&mut s, &mut rng, &n("mlp.w1"), d, cfg.ffn_dim, inv(d), true)?;
        s.insert(n("mlp.b1"), DenseArray::zeros(&[cfg.ffn_dim]), true)?;
        w(&mut s, &mut rng, &n("mlp.w2"), cfg.ffn_dim, d, RESIDUAL_INIT * inv(cfg.ffn_dim), true)?;
        s.insert(n("mlp.b2"), DenseArray::zeros(&[d]), true)?;
        if cfg.injects_audio(b) {
            let a = cfg.audio.audio_dim;
            for p in ["audio.q", "audio.o"] {
                w(&mut s, &mut rng, &n(p), d, d, inv(d), false)?;
            }
            for p in ["audio.k", "audio.v"] {
                w(&mut s, &mut rng, &n(p), a, d, inv(a), false)?;
            }
            let gate = match cfg.gate {
                GateKind::Scalar => DenseArray::zeros(&[1]),
                GateKind::Matrix => DenseArray::zeros(&[d, d]),
            };
            s.insert(names::gate(b), gate, false)?;
        }
    }
    w(&mut s, &mut rng, names::HEAD_MOD_W, d, 2 * d, 0.1 * inv(d), true)?;
    s.insert(names::HEAD_MOD_B, DenseArray::zeros(&[2 * d]), true)?;
    w(&mut s, &mut rng, names::HEAD_W, d, cfg.token_dim(), inv(d), true)?;
    s.insert(names::HEAD_B, DenseArray::zeros(&[cfg.token_dim()]), true)?;

    cfg.pack.init_params(cfg.latent_channels, d, &mut rng, &mut s)?;
    audio::init_params(&cfg.audio, &mut rng, &mut s)?;
    Ok(s)
}

/// Copies each injected block's text cross-attention into its audio
/// cross-attention where shapes agree; key/value projections from a
/// different input width are re-drawn. Gates are reset to zero.
pub fn init_audio_from_text<T: Real>(cfg: &ModelConfig, params: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
    for &b in &cfg.audio_blocks {
        for part in ["q", "k", "v", "o"] {
            let src = names::block(b, &format!("text.{part}"));
            let dst = names::block(b, &format!("audio.{part}"));
            let text = params
                .get(&src)
                .ok_or_else(|| Error::InvalidArgument(format!("missing text cross-attention weight `{src}`")))?
                .clone();
            let want = params.require(&dst)?.shape().to_vec();
            let value = if text.shape() == want.as_slice() {
                text
            } else {
                rng.normal_array(&want, 1.0 / (want[0] as f64).sqrt())
            };
            params.set(&dst, value)?;
        }
        let g = names::gate(b);
        let shape = params.require(&g)?.shape().to_vec();
        params.set(&g, DenseArray::zeros(&shape))?;
    }
    Ok(())
}

/// Conditioning inputs for one forward pass. `None` means the null
/// condition: a single zero text token, no audio path, a zero reference.
#[derive(Debug, Clone, Copy)]
pub struct Conditions<'a, T> {
    pub text: Option<&'a DenseArray<T>>,
    pub audio: Option<&'a AudioLayers>,
    pub reference: Option<&'a LatentVideo<T>>,
    pub context: Option<&'a LatentVideo<T>>,
}

impl<T> Default for Conditions<'_, T> {
    fn default() -> Self {
        Self {
            text: None,
            audio: None,
            reference: None,
            context: None,
        }
    }
}

/// Embedded tokens on a tape with their positions.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Var,
    pub grid: PositionGrid,
    pub segments: Segments,
}

/// Positions for `[context | video | reference]` given the packed context
/// positions and the video's patch grid.
pub fn assemble_positions(
    context: &[Position],
    video_latents: usize,
    token_h: usize,
    token_w: usize,
    ref_offset: i64,
) -> PositionGrid {
    let mut grid = PositionGrid::default();
    for &p in context {
        grid.push(p, Role::Context);
    }
    for t in 0..video_latents as i64 {
        for h in 0..token_h as i64 {
            for w in 0..token_w as i64 {
                grid.push(Position { t, h, w }, Role::Video);
            }
        }
    }
    let tr = video_latents as i64 - 1 + ref_offset;
    for h in 0..token_h as i64 {
        for w in 0..token_w as i64 {
            grid.push(Position { t: tr, h, w }, Role::Reference);
        }
    }
    grid
}

/// Embeds context (through FramePack), video and reference latents.
pub fn assemble_tokens<T: Real>(
    graph: &mut Graph<T>,
    view: &mut WeightView<'_, T>,
    cfg: &ModelConfig,
    context: Option<&LatentVideo<T>>,
    video: &LatentVideo<T>,
    reference: Option<&LatentVideo<T>>,
) -> Result<TokenSequence> {
    let patch = cfg.patch;
    if video.channels() != cfg.latent_channels {
        return Err(shape_err(
            "assemble_tokens",
            format!("video has {} channels, model expects {}", video.channels(), cfg.latent_channels),
        ));
    }
    let vt = patchify(video, patch)?;
    let zero_ref;
    let reference = match reference {
        Some(r) => r,
        None => {
            zero_ref = LatentVideo::zeros([1, video.channels(), video.height(), video.width()], video.stride);
            &zero_ref
        }
    };
    if reference.time() != 1 || reference.grid.shape()[1..] != video.grid.shape()[1..] {
        return Err(shape_err(
            "assemble_tokens",
            format!("reference {:?} vs video frame {:?}", reference.grid.shape(), &video.grid.shape()[1..]),
        ));
    }
    let rt = patchify(reference, patch)?;
    if let Some(c) = context {
        if c.grid.shape()[1..] != video.grid.shape()[1..] {
            return Err(shape_err(
                "assemble_tokens",
                format!("context {:?} vs video {:?}", c.grid.shape(), video.grid.shape()),
            ));
        }
    }

    let packed = framepack::pack(graph, context, &cfg.pack, patch, view.params())?;
    let ew = view.get(graph, names::EMBED_W)?;
    let eb = view.get(graph, names::EMBED_B)?;
    let nv = vt.rows();
    let both = DenseArray::concat_rows(&[&vt, &rt])?;
    let both = graph.constant(both);
    let emb = graph.linear(both, ew, Some(eb))?;
    let tokens = match packed.tokens {
        Some(c) => graph.concat_rows(&[c, emb])?,
        None => emb,
    };
    let (th, tw) = (video.height() / patch.h, video.width() / patch.w);
    let grid = assemble_positions(&packed.positions, video.time() / patch.t, th, tw, cfg.ref_offset);
    let segments = Segments {
        context: packed.positions.len(),
        video: nv,
        reference: rt.rows(),
    };
    debug_assert_eq!(segments.total(), grid.len());
    Ok(TokenSequence { tokens, grid, segments })
}

/// Sinusoidal features of `1000 t`: cosines then sines.
pub fn timestep_features(t: f64, freq_dim: usize) -> Vec<f64> {
    let half = freq_dim / 2;
    let mut out = vec![0.0; freq_dim];
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = 1000.0 * t * f;
        out[i] = a.cos();
        out[half + i] = a.sin();
    }
    out
}

pub fn time_embedding<T: Real>(graph: &mut Graph<T>, view: &mut WeightView<'_, T>, cfg: &ModelConfig, t: f64) -> Result<Var> {
    let feats = DenseArray::from_f64_slice(&[1, cfg.freq_dim], &timestep_features(t, cfg.freq_dim))?;
    let x = graph.constant(feats);
    let w1 = view.get(graph, names::TIME_W1)?;
    let b1 = view.get(graph, names::TIME_B1)?;
    let h = graph.linear(x, w1, Some(b1))?;
    let h = graph.silu(h);
    let w2 = view.get(graph, names::TIME_W2)?;
    let b2 = view.get(graph, names::TIME_B2)?;
    graph.linear(h, w2, Some(b2))
}

/// Per-latent audio tokens, checked against the video's latent length.
pub fn audio_tokens<T: Real>(
    graph: &mut Graph<T>,
    view: &WeightView<'_, T>,
    cfg: &ModelConfig,
    layers: &AudioLayers,
    stride_t: usize,
    video_latents: usize,
) -> Result<Var> {
    let frames = layers.frames();
    if frames != video_latents * stride_t {
        return Err(shape_err(
            "forward",
            format!(
                "audio covers {frames} frames ({} latents), video has {video_latents} latents",
                frames as f64 / stride_t as f64
            ),
        ));
    }
    audio::aggregate_and_compress(graph, layers, view.params(), &cfg.audio, stride_t)
}

fn text_input<T: Real>(graph: &mut Graph<T>, cfg: &ModelConfig, text: Option<&DenseArray<T>>) -> Result<Var> {
    match text {
        Some(t) if t.rows() > 0 => {
            if t.shape() != [t.rows(), cfg.text_dim] {
                return Err(shape_err(
                    "forward",
                    format!("text tokens {:?}, expected [_, {}]", t.shape(), cfg.text_dim),
                ));
            }
            Ok(graph.constant(t.clone()))
        }
        _ => Ok(graph.constant(DenseArray::zeros(&[1, cfg.text_dim]))),
    }
}

/// Multi-head attention of projected queries over projected keys/values.
fn attend<T: Real>(
    graph: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    rope: Option<(&Rc<RotaryTable<T>>, &Rc<RotaryTable<T>>)>,
) -> Result<Var> {
    let d = graph.shape(q)[1];
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut qh = graph.slice_cols(q, h * dh, dh)?;
        let mut kh = graph.slice_cols(k, h * dh, dh)?;
        if let Some((rq, rk)) = rope {
            qh = graph.rotary(qh, Rc::clone(rq))?;
            kh = graph.rotary(kh, Rc::clone(rk))?;
        }
        let vh = graph.slice_cols(v, h * dh, dh)?;
        let s = graph.matmul_bt(qh, kh)?;
        let s = graph.scale(s, scale);
        let p = graph.softmax_rows(s)?;
        outs.push(graph.matmul(p, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        graph.concat_cols(&outs)
    }
}

/// `LN(x) ⊙ (1 + scale) + shift` with `scale`/`shift` single rows.
fn modulate<T: Real>(graph: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = graph.layer_norm(x, T::from_f64(1e-6))?;
    let ones = graph.constant(DenseArray::full(graph.shape(scale), T::one()));
    let s = graph.add(scale, ones)?;
    let y = graph.mul_row(n, s)?;
    graph.add_row(y, shift)
}

fn row_vector<T: Real>(graph: &mut Graph<T>, x: Var, start: usize, len: usize) -> Result<Var> {
    let c = graph.slice_cols(x, start, len)?;
    graph.reshape(c, &[len])
}

/// Runs every block over `x` (`N × model_dim`). `audio` holds per-latent
/// tokens, `tokens_per_latent` rows per video latent frame.
#[allow(clippy::too_many_arguments)]
pub fn run_blocks<T: Real>(
    graph: &mut Graph<T>,
    view: &mut WeightView<'_, T>,
    cfg: &ModelConfig,
    mut x: Var,
    grid: &PositionGrid,
    temb: Var,
    text: Var,
    audio: Option<Var>,
) -> Result<Var> {
    let d = cfg.model_dim;
    let n = grid.len();
    if graph.shape(x) != [n, d] {
        return Err(shape_err("run_blocks", format!("tokens {:?} vs {n} positions", graph.shape(x))));
    }
    let rope = rotary_table::<T>(grid, cfg.head_dim(), cfg.rope_theta)?;
    let m = cfg.audio.tokens_per_latent;
    let frames = audio.map(|a| graph.shape(a)[0] / m).unwrap_or(0);
    let groups = grid.video_by_frame(frames);
    let act = graph.silu(temb);

    for b in 0..cfg.blocks {
        let p = |part: &str| names::block(b, part);
        let mw = view.get(graph, &p("mod.w"))?;
        let mb = view.get(graph, &p("mod.b"))?;
        let mods = graph.linear(act, mw, Some(mb))?;
        let shift1 = row_vector(graph, mods, 0, d)?;
        let scale1 = row_vector(graph, mods, d, d)?;
        let shift2 = row_vector(graph, mods, 2 * d, d)?;
        let scale2 = row_vector(graph, mods, 3 * d, d)?;

        // self-attention
        let h = modulate(graph, x, shift1, scale1)?;
        let wq = view.get(graph, &p("attn.q"))?;
        let wk = view.get(graph, &p("attn.k"))?;
        let wv = view.get(graph, &p("attn.v"))?;
        let wo = view.get(graph, &p("attn.o"))?;
        let q = graph.matmul(h, wq)?;
        let k = graph.matmul(h, wk)?;
        let v = graph.matmul(h, wv)?;
        let a = attend(graph, q, k, v, cfg.heads, Some((&rope, &rope)))?;
        let a = graph.matmul(a, wo)?;
        x = graph.add(x, a)?;

        // text cross-attention
        let h = graph.layer_norm(x, T::from_f64(1e-6))?;
        let wq = view.get(graph, &p("text.q"))?;
        let wk = view.get(graph, &p("text.k"))?;
        let wv = view.get(graph, &p("text.v"))?;
        let wo = view.get(graph, &p("text.o"))?;
        let q = graph.matmul(h, wq)?;
        let k = graph.matmul(text, wk)?;
        let v = graph.matmul(text, wv)?;
        let a = attend(graph, q, k, v, cfg.heads, None)?;
        let a = graph.matmul(a, wo)?;
        x = graph.add(x, a)?;

        // per-latent audio cross-attention
        if let (Some(audio), true) = (audio, cfg.injects_audio(b)) {
            let h = graph.layer_norm(x, T::from_f64(1e-6))?;
            let wq = view.get(graph, &p("audio.q"))?;
            let wk = view.get(graph, &p("audio.k"))?;
            let wv = view.get(graph, &p("audio.v"))?;
            let wo = view.get(graph, &p("audio.o"))?;
            let q_all = graph.matmul(h, wq)?;
            let k_all = graph.matmul(audio, wk)?;
            let v_all = graph.matmul(audio, wv)?;
            let mut outs = Vec::new();
            let mut rows = Vec::new();
            for (t, idx) in groups.iter().enumerate() {
                if idx.is_empty() {
                    continue;
                }
                let q = graph.gather_rows(q_all, idx.iter().map(|&i| Some(i)).collect())?;
                let k = graph.slice_rows(k_all, t * m, m)?;
                let v = graph.slice_rows(v_all, t * m, m)?;
                outs.push(attend(graph, q, k, v, cfg.heads, None)?);
                rows.extend_from_slice(idx);
            }
            if !outs.is_empty() {
                let cat = if outs.len() == 1 { outs[0] } else { graph.concat_rows(&outs)? };
                let cat = graph.matmul(cat, wo)?;
                let full = graph.scatter_rows(cat, rows, n)?;
                let gate = view.get(graph, &names::gate(b))?;
                let gated = match cfg.gate {
                    GateKind::Scalar => graph.mul_scalar(full, gate)?,
                    GateKind::Matrix => graph.matmul(full, gate)?,
                };
                x = graph.add(x, gated)?;
            }
        }

        // MLP
        let h = modulate(graph, x, shift2, scale2)?;
        let w1 = view.get(graph, &p("mlp.w1"))?;
        let b1 = view.get(graph, &p("mlp.b1"))?;
        let w2 = view.get(graph, &p("mlp.w2"))?;
        let b2 = view.get(graph, &p("mlp.b2"))?;
        let h = graph.linear(h, w1, Some(b1))?;
        let h = graph.silu(h);
        let h = graph.linear(h, w2, Some(b2))?;
        x = graph.add(x, h)?;
    }
    Ok(x)
}

/// Velocity rows for the given token rows (`rows × token_dim`).
pub fn head<T: Real>(
    graph: &mut Graph<T>,
    view: &mut WeightView<'_, T>,
    cfg: &ModelConfig,
    x: Var,
    temb: Var,
) -> Result<Var> {
    let d = cfg.model_dim;
    let act = graph.silu(temb);
    let mw = view.get(graph, names::HEAD_MOD_W)?;
    let mb = view.get(graph, names::HEAD_MOD_B)?;
    let mods = graph.linear(act, mw, Some(mb))?;
    let shift = row_vector(graph, mods, 0, d)?;
    let scale = row_vector(graph, mods, d, d)?;
    let h = modulate(graph, x, shift, scale)?;
    let w = view.get(graph, names::HEAD_W)?;
    let b = view.get(graph, names::HEAD_B)?;
    graph.linear(h, w, Some(b))
}

/// Predicted velocity for the video tokens of `z_t`, as `Nv × token_dim`
/// rows in patchify order.
pub fn forward<T: Real>(
    graph: &mut Graph<T>,
    view: &mut WeightView<'_, T>,
    cfg: &ModelConfig,
    z_t: &LatentVideo<T>,
    t: f64,
    cond: Conditions<'_, T>,
) -> Result<Var> {
    let seq = assemble_tokens(graph, view, cfg, cond.context, z_t, cond.reference)?;
    let temb = time_embedding(graph, view, cfg, t)?;
    let text = text_input(graph, cfg, cond.text)?;
    let audio = match cond.audio {
        Some(layers) => Some(audio_tokens(graph, view, cfg, layers, z_t.stride.t, z_t.time() / cfg.patch.t)?),
        None => None,
    };
    let x = run_blocks(graph, view, cfg, seq.tokens, &seq.grid, temb, text, audio)?;
    let xv = graph.slice_rows(x, seq.segments.context, seq.segments.video)?;
    head(graph, view, cfg, xv, temb)
}

/// Evaluates [`forward`] and reshapes the result to the latent grid.
pub fn predict_velocity<T: Real>(
    params: &ParamStore<T>,
    adapter: Option<&LoraAdapter<T>>,
    cfg: &ModelConfig,
    z_t: &LatentVideo<T>,
    t: f64,
    cond: Conditions<'_, T>,
) -> Result<LatentVideo<T>> {
    let mut graph = Graph::new();
    let mut view = WeightView::new(params, adapter);
    let v = forward(&mut graph, &mut view, cfg, z_t, t, cond)?;
    let dims = [z_t.time(), z_t.channels(), z_t.height(), z_t.width()];
    unpatchify(graph.value(v), dims, cfg.patch, z_t.stride)
}

/// Video-token positions of a latent grid, without embedding anything.
pub fn video_positions(video_latents: usize, height: usize, width: usize, patch: Stride3) -> Vec<Position> {
    patch_positions(0, video_latents * patch.t, height, width, patch, patch)
}
