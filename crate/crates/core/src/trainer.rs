//! Flow-matching training: window sampling, condition dropout, the
//! region-weighted loss, parameter routing and an AdamW loop.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::audio::{extract_layers, AudioLayers};
use crate::codec::{LatentVideo, Stride3};
use crate::dit::{forward, Conditions, LoraAdapter, ModelConfig, WeightView};
use crate::error::{shape_err, Error, Result};
use crate::framepack::patchify;
use crate::numerics::{grad_many, DenseArray, Gradients, Graph, ParamStore, Real, Rng, Var};
use crate::pipeline::LatentSpace;
use crate::sampler::shift_time;
use crate::synth::{FixtureRecord, RoiMasks};
use crate::text::encode_text;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiLossWeights {
    pub full: f64,
    pub body: f64,
    pub face: f64,
}

impl Default for RoiLossWeights {
    fn default() -> Self {
        Self {
            full: 1.0,
            body: 1.0,
            face: 1.0,
        }
    }
}

impl RoiLossWeights {
    pub fn normalizer(&self) -> f64 {
        self.full + self.body + self.face
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.full, self.body, self.face].iter().all(|w| *w >= 0.0 && w.is_finite());
        if !ok || self.normalizer() <= 0.0 {
            return Err(Error::Config {
                key: "train.roi".into(),
                detail: "weights must be non-negative with a positive sum".into(),
            });
        }
        Ok(())
    }

    /// `(w_full·L_full + w_body·L_body + w_face·L_face) / Z`.
    pub fn combine(&self, full: f64, body: f64, face: f64) -> f64 {
        (self.full * full + self.body * body + self.face * face) / self.normalizer()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_full: f64,
    pub lr_lora: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub dropout_text: f64,
    pub dropout_image: f64,
    pub dropout_audio: f64,
    /// Context frames `Tc`.
    pub context_frames: usize,
    /// Video frames `Tv`.
    pub video_frames: usize,
    pub batch_size: usize,
    pub accumulation: usize,
    pub steps: usize,
    /// Shift applied to uniformly drawn training times.
    pub timestep_shift: f64,
    /// Name prefixes outside the audio path that train at `lr_full`.
    pub unfreeze: Vec<String>,
    pub roi: RoiLossWeights,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    /// Items in the fixed evaluation batch.
    pub eval_batch: usize,
    pub max_text_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk defaults: learning rates raised from the full-scale values with
    /// their 10× ratio kept.
    pub fn desk() -> Self {
        Self {
            lr_full: 2e-3,
            lr_lora: 2e-2,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            dropout_text: 0.1,
            dropout_image: 0.1,
            dropout_audio: 0.1,
            context_frames: 12,
            video_frames: 16,
            batch_size: 4,
            accumulation: 4,
            steps: 200,
            timestep_shift: 5.0,
            unfreeze: vec!["embed.".into(), "time.".into(), "head.".into()],
            roi: RoiLossWeights::default(),
            checkpoint_every: 100,
            eval_every: 50,
            eval_batch: 8,
            max_text_tokens: 16,
        }
    }

    pub fn paper() -> Self {
        Self {
            lr_full: 1e-5,
            lr_lora: 1e-4,
            context_frames: 72,
            video_frames: 80,
            ..Self::desk()
        }
    }

    pub fn validate(&self, stride_t: usize) -> Result<()> {
        let err = |key: &str, detail: String| {
            Err(Error::Config {
                key: format!("train.{key}"),
                detail,
            })
        };
        for (k, p) in [
            ("dropout_text", self.dropout_text),
            ("dropout_image", self.dropout_image),
            ("dropout_audio", self.dropout_audio),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(k, format!("{p} outside [0, 1]"));
            }
        }
        if self.video_frames == 0 || !self.video_frames.is_multiple_of(stride_t) {
            return err("video_frames", format!("{} must be a positive multiple of {stride_t}", self.video_frames));
        }
        if !self.context_frames.is_multiple_of(stride_t) {
            return err("context_frames", format!("{} must be a multiple of {stride_t}", self.context_frames));
        }
        if self.batch_size == 0 || self.accumulation == 0 {
            return err("batch_size", "batch size and accumulation must be positive".into());
        }
        if !(self.grad_clip_norm > 0.0) {
            return err("grad_clip_norm", "must be positive".into());
        }
        for (k, v) in [("lr_full", self.lr_full), ("lr_lora", self.lr_lora)] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(k, format!("{v} is not a valid learning rate"));
            }
        }
        self.roi.validate()
    }
}

/// Optimizer group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Frozen,
    Full,
    /// Frozen base weight that carries a LoRA adapter.
    LoraTarget,
}

/// Routes a base parameter name. The audio path, FramePack patchify and
/// gates always train in full; `unfreeze` prefixes join them.
pub fn route(name: &str, model: &ModelConfig, unfreeze: &[String]) -> Group {
    let audio_path = name.starts_with("audio.") || name.contains(".audio.");
    if audio_path || name.starts_with("framepack.") || unfreeze.iter().any(|p| name.starts_with(p.as_str())) {
        Group::Full
    } else if model.lora_targets().iter().any(|t| t == name) {
        Group::LoraTarget
    } else {
        Group::Frozen
    }
}

/// Sets freeze flags from [`route`]: only the full group stays trainable.
pub fn apply_routing<T: Real>(params: &mut ParamStore<T>, model: &ModelConfig, unfreeze: &[String]) -> Result<()> {
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for n in names {
        params.set_frozen(&n, route(&n, model, unfreeze) != Group::Full)?;
    }
    Ok(())
}

/// Frame ranges picked from one clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    /// `(start, len)` of the context, absent in the zero-context branch.
    pub context: Option<(usize, usize)>,
    pub video_start: usize,
    pub video_len: usize,
    pub reference: usize,
    /// No frame followed the window; the last video frame was used.
    pub reference_fallback: bool,
}

/// Mixed-length window sampling. Clips of at least `Tc + Tv` frames give a
/// context followed by the video window; shorter ones give a video window
/// only. Starts are multiples of `align`.
pub fn sample_training_window(len: usize, tc: usize, tv: usize, align: usize, rng: &mut Rng) -> Result<Window> {
    if len < tv {
        return Err(Error::ClipTooShort { len, needed: tv });
    }
    let align = align.max(1);
    let (context, video_start) = if tc > 0 && len >= tc + tv {
        let start = rng.below((len - tc - tv) / align + 1) * align;
        (Some((start, tc)), start + tc)
    } else {
        (None, rng.below((len - tv) / align + 1) * align)
    };
    let end = video_start + tv;
    let (reference, reference_fallback) = if end < len {
        (end + rng.below(len - end), false)
    } else {
        (end - 1, true)
    };
    Ok(Window {
        context,
        video_start,
        video_len: tv,
        reference,
        reference_fallback,
    })
}

/// Which conditions were replaced by their null value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DropDecision {
    pub text: bool,
    pub image: bool,
    pub audio: bool,
}

impl DropDecision {
    pub fn names(&self) -> Vec<String> {
        [("text", self.text), ("image", self.image), ("audio", self.audio)]
            .iter()
            .filter(|(_, d)| *d)
            .map(|(n, _)| n.to_string())
            .collect()
    }
}

/// Independent drops with the given probabilities (text, image, audio).
pub fn apply_condition_dropout(probs: [f64; 3], rng: &mut Rng) -> Result<DropDecision> {
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0, 1]")));
    }
    Ok(DropDecision {
        text: rng.bernoulli(probs[0]),
        image: rng.bernoulli(probs[1]),
        audio: rng.bernoulli(probs[2]),
    })
}

/// Per-clip inputs computed once.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub fixture: FixtureRecord,
    pub layers: AudioLayers,
    pub text: DenseArray<f32>,
    pub masks: RoiMasks,
}

impl PreparedClip {
    pub fn new(fixture: FixtureRecord, model: &ModelConfig, space: &LatentSpace, max_text_tokens: usize) -> Result<Self> {
        let layers = extract_layers(&fixture.audio, fixture.video.frame_rate, model.audio.bands)?;
        let text = encode_text(&fixture.caption, model.text_dim, max_text_tokens);
        let masks = fixture.roi_masks(space.codec.stride());
        Ok(Self {
            fixture,
            layers,
            text,
            masks,
        })
    }

    pub fn frames(&self) -> usize {
        self.fixture.video.time()
    }
}

/// One training item in latent space.
#[derive(Debug, Clone)]
pub struct TrainingSample<T> {
    pub z0: LatentVideo<T>,
    pub context: Option<LatentVideo<T>>,
    pub reference: LatentVideo<T>,
    pub text: DenseArray<T>,
    pub audio: AudioLayers,
    pub masks: RoiMasks,
}

impl<T: Real> TrainingSample<T> {
    pub fn from_window(clip: &PreparedClip, w: &Window, space: &LatentSpace) -> Result<Self> {
        let v = &clip.fixture.video;
        let st = space.codec.stride().t;
        let z0 = space.encode(&v.slice_frames(w.video_start, w.video_len)?)?;
        let context = match w.context {
            Some((s, l)) if l > 0 => Some(space.encode(&v.slice_frames(s, l)?)?),
            _ => None,
        };
        let reference = space.encode_still(v, w.reference)?;
        Ok(Self {
            z0,
            context,
            reference,
            text: clip.text.cast(),
            audio: clip.layers.slice_frames(w.video_start, w.video_len)?,
            masks: clip.masks.slice(w.video_start / st, w.video_len / st),
        })
    }
}

/// A sample with its noise draw and dropout decisions fixed.
#[derive(Debug, Clone)]
pub struct BatchItem<T> {
    pub sample: TrainingSample<T>,
    pub t: f64,
    pub eps: DenseArray<T>,
    pub drop: DropDecision,
}

/// Region loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub total: f64,
    pub full: f64,
    pub body: f64,
    pub face: f64,
    /// The face mask was empty and the body mask stood in.
    pub face_fallback: bool,
}

/// Element masks in patchified layout for every cell selected by `cells`.
fn token_mask<T: Real>(cells: &[Vec<bool>], lh: usize, lw: usize, channels: usize, patch: Stride3) -> Result<DenseArray<T>> {
    let lt = cells.len();
    let mut grid = vec![T::zero(); lt * channels * lh * lw];
    for (t, m) in cells.iter().enumerate() {
        for c in 0..channels {
            for y in 0..lh {
                for x in 0..lw {
                    if m[y * lw + x] {
                        grid[((t * channels + c) * lh + y) * lw + x] = T::one();
                    }
                }
            }
        }
    }
    let z = LatentVideo::new(DenseArray::new(vec![lt, channels, lh, lw], grid)?, Stride3::new(1, 1, 1))?;
    patchify(&z, patch)
}

/// Region-weighted squared error of `pred` against `target`, both in
/// patchified layout.
pub fn roi_loss<T: Real>(
    graph: &mut Graph<T>,
    pred: Var,
    target: &DenseArray<T>,
    masks: &RoiMasks,
    weights: &RoiLossWeights,
    channels: usize,
    patch: Stride3,
) -> Result<(Var, bool)> {
    if graph.shape(pred) != target.shape() {
        return Err(shape_err("flow_loss", format!("{:?} vs {:?}", graph.shape(pred), target.shape())));
    }
    let tgt = graph.constant(target.clone());
    let diff = graph.sub(pred, tgt)?;
    let sq = graph.mul(diff, diff)?;
    let full = graph.mean_all(sq);

    let mut region = |cells: &[Vec<bool>]| -> Result<Option<Var>> {
        let m = token_mask::<T>(cells, masks.latent_h, masks.latent_w, channels, patch)?;
        let count = m.sum().as_f64();
        if count == 0.0 {
            return Ok(None);
        }
        let mv = graph.constant(m);
        let s = graph.mul(sq, mv)?;
        let s = graph.sum_all(s);
        Ok(Some(graph.scale(s, T::from_f64(1.0 / count))))
    };
    let body = region(&masks.body)?.unwrap_or(full);
    let (face, fallback) = match region(&masks.face)? {
        Some(f) => (f, false),
        None => {
            log::warn!("empty face mask; face loss uses the body mask");
            (body, true)
        }
    };
    let z = weights.normalizer();
    let a = graph.scale(full, T::from_f64(weights.full / z));
    let b = graph.scale(body, T::from_f64(weights.body / z));
    let c = graph.scale(face, T::from_f64(weights.face / z));
    let ab = graph.add(a, b)?;
    let total = graph.add(ab, c)?;
    Ok((total, fallback))
}

/// Builds the loss of one batch item on `graph`.
pub fn flow_loss_graph<T: Real>(
    graph: &mut Graph<T>,
    view: &mut WeightView<'_, T>,
    model: &ModelConfig,
    item: &BatchItem<T>,
    weights: &RoiLossWeights,
) -> Result<(Var, LossValues)> {
    let s = &item.sample;
    if item.eps.shape() != s.z0.grid.shape() {
        return Err(shape_err("flow_loss", format!("noise {:?} vs latent {:?}", item.eps.shape(), s.z0.grid.shape())));
    }
    let t = T::from_f64(item.t);
    let one = T::one();
    let zt = s.z0.grid.zip_map(&item.eps, "flow_loss", |z, e| (one - t) * z + t * e)?;
    let v = item.eps.sub(&s.z0.grid)?;
    let zt = LatentVideo::new(zt, s.z0.stride)?;
    let target = patchify(&LatentVideo::new(v, s.z0.stride)?, model.patch)?;
    let cond = Conditions {
        text: (!item.drop.text).then_some(&s.text),
        audio: (!item.drop.audio).then_some(&s.audio),
        reference: (!item.drop.image).then_some(&s.reference),
        context: s.context.as_ref(),
    };
    let pred = forward(graph, view, model, &zt, item.t, cond)?;
    let (total, fallback) = roi_loss(graph, pred, &target, &s.masks, weights, model.latent_channels, model.patch)?;

    // Component values for reporting.
    let pv = graph.value(pred).clone();
    let mut parts = [0.0; 3];
    let masks = [None, Some(&s.masks.body), Some(&s.masks.face)];
    for (slot, m) in parts.iter_mut().zip(masks) {
        let w = match m {
            None => None,
            Some(cells) => Some(token_mask::<T>(cells, s.masks.latent_h, s.masks.latent_w, model.latent_channels, model.patch)?),
        };
        let (mut num, mut den) = (0.0, 0.0);
        for (i, (&p, &q)) in pv.data().iter().zip(target.data()).enumerate() {
            let wi = w.as_ref().map_or(1.0, |w| w.data()[i].as_f64());
            let d = (p - q).as_f64();
            num += wi * d * d;
            den += wi;
        }
        *slot = if den > 0.0 { num / den } else { f64::NAN };
    }
    if parts[1].is_nan() {
        parts[1] = parts[0];
    }
    if fallback || parts[2].is_nan() {
        parts[2] = parts[1];
    }
    Ok((
        total,
        LossValues {
            total: graph.value(total).data()[0].as_f64(),
            full: parts[0],
            body: parts[1],
            face: parts[2],
            face_fallback: fallback,
        },
    ))
}

/// Loss of one item without gradients.
pub fn flow_loss<T: Real>(
    params: &ParamStore<T>,
    adapter: Option<&LoraAdapter<T>>,
    model: &ModelConfig,
    item: &BatchItem<T>,
    weights: &RoiLossWeights,
) -> Result<LossValues> {
    let mut g = Graph::new();
    let mut view = WeightView::new(params, adapter);
    Ok(flow_loss_graph(&mut g, &mut view, model, item, weights)?.1)
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale_all(T::from_f64(max_norm / norm));
    }
    norm
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: IndexMap<String, DenseArray<T>>,
    pub v: IndexMap<String, DenseArray<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Applies one update to every parameter of `store` that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = store.get_mut(&name).expect("listed");
            if p.shape() != g.shape() {
                return Err(shape_err("adamw", format!("`{name}`: {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| DenseArray::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| DenseArray::zeros(g.shape()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gf = gi.as_f64();
                let mf = self.beta1 * mi.as_f64() + (1.0 - self.beta1) * gf;
                let vf = self.beta2 * vi.as_f64() + (1.0 - self.beta2) * gf * gf;
                *mi = T::from_f64(mf);
                *vi = T::from_f64(vf);
                let wf = w.as_f64();
                let upd = (mf / bc1) / ((vf / bc2).sqrt() + self.eps);
                *w = T::from_f64(wf - lr * (upd + self.weight_decay * wf));
            }
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub loss_full: f64,
    pub loss_body: f64,
    pub loss_face: f64,
    pub grad_norm: f64,
    pub dropped_modalities: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_loss: Option<f64>,
}

/// Parameters, adapter and optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub params: ParamStore<T>,
    pub adapter: LoraAdapter<T>,
    pub opt: AdamW<T>,
    pub step: usize,
}

impl<T: Real> TrainState<T> {
    /// Routes `params`, then attaches a fresh adapter to every LoRA target.
    pub fn new(mut params: ParamStore<T>, model: &ModelConfig, cfg: &TrainConfig, rng: &mut Rng) -> Result<Self> {
        apply_routing(&mut params, model, &cfg.unfreeze)?;
        let targets: Vec<String> = model
            .lora_targets()
            .into_iter()
            .filter(|t| route(t, model, &cfg.unfreeze) == Group::LoraTarget)
            .collect();
        let adapter = LoraAdapter::init(&params, &targets, model.lora_rank, model.lora_alpha, rng)?;
        Ok(Self {
            params,
            adapter,
            opt: AdamW::new(cfg),
            step: 0,
        })
    }
}

/// Draws a batch: window, noise, time and dropout per item.
pub fn draw_batch<T: Real>(
    clips: &[PreparedClip],
    cfg: &TrainConfig,
    space: &LatentSpace,
    size: usize,
    dropout: bool,
    rng: &mut Rng,
) -> Result<Vec<BatchItem<T>>> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("no training clips".into()));
    }
    let stride_t = space.codec.stride().t;
    let mut out = Vec::with_capacity(size);
    let mut attempts = 0;
    while out.len() < size {
        attempts += 1;
        if attempts > 100 * size {
            return Err(Error::InvalidArgument("every clip is shorter than the video window".into()));
        }
        let clip = &clips[rng.below(clips.len())];
        let w = match sample_training_window(clip.frames(), cfg.context_frames, cfg.video_frames, stride_t, rng) {
            Ok(w) => w,
            Err(Error::ClipTooShort { len, needed }) => {
                log::debug!("skipping clip of {len} frames (< {needed})");
                continue;
            }
            Err(e) => return Err(e),
        };
        let sample = TrainingSample::from_window(clip, &w, space)?;
        let mut u = rng.uniform();
        while u == 0.0 {
            u = rng.uniform();
        }
        let t = shift_time(u, cfg.timestep_shift);
        let eps = rng.normal_array(sample.z0.grid.shape(), 1.0);
        let drop = if dropout {
            apply_condition_dropout([cfg.dropout_text, cfg.dropout_image, cfg.dropout_audio], rng)?
        } else {
            DropDecision::default()
        };
        out.push(BatchItem { sample, t, eps, drop });
    }
    Ok(out)
}

/// Mean gradient and loss over `batch`.
pub fn batch_gradients<T: Real>(
    state: &TrainState<T>,
    model: &ModelConfig,
    batch: &[BatchItem<T>],
    weights: &RoiLossWeights,
) -> Result<(Gradients<T>, LossValues)> {
    let mut acc: Option<Gradients<T>> = None;
    let mut mean = LossValues::default();
    let k = 1.0 / batch.len() as f64;
    for item in batch {
        let mut g = Graph::new();
        let mut view = WeightView::new(&state.params, Some(&state.adapter));
        let (loss, vals) = flow_loss_graph(&mut g, &mut view, model, item, weights)?;
        let grads = grad_many(&g, loss, &[&state.params, &state.adapter.params])?;
        match acc.as_mut() {
            None => {
                let mut first = grads;
                first.scale_all(T::from_f64(k));
                acc = Some(first);
            }
            Some(a) => a.axpy(T::from_f64(k), &grads),
        }
        mean.total += k * vals.total;
        mean.full += k * vals.full;
        mean.body += k * vals.body;
        mean.face += k * vals.face;
        mean.face_fallback |= vals.face_fallback;
    }
    Ok((acc.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?, mean))
}

/// Gradient, clip and update. On a non-finite loss or gradient the state is
/// left untouched and an error is returned.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    batches: &[Vec<BatchItem<T>>],
) -> Result<MetricsRecord> {
    let mut total: Option<Gradients<T>> = None;
    let mut loss = LossValues::default();
    let k = 1.0 / batches.len() as f64;
    let mut dropped = Vec::new();
    for b in batches {
        let (g, l) = batch_gradients(state, model, b, &cfg.roi)?;
        match total.as_mut() {
            None => {
                let mut g = g;
                g.scale_all(T::from_f64(k));
                total = Some(g);
            }
            Some(t) => t.axpy(T::from_f64(k), &g),
        }
        loss.total += k * l.total;
        loss.full += k * l.full;
        loss.body += k * l.body;
        loss.face += k * l.face;
        for item in b {
            for n in item.drop.names() {
                if !dropped.contains(&n) {
                    dropped.push(n);
                }
            }
        }
    }
    let mut grads = total.ok_or_else(|| Error::InvalidArgument("no batches".into()))?;
    let norm = grads.global_norm();
    if !loss.total.is_finite() || !norm.is_finite() {
        log::warn!("step {}: non-finite loss or gradient; state restored", state.step);
        return Err(Error::NonFiniteLoss { step: state.step });
    }
    clip_grad_norm(&mut grads, cfg.grad_clip_norm);
    state.opt.step += 1;
    state.opt.update(&mut state.params, &grads, cfg.lr_full)?;
    state.opt.update(&mut state.adapter.params, &grads, cfg.lr_lora)?;
    state.step += 1;
    Ok(MetricsRecord {
        step: state.step,
        loss: loss.total,
        loss_full: loss.full,
        loss_body: loss.body,
        loss_face: loss.face,
        grad_norm: norm,
        dropped_modalities: dropped,
        eval_loss: None,
    })
}

/// Mean loss over a fixed batch.
pub fn eval_loss<T: Real>(state: &TrainState<T>, model: &ModelConfig, batch: &[BatchItem<T>], weights: &RoiLossWeights) -> Result<f64> {
    let mut s = 0.0;
    for item in batch {
        s += flow_loss(&state.params, Some(&state.adapter), model, item, weights)?.total;
    }
    Ok(s / batch.len() as f64)
}

/// Runs `cfg.steps` steps, calling `on_record` after each. Returns the
/// evaluation loss before and after.
pub fn train<T: Real>(
    state: &mut TrainState<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    clips: &[PreparedClip],
    space: &LatentSpace,
    seed: u64,
    mut on_record: impl FnMut(&MetricsRecord, &TrainState<T>) -> Result<()>,
) -> Result<(f64, f64)> {
    let eval_batch = draw_batch::<T>(clips, cfg, space, cfg.eval_batch, false, &mut Rng::new(seed).fork(1))?;
    let initial = eval_loss(state, model, &eval_batch, &cfg.roi)?;
    let mut rng = Rng::new(seed).fork(2);
    let mut last = initial;
    for i in 0..cfg.steps {
        let batches: Vec<_> = (0..cfg.accumulation)
            .map(|_| draw_batch::<T>(clips, cfg, space, cfg.batch_size, true, &mut rng))
            .collect::<Result<_>>()?;
        let mut rec = match train_step(state, model, cfg, &batches) {
            Ok(r) => r,
            Err(Error::NonFiniteLoss { step }) => {
                log::warn!("skipped step {step}");
                continue;
            }
            Err(e) => return Err(e),
        };
        if i + 1 == cfg.steps || (cfg.eval_every > 0 && (i + 1) % cfg.eval_every == 0) {
            last = eval_loss(state, model, &eval_batch, &cfg.roi)?;
            rec.eval_loss = Some(last);
        }
        if i == 0 {
            log::info!("initial eval loss {initial:.4}");
        }
        on_record(&rec, state)?;
    }
    Ok((initial, last))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roi_combination_example() {
        let w = RoiLossWeights::default();
        assert!((w.combine(0.3, 0.6, 0.9) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn windows_follow_length_branches() {
        let mut rng = Rng::new(0);
        let w = sample_training_window(200, 72, 80, 4, &mut rng).unwrap();
        assert!(w.context.is_some());
        let w = sample_training_window(100, 72, 80, 4, &mut rng).unwrap();
        assert!(w.context.is_none());
        for _ in 0..20 {
            let w = sample_training_window(152, 72, 80, 4, &mut rng).unwrap();
            assert_eq!(w.context, Some((0, 72)));
            assert_eq!(w.video_start, 72);
            assert!(w.reference_fallback && w.reference == 151);
        }
        assert!(matches!(
            sample_training_window(10, 4, 16, 4, &mut rng),
            Err(Error::ClipTooShort { .. })
        ));
    }

    #[test]
    fn reference_comes_after_the_window() {
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let w = sample_training_window(64, 12, 16, 4, &mut rng).unwrap();
            let end = w.video_start + w.video_len;
            assert!(w.reference >= end || (w.reference_fallback && end == 64));
        }
    }

    #[test]
    fn dropout_extremes() {
        let mut rng = Rng::new(1);
        assert_eq!(apply_condition_dropout([0.0; 3], &mut rng).unwrap(), DropDecision::default());
        let all = apply_condition_dropout([1.0; 3], &mut rng).unwrap();
        assert!(all.text && all.image && all.audio);
        assert!(apply_condition_dropout([1.5, 0.0, 0.0], &mut rng).is_err());
    }

    #[test]
    fn clip_halves_norm_two() {
        let mut g = Gradients {
            by_name: IndexMap::from([("w".to_string(), DenseArray::<f64>::from_rows(&[&[2.0, 0.0]]))]),
            diagnostics: vec![],
        };
        assert_eq!(clip_grad_norm(&mut g, 1.0), 2.0);
        assert_eq!(g.get("w").unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn lora_group_moves_ten_times_further() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            lr_full: 1e-3,
            lr_lora: 1e-2,
            ..TrainConfig::desk()
        };
        let mut full = ParamStore::<f64>::new();
        full.insert("f", DenseArray::zeros(&[1, 1]), false).unwrap();
        let mut lora = ParamStore::<f64>::new();
        lora.insert("l", DenseArray::zeros(&[1, 1]), false).unwrap();
        let grads = Gradients {
            by_name: IndexMap::from([
                ("f".to_string(), DenseArray::from_rows(&[&[0.5]])),
                ("l".to_string(), DenseArray::from_rows(&[&[0.5]])),
            ]),
            diagnostics: vec![],
        };
        let mut opt = AdamW::new(&cfg);
        opt.step = 1;
        opt.update(&mut full, &grads, cfg.lr_full).unwrap();
        opt.update(&mut lora, &grads, cfg.lr_lora).unwrap();
        let (df, dl) = (full.get("f").unwrap().data()[0], lora.get("l").unwrap().data()[0]);
        assert!((dl / df - 10.0).abs() < 1e-9, "{df} {dl}");
    }

    #[test]
    fn routing_partitions_names() {
        let model = ModelConfig::desk();
        let p = crate::dit::init_params::<f32>(&model, 0).unwrap();
        let unfreeze = TrainConfig::desk().unfreeze;
        for n in p.names() {
            let g = route(n, &model, &unfreeze);
            if n.contains(".audio.") || n.starts_with("framepack.") || n.starts_with("audio.") {
                assert_eq!(g, Group::Full, "{n}");
            }
            if n.starts_with("block") && n.contains(".attn.") {
                assert_eq!(g, Group::LoraTarget, "{n}");
            }
        }
        assert_eq!(route("block0.mod.w", &model, &unfreeze), Group::Frozen);
    }
}
