//! Prompt rewriting into a storyline, through an external chat endpoint or
//! a local template that ranks user text above audio cues above the
//! reference image.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::audio::AudioTrack;
use crate::error::{Error, Result};

/// Mean frame RMS at or above which speech counts as energetic.
pub const ENERGETIC_RMS: f64 = 0.12;
/// Mean frame RMS below which speech counts as calm.
pub const CALM_RMS: f64 = 0.04;
/// Coefficient of variation separating lively from steady delivery.
pub const LIVELY_CV: f64 = 0.6;
/// Syllable onsets per second for the "fast" and "moderate" rate tags.
pub const FAST_ONSETS: f64 = 3.0;
pub const MODERATE_ONSETS: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioSummary {
    pub emotion: String,
    pub speaking_rate: String,
}

impl AudioSummary {
    /// Tags from frame-energy statistics.
    pub fn from_audio(audio: &AudioTrack, frame_rate: f32) -> Result<Self> {
        let env = audio.energy_envelope(frame_rate)?;
        if env.is_empty() {
            return Err(Error::InvalidArgument("audio shorter than one frame".into()));
        }
        let n = env.len() as f64;
        let mean = env.iter().sum::<f64>() / n;
        let sd = (env.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
        let cv = if mean > 0.0 { sd / mean } else { 0.0 };
        let peak = env.iter().cloned().fold(0.0, f64::max);
        let onsets = env
            .windows(2)
            .filter(|w| w[0] < 0.5 * peak && w[1] >= 0.5 * peak)
            .count() as f64;
        let rate = onsets / (n / frame_rate as f64);

        let emotion = if peak == 0.0 {
            "neutral"
        } else if mean >= ENERGETIC_RMS && cv >= LIVELY_CV {
            "joyful"
        } else if mean >= ENERGETIC_RMS {
            "intense"
        } else if mean < CALM_RMS {
            "calm"
        } else {
            "neutral"
        };
        let speaking_rate = if rate >= FAST_ONSETS {
            "fast"
        } else if rate >= MODERATE_ONSETS {
            "moderate"
        } else {
            "slow"
        };
        Ok(Self {
            emotion: emotion.into(),
            speaking_rate: speaking_rate.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectorRequest {
    pub user_prompt: String,
    pub audio_summary: AudioSummary,
    pub reference_descriptor: String,
    pub template_id: String,
}

/// Storyline sections, in prompt order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Storyline {
    pub characters: String,
    pub background: String,
    pub actions: String,
    pub emotional_shifts: String,
    pub visual_style: String,
    pub camera_plan: String,
}

const SECTIONS: [&str; 6] = [
    "characters",
    "background",
    "actions",
    "emotional shifts",
    "visual style",
    "camera plan",
];

impl Storyline {
    pub fn sections(&self) -> [&str; 6] {
        [
            &self.characters,
            &self.background,
            &self.actions,
            &self.emotional_shifts,
            &self.visual_style,
            &self.camera_plan,
        ]
    }

    fn section_mut(&mut self, i: usize) -> &mut String {
        match i {
            0 => &mut self.characters,
            1 => &mut self.background,
            2 => &mut self.actions,
            3 => &mut self.emotional_shifts,
            4 => &mut self.visual_style,
            _ => &mut self.camera_plan,
        }
    }

    /// `Heading: text` lines, the format the endpoint is asked to produce.
    pub fn render(&self) -> String {
        SECTIONS
            .iter()
            .zip(self.sections())
            .filter(|(_, body)| !body.is_empty())
            .map(|(h, body)| format!("{}: {body}", capitalize(h)))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Text conditioning string.
    pub fn prompt(&self) -> String {
        self.sections()
            .iter()
            .filter(|s| !s.is_empty())
            .cloned()
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

/// Parses `Heading: text` lines. Lines without a known heading continue
/// the previous section. Returns `None` when no heading is found.
pub fn parse_storyline(text: &str) -> Option<Storyline> {
    let mut out = Storyline::default();
    let mut current: Option<usize> = None;
    let mut found = false;
    for line in text.lines() {
        let trimmed = line.trim().trim_start_matches(['-', '*', '#', ' ']);
        let heading = trimmed.split_once(':').and_then(|(h, rest)| {
            let h = h.trim().trim_matches('*').to_lowercase().replace('_', " ");
            SECTIONS.iter().position(|s| *s == h).map(|i| (i, rest.trim()))
        });
        match (heading, current) {
            (Some((i, rest)), _) => {
                found = true;
                current = Some(i);
                append(out.section_mut(i), rest);
            }
            (None, Some(i)) => append(out.section_mut(i), trimmed.trim()),
            (None, None) => {}
        }
    }
    found.then_some(out)
}

fn append(dst: &mut String, text: &str) {
    if text.is_empty() {
        return;
    }
    if !dst.is_empty() {
        dst.push(' ');
    }
    dst.push_str(text);
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Serialize, Deserialize)]
struct ChatMessage {
    role: String,
    content: String,
}

/// Extracts the storyline from a chat-completion response body. Text
/// without headings becomes a single `actions` section; the flag reports
/// whether headings were found.
pub fn parse_response(body: &str) -> Result<(Storyline, bool)> {
    let resp: ChatResponse =
        serde_json::from_str(body).map_err(|e| Error::Endpoint(format!("unparseable response: {e}")))?;
    let content = resp
        .choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| Error::Endpoint("response has no choices".into()))?;
    match parse_storyline(&content) {
        Some(s) => Ok((s, true)),
        None => {
            log::warn!("director response has no section headings; kept as one section");
            Ok((
                Storyline {
                    actions: content.trim().to_string(),
                    ..Default::default()
                },
                false,
            ))
        }
    }
}

/// Few-shot system prompts. These are original to this crate.
pub fn template(id: &str) -> Option<&'static str> {
    match id {
        "default" => Some(
            "You turn a user request plus audio and image cues into a storyline for a talking-person video. \
Rank the user's words first, then the audio cues, then the reference image. \
Answer with exactly these headings, one per line: Characters, Background, Actions, Emotional shifts, Visual style, Camera plan.\n\
Example input: user=\"a teacher explains fractions\"; audio=calm, slow; image=\"woman in a grey cardigan before a whiteboard\"\n\
Example output:\n\
Characters: a teacher in a grey cardigan\n\
Background: a classroom whiteboard with simple diagrams\n\
Actions: explains fractions with small hand gestures, lips following the speech\n\
Emotional shifts: patient and calm throughout\n\
Visual style: soft daylight, natural colour\n\
Camera plan: static medium close-up",
        ),
        "terse" => Some(
            "Rewrite the request as a storyline with the headings Characters, Background, Actions, \
Emotional shifts, Visual style, Camera plan. User words outrank audio cues, which outrank the image.",
        ),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirectorConfig {
    /// Chat-completion URL; absent means local fallback only.
    pub url: Option<String>,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: f64,
    /// Prompt template id, see [`template`].
    pub template: String,
}

impl Default for DirectorConfig {
    fn default() -> Self {
        Self {
            url: None,
            model: "director".into(),
            token_env: "WG_DIRECTOR_TOKEN".into(),
            timeout_secs: 10.0,
            template: "default".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorySource {
    Endpoint,
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rewrite {
    pub storyline: Storyline,
    pub source: StorySource,
    /// Why the endpoint was not used, when one was configured.
    pub downgrade: Option<String>,
}

/// Deterministic template: each section lists the user's text, then the
/// audio wording, then the reference wording.
pub fn fallback(req: &DirectorRequest) -> Storyline {
    let user = req.user_prompt.trim();
    let emotion = req.audio_summary.emotion.as_str();
    let rate = req.audio_summary.speaking_rate.as_str();
    let image = req.reference_descriptor.trim();
    let join = |parts: [String; 3], default: &str| {
        let s: Vec<String> = parts.into_iter().filter(|p| !p.is_empty()).collect();
        if s.is_empty() {
            default.to_string()
        } else {
            s.join("; ")
        }
    };
    let with = |fmt: &dyn Fn(&str) -> String, v: &str| if v.is_empty() { String::new() } else { fmt(v) };
    Storyline {
        characters: join(
            [
                user.to_string(),
                format!("a {rate}-paced speaker with a {emotion} voice"),
                with(&|v| format!("looks like the reference: {v}"), image),
            ],
            "a single speaker",
        ),
        background: join(
            [
                user.to_string(),
                String::new(),
                with(&|v| format!("setting taken from the reference: {v}"), image),
            ],
            "a plain backdrop",
        ),
        actions: join(
            [
                user.to_string(),
                format!("speaks with {emotion} energy at a {rate} pace, lips following the audio"),
                with(&|_| "keeps the reference pose".to_string(), image),
            ],
            "speaks to the camera",
        ),
        emotional_shifts: join(
            [user.to_string(), format!("{emotion} tone following the audio energy"), String::new()],
            "steady",
        ),
        visual_style: join(
            [
                user.to_string(),
                String::new(),
                with(&|v| format!("consistent with the reference: {v}"), image),
            ],
            "natural light, steady exposure",
        ),
        camera_plan: join(
            [
                user.to_string(),
                format!("cuts timed to {rate} speech"),
                String::new(),
            ],
            "static medium close-up",
        ),
    }
}

fn user_message(req: &DirectorRequest) -> String {
    format!(
        "user=\"{}\"; audio={}, {}; image=\"{}\"",
        req.user_prompt, req.audio_summary.emotion, req.audio_summary.speaking_rate, req.reference_descriptor
    )
}

/// Request body sent to the endpoint.
pub fn request_body(req: &DirectorRequest, cfg: &DirectorConfig) -> Result<serde_json::Value> {
    let system = template(&req.template_id).ok_or_else(|| Error::Config {
        key: "director.template_id".into(),
        detail: format!("unknown template `{}`", req.template_id),
    })?;
    Ok(serde_json::json!({
        "model": cfg.model,
        "temperature": 0,
        "messages": [
            ChatMessage { role: "system".into(), content: system.into() },
            ChatMessage { role: "user".into(), content: user_message(req) },
        ],
    }))
}

fn call_endpoint(url: &str, req: &DirectorRequest, cfg: &DirectorConfig) -> Result<Storyline> {
    let body = request_body(req, cfg)?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs.max(0.001))))
        .build()
        .into();
    let mut r = agent.post(url);
    if let Ok(token) = std::env::var(&cfg.token_env) {
        r = r.header("Authorization", &format!("Bearer {token}"));
    }
    let mut resp = r.send_json(&body).map_err(|e| Error::Endpoint(e.to_string()))?;
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| Error::Endpoint(e.to_string()))?;
    Ok(parse_response(&text)?.0)
}

/// Rewrites through the endpoint when one is configured, otherwise (or on
/// any endpoint failure) through [`fallback`].
pub fn rewrite(req: &DirectorRequest, cfg: &DirectorConfig) -> Result<Rewrite> {
    if template(&req.template_id).is_none() {
        return Err(Error::Config {
            key: "director.template_id".into(),
            detail: format!("unknown template `{}`", req.template_id),
        });
    }
    let Some(url) = cfg.url.as_deref() else {
        return Ok(Rewrite {
            storyline: fallback(req),
            source: StorySource::Fallback,
            downgrade: None,
        });
    };
    match call_endpoint(url, req, cfg) {
        Ok(storyline) => Ok(Rewrite {
            storyline,
            source: StorySource::Endpoint,
            downgrade: None,
        }),
        Err(e) => {
            log::warn!("director endpoint failed ({e}); using the local template");
            Ok(Rewrite {
                storyline: fallback(req),
                source: StorySource::Fallback,
                downgrade: Some(e.to_string()),
            })
        }
    }
}
