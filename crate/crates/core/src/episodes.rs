//! Episode datasets: synthetic generation with the scripted expert,
//! windowing into training samples at 1 Hz, clip filtering through a
//! text-completion client, and the `SWEP` container.

use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{self, FormatError, Reader, Writer};
use crate::geom::{self, Point};
use crate::metrics::Scenario;
use crate::perception::{
    self, FrameObservation, PerceptionConfig, PerceptionError, Provider, SeededProvider, ViewSource,
};
use crate::policy::{ObservationWindow, TrainingSample};
use crate::sim::{self, Camera, PlannerConfig, RobotState, Scene, SceneProvider, SimError, Template};

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("episode generation failed: {0}")]
    Generation(#[from] SimError),
    #[error("invalid episode: {0}")]
    Invalid(String),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Imported,
}

/// A 1 Hz demonstration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: u64,
    /// With `template`, regenerates the world the frames were rendered in.
    pub world_seed: u64,
    pub template: Template,
    pub frames: Vec<FrameObservation>,
    pub positions: Vec<Point>,
    pub headings: Vec<f64>,
    pub timestamps: Vec<f64>,
    pub scenario: Scenario,
    pub source: Source,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<(), EpisodeError> {
        let n = self.positions.len();
        if self.frames.len() != n || self.headings.len() != n || self.timestamps.len() != n {
            return Err(EpisodeError::Invalid(format!(
                "episode {}: {} frames, {} positions, {} headings, {} timestamps",
                self.episode_id,
                self.frames.len(),
                n,
                self.headings.len(),
                self.timestamps.len()
            )));
        }
        for (i, w) in self.timestamps.windows(2).enumerate() {
            if (w[1] - w[0] - 1.0).abs() > 1e-9 {
                return Err(EpisodeError::Invalid(format!(
                    "episode {}: timestamps {} and {} are not 1 s apart",
                    self.episode_id,
                    i,
                    i + 1
                )));
            }
        }
        if self
            .positions
            .iter()
            .flatten()
            .chain(&self.headings)
            .any(|v| !v.is_finite())
        {
            return Err(EpisodeError::Invalid(format!(
                "episode {}: non-finite pose",
                self.episode_id
            )));
        }
        Ok(())
    }

    /// The generating scene of a synthetic episode.
    pub fn scene(&self) -> Result<Scene, EpisodeError> {
        if self.source != Source::Synthetic {
            return Err(EpisodeError::Invalid(format!(
                "episode {} is imported and has no world",
                self.episode_id
            )));
        }
        Ok(sim::generate_scene(
            self.world_seed,
            self.template,
            &PlannerConfig::default(),
        )?)
    }

    /// Scene provider for a synthetic episode's frames.
    pub fn provider(&self) -> Result<SceneProvider, EpisodeError> {
        Ok(SceneProvider::new(Arc::new(self.scene()?.world)))
    }
}

/// Expert demonstration in the world of `(seed, template)`: `context_n − 1`
/// standing frames, the walk at 1.2 m/s, then standing at the goal until
/// `length_s` frames. Longer walks are cut at `length_s`.
pub fn generate_synthetic_episode(
    seed: u64,
    template: Template,
    length_s: usize,
    context_n: usize,
) -> Result<EpisodeRecord, EpisodeError> {
    if context_n == 0 || length_s < 2 * context_n {
        return Err(EpisodeError::Invalid(format!(
            "length {length_s} s is shorter than twice the context ({context_n})"
        )));
    }
    let scene = sim::generate_scene(seed, template, &PlannerConfig::default())?;
    let lead = context_n - 1;
    let ex = sim::scripted_expert(&scene.world, &scene.route, 1.2, lead, length_s)?;
    let camera = Camera::default();
    let positions: Vec<Point> = ex.positions[..length_s].to_vec();
    let headings: Vec<f64> = ex.headings[..length_s].to_vec();
    let frames = positions
        .iter()
        .zip(&headings)
        .enumerate()
        .map(|(t, (p, h))| {
            camera.frame(&RobotState {
                position: *p,
                heading: *h,
                time_s: t as f64,
            })
        })
        .collect();
    Ok(EpisodeRecord {
        episode_id: seed,
        world_seed: seed,
        template,
        frames,
        positions,
        headings,
        timestamps: (0..length_s).map(|t| t as f64).collect(),
        scenario: template.scenario(),
        source: Source::Synthetic,
    })
}

/// Episodes with ids `first_id..first_id + count`, templates in rotation.
pub fn generate_dataset(
    first_id: u64,
    count: usize,
    length_s: usize,
    context_n: usize,
) -> Result<Vec<EpisodeRecord>, EpisodeError> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let id = first_id + i;
            generate_synthetic_episode(id, Template::ALL[(id % 6) as usize], length_s, context_n)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub context_n: usize,
    pub horizon: usize,
    /// Arrival radius for `gt_arrived`, meters.
    pub radius_m: f64,
    /// Seeds the sub-goal offsets.
    pub seed: u64,
}

/// Decision times `t` with a full context and a full horizon.
pub fn window_range(len: usize, context_n: usize, horizon: usize) -> Range<usize> {
    if context_n == 0 || len < context_n + horizon {
        return 0..0;
    }
    context_n - 1..len - horizon
}

/// Sliding windows over one episode. Per-frame features are computed once;
/// tracks are computed per window over its own frames.
pub fn window_episode(
    ep: &EpisodeRecord,
    provider: &dyn Provider,
    perception_cfg: &PerceptionConfig,
    spec: &WindowSpec,
) -> Result<Vec<TrainingSample>, EpisodeError> {
    ep.validate()?;
    let range = window_range(ep.len(), spec.context_n, spec.horizon);
    if range.is_empty() {
        return Ok(Vec::new());
    }
    let feats = ep
        .frames
        .iter()
        .map(|f| perception::observe_frame(provider, f, perception_cfg).map(Arc::new))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ ep.episode_id.wrapping_mul(0x2545_F491_4F6C_DD1D));
    let last = ep.len() - 1;
    range
        .map(|t| {
            let ctx = t + 1 - spec.context_n..t + 1;
            let (o, h) = (ep.positions[t], ep.headings[t]);
            let ego = |p: Point| geom::to_ego(p, o, h);
            let ahead = rng.gen_range(spec.horizon..=3 * spec.horizon);
            let goal = ep.positions[(t + ahead).min(last)];
            let tracks = perception::track_features(
                provider,
                &ep.frames[ctx.clone()],
                perception_cfg.grid,
                perception_cfg.m_trk,
            )?;
            Ok(TrainingSample {
                window: ObservationWindow {
                    frames: feats[ctx.clone()].to_vec(),
                    tracks,
                    positions: ep.positions[ctx].iter().map(|p| ego(*p)).collect(),
                    subgoal: ego(goal),
                },
                gt_waypoints: ep.positions[t + 1..=t + spec.horizon].iter().map(|p| ego(*p)).collect(),
                gt_arrived: geom::dist(o, goal) <= spec.radius_m,
            })
        })
        .collect()
}

/// The provider an episode's frames were recorded with: the regenerated
/// scene for synthetic episodes, procedural seeds for imported ones.
pub fn episode_provider(ep: &EpisodeRecord) -> Result<Box<dyn Provider>, EpisodeError> {
    Ok(match ep.source {
        Source::Synthetic => Box::new(ep.provider()?),
        Source::Imported => Box::new(SeededProvider::default()),
    })
}

/// Windows of every episode in episode order, each with its episode's tag.
pub fn window_dataset_tagged(
    episodes: &[EpisodeRecord],
    perception_cfg: &PerceptionConfig,
    spec: &WindowSpec,
) -> Result<Vec<(Scenario, TrainingSample)>, EpisodeError> {
    let per: Vec<Vec<(Scenario, TrainingSample)>> = episodes
        .par_iter()
        .map(|ep| {
            let provider = episode_provider(ep)?;
            let w = window_episode(ep, provider.as_ref(), perception_cfg, spec)?;
            Ok::<_, EpisodeError>(w.into_iter().map(|s| (ep.scenario, s)).collect())
        })
        .collect::<Result<_, _>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Windows of every episode, in episode order.
pub fn window_dataset(
    episodes: &[EpisodeRecord],
    perception_cfg: &PerceptionConfig,
    spec: &WindowSpec,
) -> Result<Vec<TrainingSample>, EpisodeError> {
    Ok(window_dataset_tagged(episodes, perception_cfg, spec)?
        .into_iter()
        .map(|(_, s)| s)
        .collect())
}

pub const FILTER_PROMPT: &str = "Is this a first-person video of a person actively walking on foot (not standing still)? Answer strictly with 'yes' or 'no'.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub clip_id: String,
    pub duration_s: f64,
    pub description: String,
    #[serde(default)]
    pub keep: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRequest {
    pub prompt: String,
    pub description: String,
    /// One placeholder per sampled second of the clip.
    pub frames: Vec<String>,
}

impl FilterRequest {
    pub fn for_clip(clip: &ClipMeta) -> Self {
        let n = clip.duration_s.ceil().max(1.0) as usize;
        Self {
            prompt: FILTER_PROMPT.to_string(),
            description: clip.description.clone(),
            frames: (0..n).map(|i| format!("<frame t={i}s>")).collect(),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ClientError {
    #[error("request timed out")]
    Timeout,
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
}

/// A text-completion endpoint.
pub trait FilterClient: Sync {
    fn complete(&self, request: &FilterRequest) -> Result<String, ClientError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

/// Lowercase, trim, drop punctuation; only an exact `yes` or `no` counts.
pub fn normalize_answer(raw: &str) -> Option<Answer> {
    let s: String = raw
        .trim()
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    match s.trim() {
        "yes" => Some(Answer::Yes),
        "no" => Some(Answer::No),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub clip_id: String,
    pub answer: Answer,
    pub raw_response: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterFailure {
    pub clip_id: String,
    pub error: String,
    /// Client failures can be retried; malformed answers cannot.
    pub retriable: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: Vec<ClipMeta>,
    pub verdicts: Vec<FilterVerdict>,
    /// Undecided or malformed clips, all excluded.
    pub failures: Vec<FilterFailure>,
}

/// Ask `client` about every clip in parallel; keep a clip iff its answer
/// normalizes to `yes`. Output order follows the input.
pub fn filter_clips(clips: &[ClipMeta], client: &dyn FilterClient) -> Result<FilterReport, EpisodeError> {
    if let Some(c) = clips.iter().find(|c| !(c.duration_s > 0.0)) {
        return Err(EpisodeError::Invalid(format!(
            "clip {}: duration must be positive",
            c.clip_id
        )));
    }
    let replies: Vec<Result<String, ClientError>> = clips
        .par_iter()
        .map(|c| client.complete(&FilterRequest::for_clip(c)))
        .collect();
    let mut report = FilterReport::default();
    for (clip, reply) in clips.iter().zip(replies) {
        match reply {
            Err(e) => {
                log::warn!("clip {} undecided: {e}", clip.clip_id);
                report.failures.push(FilterFailure {
                    clip_id: clip.clip_id.clone(),
                    error: e.to_string(),
                    retriable: true,
                });
            }
            Ok(raw) => match normalize_answer(&raw) {
                None => {
                    log::warn!("clip {}: malformed answer {raw:?}", clip.clip_id);
                    report.failures.push(FilterFailure {
                        clip_id: clip.clip_id.clone(),
                        error: format!("malformed answer {raw:?}"),
                        retriable: false,
                    });
                }
                Some(answer) => {
                    if answer == Answer::Yes {
                        report.kept.push(ClipMeta {
                            keep: Some(true),
                            ..clip.clone()
                        });
                    }
                    report.verdicts.push(FilterVerdict {
                        clip_id: clip.clip_id.clone(),
                        answer,
                        raw_response: raw,
                    });
                }
            },
        }
    }
    Ok(report)
}

const SWEP_MAGIC: &[u8; 4] = b"SWEP";
const SWEP_VERSION: u32 = 1;

fn write_view(w: &mut Writer, v: &ViewSource) {
    match v {
        ViewSource::Seed(s) => {
            w.u8(0);
            w.u64(*s);
        }
        ViewSource::Pose { x, y, heading } => {
            w.u8(1);
            w.f64s(&[*x, *y, *heading]);
        }
    }
}

fn read_view(r: &mut Reader) -> Result<ViewSource, FormatError> {
    match r.u8()? {
        0 => Ok(ViewSource::Seed(r.u64()?)),
        1 => Ok(ViewSource::Pose {
            x: r.f64()?,
            y: r.f64()?,
            heading: r.f64()?,
        }),
        t => Err(r.invalid(format!("unknown view tag {t}"))),
    }
}

fn tag_of<T: Copy + PartialEq>(all: &[T], v: T) -> u8 {
    all.iter().position(|x| *x == v).expect("listed variant") as u8
}

fn from_tag<T: Copy>(r: &Reader, all: &[T], tag: u8, what: &str) -> Result<T, FormatError> {
    all.get(tag as usize)
        .copied()
        .ok_or_else(|| r.invalid(format!("unknown {what} tag {tag}")))
}

const SOURCES: [Source; 2] = [Source::Synthetic, Source::Imported];

/// Layout: `"SWEP"`, `u32` version, `u32` episode count, then per episode
/// `u64` id, `u64` world seed, `u8` template, `u8` scenario, `u8` source,
/// `u32` length, per frame (`u64` frame id, left view, `u8` has-right
/// [+ right view], `f64` focal, `f64` baseline), then the positions, headings
/// and timestamps as `f64`. A view is `u8` 0 + `u64` seed or `u8` 1 + three `f64`.
pub fn dataset_to_bytes(episodes: &[EpisodeRecord]) -> Vec<u8> {
    let mut w = Writer::with_header(SWEP_MAGIC, SWEP_VERSION);
    w.len_u32(episodes.len());
    for ep in episodes {
        w.u64(ep.episode_id);
        w.u64(ep.world_seed);
        w.u8(tag_of(&Template::ALL, ep.template));
        w.u8(tag_of(&Scenario::ALL, ep.scenario));
        w.u8(tag_of(&SOURCES, ep.source));
        w.len_u32(ep.len());
        for f in &ep.frames {
            w.u64(f.frame_id);
            write_view(&mut w, &f.left);
            match &f.right {
                Some(v) => {
                    w.u8(1);
                    write_view(&mut w, v);
                }
                None => w.u8(0),
            }
            w.f64(f.focal_px);
            w.f64(f.baseline_m);
        }
        for p in &ep.positions {
            w.f64s(p);
        }
        w.f64s(&ep.headings);
        w.f64s(&ep.timestamps);
    }
    w.finish()
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Vec<EpisodeRecord>, FormatError> {
    let (mut r, _) = Reader::header(bytes, SWEP_MAGIC, SWEP_VERSION)?;
    let count = r.count(8 + 8 + 3 + 4)?;
    let mut episodes = Vec::with_capacity(count);
    for _ in 0..count {
        let episode_id = r.u64()?;
        let world_seed = r.u64()?;
        let tag = r.u8()?;
        let template = from_tag(&r, &Template::ALL, tag, "template")?;
        let tag = r.u8()?;
        let scenario = from_tag(&r, &Scenario::ALL, tag, "scenario")?;
        let tag = r.u8()?;
        let source = from_tag(&r, &SOURCES, tag, "source")?;
        let n = r.count(8 + 9 + 1 + 16 + 32)?;
        let mut frames = Vec::with_capacity(n);
        for _ in 0..n {
            let frame_id = r.u64()?;
            let left = read_view(&mut r)?;
            let right = match r.u8()? {
                0 => None,
                1 => Some(read_view(&mut r)?),
                t => return Err(r.invalid(format!("bad right-view flag {t}"))),
            };
            frames.push(FrameObservation {
                frame_id,
                left,
                right,
                focal_px: r.f64()?,
                baseline_m: r.f64()?,
            });
        }
        let flat = r.f64s(2 * n)?;
        let positions = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let headings = r.f64s(n)?;
        let timestamps = r.f64s(n)?;
        episodes.push(EpisodeRecord {
            episode_id,
            world_seed,
            template,
            frames,
            positions,
            headings,
            timestamps,
            scenario,
            source,
        });
    }
    r.finish()?;
    Ok(episodes)
}

pub fn save_dataset(path: &Path, episodes: &[EpisodeRecord]) -> Result<(), EpisodeError> {
    for ep in episodes {
        ep.validate()?;
    }
    Ok(format::write_atomic(path, &dataset_to_bytes(episodes))?)
}

pub fn load_dataset(path: &Path) -> Result<Vec<EpisodeRecord>, EpisodeError> {
    let bytes = std::fs::read(path).map_err(FormatError::from)?;
    let episodes = dataset_from_bytes(&bytes)?;
    for ep in &episodes {
        ep.validate()?;
    }
    Ok(episodes)
}
