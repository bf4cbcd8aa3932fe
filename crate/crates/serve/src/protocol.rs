//! Request and response documents for `/predict` and `/health`, and the
//! translation of a validated request into an [`ObservationWindow`].

use std::path::Path;
use std::sync::Arc;

use base64::Engine;
use serde::{Deserialize, Serialize};
use wpnav_core::geom::Point;
use wpnav_core::perception::{
    disparity_to_depth, observe_frame, query_points, track_features, DepthMap, DepthMode, FeatureFile, FrameFeatures,
    FrameObservation, SeededProvider, Track, TrackSet, ViewSource,
};
use wpnav_core::policy::{ModelConfig, ObservationWindow};

pub const PROTOCOL_VERSION: u32 = 1;

/// A schema or semantic problem with a request, located by field path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub protocol_version: u32,
    /// Ego-frame positions, oldest first; exactly `context_n` of them.
    pub positions: Vec<Point>,
    pub subgoal: Point,
    pub mode: DepthMode,
    pub frames: Frames,
    /// Point tracks in patch coordinates. When absent, tracks come from the
    /// seeded provider (seed frames) or stay at their query points (features).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracks: Option<Vec<Track>>,
}

/// Where the per-frame features come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Frames {
    /// Procedural frames rendered server-side from one seed per frame.
    Seeds {
        seeds: Vec<u64>,
        /// Track motion in patches per frame.
        #[serde(default)]
        flow: [f64; 2],
        #[serde(default = "default_focal")]
        focal_px: f64,
        #[serde(default = "default_baseline")]
        baseline_m: f64,
    },
    /// Precomputed appearance grids as an `SWFT` payload, inline (base64) or
    /// by path on the server, plus depth (monocular) or disparity (stereo).
    Features {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        swft: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        swft_path: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        depth: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        disparity: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        focal_px: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        baseline_m: Option<f64>,
    },
}

fn default_focal() -> f64 {
    700.0
}

fn default_baseline() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub protocol_version: u32,
    pub waypoints: Vec<Point>,
    pub arrival_prob: f64,
    pub model_id: String,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    /// `"ready"` or `"not ready"`.
    pub status: String,
    pub checkpoint_id: Option<String>,
    /// SHA-256 of the checkpoint bytes, hex.
    pub config_hash: Option<String>,
    pub uptime_s: f64,
    pub horizon: Option<usize>,
    pub context_n: Option<usize>,
}

/// Parse a request body, reporting the path of the first offending field.
pub fn parse_request(body: &[u8]) -> Result<PredictRequest, FieldError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let msg = e.inner().to_string();
        let missing = msg
            .strip_prefix("missing field `")
            .and_then(|rest| rest.split('`').next());
        let field = match (path.as_str(), missing) {
            ("." | "?", Some(name)) => name.to_string(),
            ("." | "?", None) => "$".to_string(),
            (p, Some(name)) => format!("{p}.{name}"),
            (p, None) => p.to_string(),
        };
        FieldError::new(field, msg)
    })
}

fn finite(field: &str, values: &[f64]) -> Result<(), FieldError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(FieldError::new(format!("{field}[{i}]"), "must be finite")),
        None => Ok(()),
    }
}

fn per_frame_maps(field: &str, maps: &[Vec<f64>], n: usize, cells: usize) -> Result<(), FieldError> {
    if maps.len() != n {
        return Err(FieldError::new(field, format!("expected {n} maps, got {}", maps.len())));
    }
    for (i, m) in maps.iter().enumerate() {
        if m.len() != cells {
            return Err(FieldError::new(
                format!("{field}[{i}]"),
                format!("expected {cells} values, got {}", m.len()),
            ));
        }
        finite(&format!("{field}[{i}]"), m)?;
    }
    Ok(())
}

/// Validate `req` against the model config and build the policy input.
pub fn build_window(req: &PredictRequest, cfg: &ModelConfig) -> Result<ObservationWindow, FieldError> {
    let n = cfg.context_n;
    let pc = &cfg.perception;
    let grid = pc.grid;
    if req.protocol_version != PROTOCOL_VERSION {
        return Err(FieldError::new(
            "protocol_version",
            format!(
                "unsupported version {}, expected {PROTOCOL_VERSION}",
                req.protocol_version
            ),
        ));
    }
    if req.positions.len() != n {
        return Err(FieldError::new(
            "positions",
            format!("expected {n} positions, got {}", req.positions.len()),
        ));
    }
    for (i, p) in req.positions.iter().enumerate() {
        finite(&format!("positions[{i}]"), p)?;
    }
    finite("subgoal", &req.subgoal)?;
    let mut percept = pc.clone();
    percept.depth_mode = req.mode;

    let (features, tracks) = match &req.frames {
        Frames::Seeds {
            seeds,
            flow,
            focal_px,
            baseline_m,
        } => {
            if seeds.len() != n {
                return Err(FieldError::new(
                    "frames.seeds",
                    format!("expected {n} seeds, got {}", seeds.len()),
                ));
            }
            finite("frames.flow", flow)?;
            if !(*focal_px > 0.0 && focal_px.is_finite()) {
                return Err(FieldError::new("frames.focal_px", "must be positive"));
            }
            if !(*baseline_m > 0.0 && baseline_m.is_finite()) {
                return Err(FieldError::new("frames.baseline_m", "must be positive"));
            }
            let provider = SeededProvider::with_flow(*flow);
            let obs: Vec<FrameObservation> = seeds
                .iter()
                .enumerate()
                .map(|(i, s)| match req.mode {
                    DepthMode::Monocular => FrameObservation::mono(i as u64, ViewSource::Seed(*s), *focal_px),
                    DepthMode::Stereo => FrameObservation::stereo(
                        i as u64,
                        ViewSource::Seed(*s),
                        ViewSource::Seed(*s),
                        *focal_px,
                        *baseline_m,
                    ),
                })
                .collect();
            let feats = obs
                .iter()
                .map(|o| observe_frame(&provider, o, &percept).map(Arc::new))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| FieldError::new("frames", e.to_string()))?;
            let tracks = match &req.tracks {
                Some(t) => TrackSet { tracks: t.clone() },
                None => track_features(&provider, &obs, grid, pc.m_trk)
                    .map_err(|e| FieldError::new("frames", e.to_string()))?,
            };
            (feats, tracks)
        }
        Frames::Features {
            swft,
            swft_path,
            depth,
            disparity,
            focal_px,
            baseline_m,
        } => {
            let file = match (swft, swft_path) {
                (Some(b64), None) => {
                    let bytes = base64::engine::general_purpose::STANDARD
                        .decode(b64)
                        .map_err(|e| FieldError::new("frames.swft", format!("invalid base64: {e}")))?;
                    FeatureFile::from_bytes(&bytes).map_err(|e| FieldError::new("frames.swft", e.to_string()))?
                }
                (None, Some(path)) => FeatureFile::load(Path::new(path))
                    .map_err(|e| FieldError::new("frames.swft_path", e.to_string()))?,
                _ => {
                    return Err(FieldError::new(
                        "frames",
                        "exactly one of swft and swft_path is required",
                    ))
                }
            };
            if file.grid != grid || file.dim != pc.appearance_dim {
                return Err(FieldError::new(
                    "frames.swft",
                    format!(
                        "payload is {}x{}x{}, model expects {}x{}x{}",
                        file.grid.h, file.grid.w, file.dim, grid.h, grid.w, pc.appearance_dim
                    ),
                ));
            }
            if file.frames.len() != n {
                return Err(FieldError::new(
                    "frames.swft",
                    format!("expected {n} frames, got {}", file.frames.len()),
                ));
            }
            for (i, f) in file.frames.iter().enumerate() {
                finite(&format!("frames.swft[{i}]"), f.data())?;
            }
            let depths: Vec<DepthMap> = match req.mode {
                DepthMode::Monocular => {
                    let maps = depth
                        .as_ref()
                        .ok_or_else(|| FieldError::new("frames.depth", "required in monocular mode"))?;
                    per_frame_maps("frames.depth", maps, n, grid.len())?;
                    maps.iter()
                        .enumerate()
                        .map(|(i, m)| {
                            DepthMap::new(grid, m.clone())
                                .map_err(|e| FieldError::new(format!("frames.depth[{i}]"), e.to_string()))
                        })
                        .collect::<Result<_, _>>()?
                }
                DepthMode::Stereo => {
                    let maps = disparity
                        .as_ref()
                        .ok_or_else(|| FieldError::new("frames.disparity", "required in stereo mode"))?;
                    per_frame_maps("frames.disparity", maps, n, grid.len())?;
                    let f = focal_px.ok_or_else(|| FieldError::new("frames.focal_px", "required in stereo mode"))?;
                    let b =
                        baseline_m.ok_or_else(|| FieldError::new("frames.baseline_m", "required in stereo mode"))?;
                    maps.iter()
                        .enumerate()
                        .map(|(i, m)| {
                            disparity_to_depth(m, grid, f, b, pc.min_disparity)
                                .map_err(|e| FieldError::new(format!("frames.disparity[{i}]"), e.to_string()))
                        })
                        .collect::<Result<_, _>>()?
                }
            };
            let feats = file
                .frames
                .into_iter()
                .zip(depths)
                .map(|(appearance, depth)| Arc::new(FrameFeatures { appearance, depth }))
                .collect();
            let tracks = match &req.tracks {
                Some(t) => TrackSet { tracks: t.clone() },
                None => TrackSet {
                    tracks: query_points(grid, pc.m_trk)
                        .into_iter()
                        .map(|q| Track {
                            points: vec![q; n],
                            visible: vec![true; n],
                        })
                        .collect(),
                },
            };
            (feats, tracks)
        }
    };
    if cfg.use_tracking {
        if tracks.len() != pc.m_trk {
            return Err(FieldError::new(
                "tracks",
                format!("expected {} tracks, got {}", pc.m_trk, tracks.len()),
            ));
        }
        tracks
            .validate(n, grid)
            .map_err(|e| FieldError::new("tracks", e.to_string()))?;
    }
    Ok(ObservationWindow {
        frames: features,
        tracks,
        positions: req.positions.clone(),
        subgoal: req.subgoal,
    })
}
