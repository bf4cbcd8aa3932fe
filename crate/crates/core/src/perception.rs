//! Per-frame observations to fused appearance + depth patch tokens.
//!
//! The frozen encoders (appearance features, monocular depth, stereo
//! disparity, point tracking) sit behind [`Provider`]. [`SeededProvider`] is a
//! procedural stand-in for tests; the simulator implements a pose-consistent
//! scene provider; [`FileAppearance`] serves appearance features exported to
//! an `SWFT` file.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{self, FormatError, Reader, Writer};
use crate::tensor::nn::{Linear, ParamStore};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("degenerate disparity {value} px at patch (row {row}, col {col}), index {index}")]
    DegenerateDisparity {
        index: usize,
        row: usize,
        col: usize,
        value: f64,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
}

impl GridSpec {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    /// Patch grid of a square ViT input.
    pub fn from_image(input_px: usize, patch_px: usize) -> Self {
        Self::new(input_px / patch_px, input_px / patch_px)
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patch-center coordinates `[x = col, y = row]`, row-major.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.h)
            .flat_map(|j| (0..self.w).map(move |k| [k as f64, j as f64]))
            .collect()
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (self.w - 1) as f64 && p[1] <= (self.h - 1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthMode {
    Monocular,
    Stereo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptionConfig {
    pub grid: GridSpec,
    pub appearance_dim: usize,
    pub depth_dim: usize,
    pub m_trk: usize,
    pub depth_mode: DepthMode,
    /// Smallest admissible disparity, pixels.
    pub min_disparity: f64,
}

impl PerceptionConfig {
    /// 8×8 grid, 32 + 8 token dims, 64 tracks.
    pub fn desk() -> Self {
        Self {
            grid: GridSpec::new(8, 8),
            appearance_dim: 32,
            depth_dim: 8,
            m_trk: 64,
            depth_mode: DepthMode::Stereo,
            min_disparity: 1e-3,
        }
    }

    /// 350×350 input with 14 px patches, 768 + 64 token dims.
    pub fn paper() -> Self {
        Self {
            grid: GridSpec::from_image(350, 14),
            appearance_dim: 768,
            depth_dim: 64,
            m_trk: 64,
            depth_mode: DepthMode::Stereo,
            min_disparity: 1e-3,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.appearance_dim + self.depth_dim
    }
}

/// What a provider renders a view from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ViewSource {
    /// Procedural content keyed by a seed.
    Seed(u64),
    /// A camera pose in a simulated world (meters, radians).
    Pose { x: f64, y: f64, heading: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameObservation {
    pub frame_id: u64,
    pub left: ViewSource,
    pub right: Option<ViewSource>,
    pub focal_px: f64,
    pub baseline_m: f64,
}

impl FrameObservation {
    pub fn mono(frame_id: u64, left: ViewSource, focal_px: f64) -> Self {
        Self {
            frame_id,
            left,
            right: None,
            focal_px,
            baseline_m: 0.0,
        }
    }

    pub fn stereo(frame_id: u64, left: ViewSource, right: ViewSource, focal_px: f64, baseline_m: f64) -> Self {
        Self {
            frame_id,
            left,
            right: Some(right),
            focal_px,
            baseline_m,
        }
    }

    pub fn is_stereo(&self) -> bool {
        self.right.is_some()
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        if !(self.focal_px > 0.0 && self.focal_px.is_finite()) {
            return Err(PerceptionError::Invariant(format!(
                "frame {}: focal length must be positive, got {}",
                self.frame_id, self.focal_px
            )));
        }
        if self.is_stereo() && !(self.baseline_m > 0.0 && self.baseline_m.is_finite()) {
            return Err(PerceptionError::Invariant(format!(
                "frame {}: stereo baseline must be positive, got {}",
                self.frame_id, self.baseline_m
            )));
        }
        Ok(())
    }
}

/// Positive depths in meters at patch resolution, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    grid: GridSpec,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self, PerceptionError> {
        if values.len() != grid.len() {
            return Err(PerceptionError::Invariant(format!(
                "depth map has {} values for a {}x{} grid",
                values.len(),
                grid.h,
                grid.w
            )));
        }
        if let Some(i) = values.iter().position(|z| !(*z > 0.0 && z.is_finite())) {
            return Err(PerceptionError::Invariant(format!(
                "nonpositive or non-finite depth {} at patch index {i}",
                values[i]
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `Z = f·B / d` elementwise.
pub fn disparity_to_depth(
    disparity: &[f64],
    grid: GridSpec,
    focal_px: f64,
    baseline_m: f64,
    min_disparity: f64,
) -> Result<DepthMap, PerceptionError> {
    if !(focal_px > 0.0) || !(baseline_m > 0.0) {
        return Err(PerceptionError::Config(format!(
            "focal length and baseline must be positive (f={focal_px}, B={baseline_m})"
        )));
    }
    if disparity.len() != grid.len() {
        return Err(PerceptionError::Invariant(format!(
            "disparity map has {} values for a {}x{} grid",
            disparity.len(),
            grid.h,
            grid.w
        )));
    }
    let mut values = Vec::with_capacity(disparity.len());
    for (index, &d) in disparity.iter().enumerate() {
        if !(d > min_disparity) {
            return Err(PerceptionError::DegenerateDisparity {
                index,
                row: index / grid.w,
                col: index % grid.w,
                value: d,
            });
        }
        values.push(focal_px * baseline_m / d);
    }
    DepthMap::new(grid, values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    /// Patch-coordinate points `[x = col, y = row]`, one per frame.
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackSet {
    pub tracks: Vec<Track>,
}

impl TrackSet {
    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// Points of every track at frame `i`.
    pub fn frame_points(&self, i: usize) -> Vec<[f64; 2]> {
        self.tracks.iter().map(|t| t.points[i]).collect()
    }

    pub fn validate(&self, frames: usize, grid: GridSpec) -> Result<(), PerceptionError> {
        self.validate_structure(frames)?;
        for (m, t) in self.tracks.iter().enumerate() {
            for (i, (p, v)) in t.points.iter().zip(&t.visible).enumerate() {
                if *v && !grid.contains(*p) {
                    return Err(PerceptionError::Invariant(format!(
                        "track {m} frame {i}: visible point {p:?} outside the grid"
                    )));
                }
            }
        }
        Ok(())
    }

    /// One finite point and flag per frame for every track.
    pub fn validate_structure(&self, frames: usize) -> Result<(), PerceptionError> {
        for (m, t) in self.tracks.iter().enumerate() {
            if t.points.len() != frames || t.visible.len() != frames {
                return Err(PerceptionError::Invariant(format!(
                    "track {m} has {} points / {} flags for a {frames}-frame window",
                    t.points.len(),
                    t.visible.len()
                )));
            }
            if let Some(i) = t.points.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
                return Err(PerceptionError::Invariant(format!(
                    "track {m} frame {i}: non-finite point"
                )));
            }
        }
        Ok(())
    }
}

/// Regular grid of `m` track query points covering the patch grid.
pub fn query_points(grid: GridSpec, m: usize) -> Vec<[f64; 2]> {
    if m == 0 {
        return Vec::new();
    }
    let mx = (m as f64).sqrt().ceil() as usize;
    let my = m.div_ceil(mx);
    (0..m)
        .map(|idx| {
            let (r, c) = (idx / mx, idx % mx);
            [
                (c as f64 + 0.5) * grid.w as f64 / mx as f64 - 0.5,
                (r as f64 + 0.5) * grid.h as f64 / my as f64 - 0.5,
            ]
        })
        .collect()
}

/// Stand-in for the frozen perception models. Implementations must be
/// deterministic: identical inputs give bitwise-identical outputs.
pub trait Provider: Send + Sync {
    /// Appearance features `[grid.len() × dim]`, row-major over patches.
    fn appearance(&self, frame: &FrameObservation, grid: GridSpec, dim: usize) -> Result<Tensor, PerceptionError>;

    fn mono_depth(&self, frame: &FrameObservation, grid: GridSpec) -> Result<DepthMap, PerceptionError>;

    /// Left-right disparity in pixels, row-major over patches.
    fn disparity(&self, frame: &FrameObservation, grid: GridSpec) -> Result<Vec<f64>, PerceptionError>;

    fn tracks(&self, frames: &[FrameObservation], grid: GridSpec, m_trk: usize) -> Result<TrackSet, PerceptionError>;
}

/// Depth from the monocular provider, or from stereo disparity via `Z = f·B/d`.
pub fn depth_source(
    mode: DepthMode,
    provider: &dyn Provider,
    frame: &FrameObservation,
    grid: GridSpec,
    min_disparity: f64,
) -> Result<DepthMap, PerceptionError> {
    frame.validate()?;
    match mode {
        DepthMode::Monocular => provider.mono_depth(frame, grid),
        DepthMode::Stereo => {
            if !frame.is_stereo() {
                return Err(PerceptionError::Config(format!(
                    "stereo depth requested but frame {} has no right view",
                    frame.frame_id
                )));
            }
            let d = provider.disparity(frame, grid)?;
            disparity_to_depth(&d, grid, frame.focal_px, frame.baseline_m, min_disparity)
        }
    }
}

pub fn appearance_features(
    provider: &dyn Provider,
    frame: &FrameObservation,
    grid: GridSpec,
    dim: usize,
) -> Result<Tensor, PerceptionError> {
    let t = provider.appearance(frame, grid, dim)?;
    if t.shape() != [grid.len(), dim] {
        return Err(PerceptionError::Provider(format!(
            "appearance provider returned shape {:?}, expected [{}, {dim}]",
            t.shape(),
            grid.len()
        )));
    }
    Ok(t)
}

pub fn track_features(
    provider: &dyn Provider,
    frames: &[FrameObservation],
    grid: GridSpec,
    m_trk: usize,
) -> Result<TrackSet, PerceptionError> {
    if frames.is_empty() || m_trk == 0 {
        return Err(PerceptionError::Config(
            "track extraction needs at least one frame and one track".into(),
        ));
    }
    let set = provider.tracks(frames, grid, m_trk)?;
    if set.len() != m_trk {
        return Err(PerceptionError::Provider(format!(
            "track provider returned {} tracks, expected {m_trk}",
            set.len()
        )));
    }
    set.validate(frames.len(), grid)?;
    Ok(set)
}

/// Frozen per-frame inputs to the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    pub appearance: Tensor,
    pub depth: DepthMap,
}

/// Run every provider over a window of frames.
pub fn observe(
    provider: &dyn Provider,
    frames: &[FrameObservation],
    cfg: &PerceptionConfig,
) -> Result<(Vec<FrameFeatures>, TrackSet), PerceptionError> {
    let feats = frames
        .iter()
        .map(|f| observe_frame(provider, f, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let tracks = track_features(provider, frames, cfg.grid, cfg.m_trk)?;
    Ok((feats, tracks))
}

pub fn observe_frame(
    provider: &dyn Provider,
    frame: &FrameObservation,
    cfg: &PerceptionConfig,
) -> Result<FrameFeatures, PerceptionError> {
    Ok(FrameFeatures {
        appearance: appearance_features(provider, frame, cfg.grid, cfg.appearance_dim)?,
        depth: depth_source(cfg.depth_mode, provider, frame, cfg.grid, cfg.min_disparity)?,
    })
}

/// `[ln Z, 1/Z]` per patch.
pub fn depth_features(depth: &DepthMap) -> Tensor {
    let data = depth.values().iter().flat_map(|z| [z.ln(), 1.0 / z]).collect();
    Tensor::new(&[depth.grid().len(), 2], data).expect("nonempty grid")
}

/// Trainable per-patch projection of log and inverse depth.
#[derive(Clone, Debug)]
pub struct DepthEncoder {
    pub proj: Linear,
    pub dim: usize,
}

impl DepthEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), 2, dim, rng),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, depth: &DepthMap) -> Result<Var, PerceptionError> {
        let f = g.constant(depth_features(depth));
        Ok(self.proj.forward(g, f)?)
    }
}

/// `h = [x; z]` per patch. With `use_depth` off the depth half is zeroed.
pub fn assemble_tokens_var(g: &mut Graph, x: Var, z: Var, use_depth: bool) -> Result<Var, PerceptionError> {
    let (nx, nz) = (g.value(x).rows(), g.value(z).rows());
    if nx != nz {
        return Err(TensorError::Dimension {
            op: "assemble_tokens",
            axis: 0,
            expected: nx,
            got: nz,
        }
        .into());
    }
    let z = if use_depth {
        z
    } else {
        let shape = g.shape(z).to_vec();
        g.constant(Tensor::zeros(&shape))
    };
    Ok(g.concat_cols(&[x, z])?)
}

/// A frame's fused tokens, outside any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTokenGrid {
    pub grid: GridSpec,
    pub appearance_dim: usize,
    pub depth_dim: usize,
    /// `[grid.len() × (appearance_dim + depth_dim)]`.
    pub tokens: Tensor,
}

impl PatchTokenGrid {
    pub fn token(&self, j: usize, k: usize) -> &[f64] {
        self.tokens.row(j * self.grid.w + k)
    }

    pub fn token_dim(&self) -> usize {
        self.appearance_dim + self.depth_dim
    }
}

pub fn assemble_tokens(
    x: &Tensor,
    z: &Tensor,
    grid: GridSpec,
    use_depth: bool,
) -> Result<PatchTokenGrid, PerceptionError> {
    for t in [x, z] {
        if t.rows() != grid.len() {
            return Err(TensorError::Dimension {
                op: "assemble_tokens",
                axis: 0,
                expected: grid.len(),
                got: t.rows(),
            }
            .into());
        }
    }
    let mut g = Graph::new();
    let (xv, zv) = (g.constant(x.clone()), g.constant(z.clone()));
    let h = assemble_tokens_var(&mut g, xv, zv, use_depth)?;
    Ok(PatchTokenGrid {
        grid,
        appearance_dim: x.cols(),
        depth_dim: z.cols(),
        tokens: g.value(h).clone(),
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic hash of a key sequence to `[-1, 1)`.
pub fn hash_unit(keys: &[u64]) -> f64 {
    let h = keys.iter().fold(0x2545_F491_4F6C_DD1Du64, |acc, k| splitmix(acc ^ k));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn seed_of(view: &ViewSource) -> Result<u64, PerceptionError> {
    match view {
        ViewSource::Seed(s) => Ok(*s),
        ViewSource::Pose { .. } => Err(PerceptionError::Provider(
            "seeded provider cannot render a pose view".into(),
        )),
    }
}

/// Procedural provider keyed by frame seeds.
///
/// Depth is a smooth seed-dependent field in `[1, 9]` m; disparity is the
/// exact `f·B/Z` of that field; tracks advect a query grid by a constant flow
/// in patches per frame.
#[derive(Clone, Debug, Default)]
pub struct SeededProvider {
    pub flow: [f64; 2],
}

impl SeededProvider {
    pub fn with_flow(flow: [f64; 2]) -> Self {
        Self { flow }
    }

    pub fn true_depth(&self, seed: u64, grid: GridSpec) -> Vec<f64> {
        let a = hash_unit(&[seed, 1]);
        let b = hash_unit(&[seed, 2]);
        (0..grid.len())
            .map(|i| {
                let (j, k) = ((i / grid.w) as f64, (i % grid.w) as f64);
                5.0 + 2.0 * (a * 3.0 + 0.7 * k).sin() + 2.0 * (b * 3.0 + 0.5 * j).cos()
            })
            .collect()
    }
}

impl Provider for SeededProvider {
    fn appearance(&self, frame: &FrameObservation, grid: GridSpec, dim: usize) -> Result<Tensor, PerceptionError> {
        let seed = seed_of(&frame.left)?;
        let data = (0..grid.len() * dim)
            .map(|i| hash_unit(&[seed, (i / dim) as u64, (i % dim) as u64]))
            .collect();
        Ok(Tensor::new(&[grid.len(), dim], data)?)
    }

    fn mono_depth(&self, frame: &FrameObservation, grid: GridSpec) -> Result<DepthMap, PerceptionError> {
        DepthMap::new(grid, self.true_depth(seed_of(&frame.left)?, grid))
    }

    fn disparity(&self, frame: &FrameObservation, grid: GridSpec) -> Result<Vec<f64>, PerceptionError> {
        let fb = frame.focal_px * frame.baseline_m;
        Ok(self
            .true_depth(seed_of(&frame.left)?, grid)
            .into_iter()
            .map(|z| fb / z)
            .collect())
    }

    fn tracks(&self, frames: &[FrameObservation], grid: GridSpec, m_trk: usize) -> Result<TrackSet, PerceptionError> {
        let tracks = query_points(grid, m_trk)
            .into_iter()
            .map(|q| {
                let points: Vec<[f64; 2]> = (0..frames.len())
                    .map(|i| [q[0] + self.flow[0] * i as f64, q[1] + self.flow[1] * i as f64])
                    .collect();
                let visible = points.iter().map(|p| grid.contains(*p)).collect();
                Track { points, visible }
            })
            .collect();
        Ok(TrackSet { tracks })
    }
}

const SWFT_MAGIC: &[u8; 4] = b"SWFT";
const SWFT_VERSION: u32 = 1;

/// Precomputed per-frame feature grids.
///
/// Layout: `"SWFT"`, `u32` version, `u32` grid_h, `u32` grid_w, `u32` dim,
/// `u32` frame count, then `frames × grid_h × grid_w × dim` little-endian
/// `f64` values (frame-major, then row-major patches, then channels).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub grid: GridSpec,
    pub dim: usize,
    pub frames: Vec<Tensor>,
}

impl FeatureFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_header(SWFT_MAGIC, SWFT_VERSION);
        w.len_u32(self.grid.h);
        w.len_u32(self.grid.w);
        w.len_u32(self.dim);
        w.len_u32(self.frames.len());
        for f in &self.frames {
            w.f64s(f.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let (mut r, _) = Reader::header(bytes, SWFT_MAGIC, SWFT_VERSION)?;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let per_frame = h * w * dim;
        if per_frame == 0 {
            return Err(r.invalid("zero-sized feature grid"));
        }
        let n = r.count(per_frame * 8)?;
        let mut frames = Vec::with_capacity(n);
        for _ in 0..n {
            let data = r.f64s(per_frame)?;
            frames.push(Tensor::new(&[h * w, dim], data).map_err(|e| r.invalid(e.to_string()))?);
        }
        r.finish()?;
        Ok(Self {
            grid: GridSpec::new(h, w),
            dim,
            frames,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        format::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Appearance features from an `SWFT` file (indexed by `frame_id`); depth
/// and tracks come from the wrapped provider.
pub struct FileAppearance<P> {
    pub file: FeatureFile,
    pub inner: P,
}

impl<P: Provider> Provider for FileAppearance<P> {
    fn appearance(&self, frame: &FrameObservation, grid: GridSpec, dim: usize) -> Result<Tensor, PerceptionError> {
        if grid != self.file.grid || dim != self.file.dim {
            return Err(PerceptionError::Config(format!(
                "feature file holds {}x{}x{}, requested {}x{}x{dim}",
                self.file.grid.h, self.file.grid.w, self.file.dim, grid.h, grid.w
            )));
        }
        self.file.frames.get(frame.frame_id as usize).cloned().ok_or_else(|| {
            PerceptionError::Provider(format!(
                "frame {} not in feature file ({} frames)",
                frame.frame_id,
                self.file.frames.len()
            ))
        })
    }

    fn mono_depth(&self, frame: &FrameObservation, grid: GridSpec) -> Result<DepthMap, PerceptionError> {
        self.inner.mono_depth(frame, grid)
    }

    fn disparity(&self, frame: &FrameObservation, grid: GridSpec) -> Result<Vec<f64>, PerceptionError> {
        self.inner.disparity(frame, grid)
    }

    fn tracks(&self, frames: &[FrameObservation], grid: GridSpec, m_trk: usize) -> Result<TrackSet, PerceptionError> {
        self.inner.tracks(frames, grid, m_trk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stereo_frame(seed: u64) -> FrameObservation {
        FrameObservation::stereo(0, ViewSource::Seed(seed), ViewSource::Seed(seed), 700.0, 0.1)
    }

    #[test]
    fn degenerate_disparity_names_patch() {
        let grid = GridSpec::new(2, 3);
        let mut d = vec![70.0; 6];
        d[4] = 0.0;
        match disparity_to_depth(&d, grid, 700.0, 0.1, 1e-3) {
            Err(PerceptionError::DegenerateDisparity { index, row, col, .. }) => {
                assert_eq!((index, row, col), (4, 1, 1));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stereo_without_right_view_is_config_error() {
        let f = FrameObservation::mono(0, ViewSource::Seed(1), 700.0);
        let err = depth_source(
            DepthMode::Stereo,
            &SeededProvider::default(),
            &f,
            GridSpec::new(2, 2),
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, PerceptionError::Config(_)));
    }

    #[test]
    fn frame_invariants() {
        let mut f = stereo_frame(1);
        assert!(f.validate().is_ok());
        f.baseline_m = 0.0;
        assert!(f.validate().is_err());
        let f = FrameObservation::mono(0, ViewSource::Seed(1), -1.0);
        assert!(f.validate().is_err());
    }

    #[test]
    fn depth_map_rejects_nonpositive() {
        assert!(DepthMap::new(GridSpec::new(1, 2), vec![1.0, 0.0]).is_err());
        assert!(DepthMap::new(GridSpec::new(1, 2), vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn query_points_cover_grid_centers() {
        let g = GridSpec::new(8, 8);
        let q = query_points(g, 64);
        assert_eq!(q, g.centers());
        assert_eq!(query_points(g, 5).len(), 5);
        assert!(query_points(g, 7).iter().all(|p| g.contains(*p)));
    }

    #[test]
    fn paper_grid_is_25() {
        assert_eq!(PerceptionConfig::paper().grid, GridSpec::new(25, 25));
        assert_eq!(PerceptionConfig::paper().token_dim(), 832);
    }

    #[test]
    fn swft_rejects_trailing_bytes() {
        let f = FeatureFile {
            grid: GridSpec::new(1, 1),
            dim: 2,
            frames: vec![Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap()],
        };
        let mut b = f.to_bytes();
        assert_eq!(FeatureFile::from_bytes(&b).unwrap(), f);
        b.push(0);
        assert!(matches!(FeatureFile::from_bytes(&b), Err(FormatError::Trailing { .. })));
    }
}
