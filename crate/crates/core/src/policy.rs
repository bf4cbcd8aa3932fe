//! The navigation policy.
//!
//! A window of `N` observed frames, the matching past positions and a
//! sub-goal map to `horizon` future waypoints and an arrival probability:
//!
//! perception tokens → tracking-guided attention → global attention over all
//! frame tokens and trajectory tokens → target-token attention → heads.
//!
//! All positions are in the ego frame of the newest frame: its position is the
//! origin and its heading is +x.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{self, FormatError, Reader, Writer};
use crate::geom::{self, Point, DEGENERATE_STEP};
use crate::perception::{
    assemble_tokens_var, DepthEncoder, FrameFeatures, GridSpec, PerceptionConfig, PerceptionError, TrackSet,
};
use crate::tensor::nn::{Linear, Mlp, ParamId, ParamStore, TransformerBlock};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::track_attention::TrackingAttention;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid observation window: {0}")]
    Window(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("undefined direction: every ground-truth step is shorter than {DEGENERATE_STEP} m")]
    UndefinedDirection,
    #[error(
        "non-finite loss {loss} on batch sample {sample} (waypoint {wp}, arrival {arrival}, direction {direction})"
    )]
    NonFiniteLoss {
        sample: usize,
        loss: f64,
        wp: f64,
        arrival: f64,
        direction: f64,
    },
    #[error("training batch is empty")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub perception: PerceptionConfig,
    pub context_n: usize,
    pub horizon: usize,
    pub n_track_layers: usize,
    pub n_global_layers: usize,
    pub n_target_layers: usize,
    pub heads: usize,
    /// Transformer MLP hidden width as a multiple of the token dim.
    pub mlp_ratio: usize,
    /// Hidden width of the trajectory and target embedding MLPs.
    pub embed_hidden: usize,
    pub use_patch_tokens: bool,
    pub use_depth: bool,
    pub use_tracking: bool,
    pub lambda_arrvd: f64,
    pub lambda_dir: f64,
    /// Positions are divided by this (meters) before embedding.
    pub pos_scale: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: 8×8 grid, 40-dim tokens, 2 global and 1 target layer.
    pub fn desk() -> Self {
        Self {
            perception: PerceptionConfig::desk(),
            context_n: 5,
            horizon: 5,
            n_track_layers: 2,
            n_global_layers: 2,
            n_target_layers: 1,
            heads: 2,
            mlp_ratio: 2,
            embed_hidden: 32,
            use_patch_tokens: true,
            use_depth: true,
            use_tracking: true,
            lambda_arrvd: 1.0,
            lambda_dir: 10.0,
            pos_scale: 5.0,
        }
    }

    /// Full-size shapes: 25×25 grid, 832-dim tokens, 12 global and 4 target layers.
    pub fn paper() -> Self {
        Self {
            perception: PerceptionConfig::paper(),
            n_global_layers: 12,
            n_target_layers: 4,
            heads: 8,
            mlp_ratio: 4,
            embed_hidden: 256,
            ..Self::desk()
        }
    }

    /// Desk shapes on a 4×4 grid with 12 + 4 token dims and 16 tracks; fast
    /// enough to train in a few minutes on one core.
    pub fn small() -> Self {
        let mut perception = PerceptionConfig::desk();
        perception.grid = GridSpec::new(4, 4);
        perception.appearance_dim = 12;
        perception.depth_dim = 4;
        perception.m_trk = 16;
        Self {
            perception,
            ..Self::desk()
        }
    }

    /// Smallest useful instance: 2×2 grid, 8-dim tokens, N = 2, horizon 2, 2 tracks.
    pub fn tiny() -> Self {
        let mut perception = PerceptionConfig::desk();
        perception.grid = GridSpec::new(2, 2);
        perception.appearance_dim = 6;
        perception.depth_dim = 2;
        perception.m_trk = 2;
        Self {
            perception,
            context_n: 2,
            horizon: 2,
            n_global_layers: 1,
            embed_hidden: 8,
            ..Self::desk()
        }
    }

    pub fn token_dim(&self) -> usize {
        self.perception.token_dim()
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let d = self.token_dim();
        let fail = |m: String| Err(PolicyError::Config(m));
        if self.heads == 0 || !d.is_multiple_of(self.heads) || !(d / self.heads).is_multiple_of(4) {
            return fail(format!(
                "token dim {d} with {} heads: head dim must be a multiple of 4",
                self.heads
            ));
        }
        if self.context_n == 0 || self.horizon == 0 {
            return fail("context and horizon must be at least 1".into());
        }
        if self.perception.grid.is_empty() || self.perception.appearance_dim == 0 || self.perception.depth_dim == 0 {
            return fail("perception grid and feature dims must be nonzero".into());
        }
        if self.mlp_ratio == 0 || self.embed_hidden == 0 {
            return fail("hidden widths must be nonzero".into());
        }
        for (name, v) in [("lambda_arrvd", self.lambda_arrvd), ("lambda_dir", self.lambda_dir)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(self.pos_scale > 0.0 && self.pos_scale.is_finite()) {
            return fail(format!("pos_scale must be positive, got {}", self.pos_scale));
        }
        Ok(())
    }
}

/// Everything the policy sees at one decision time.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationWindow {
    /// Oldest first; the last frame is the current one.
    pub frames: Vec<Arc<FrameFeatures>>,
    pub tracks: TrackSet,
    /// Ego-frame positions at the same times as `frames`; the last is the origin.
    pub positions: Vec<Point>,
    pub subgoal: Point,
}

impl ObservationWindow {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), PolicyError> {
        let n = cfg.context_n;
        let grid = cfg.perception.grid;
        let bad = |m: String| Err(PolicyError::Window(m));
        if self.frames.len() != n {
            return bad(format!("frames: expected {n}, got {}", self.frames.len()));
        }
        if self.positions.len() != n {
            return bad(format!("positions: expected {n}, got {}", self.positions.len()));
        }
        if let Some(i) = self
            .positions
            .iter()
            .position(|p| !p[0].is_finite() || !p[1].is_finite())
        {
            return bad(format!("positions[{i}] is not finite"));
        }
        if !self.subgoal.iter().all(|v| v.is_finite()) {
            return bad("subgoal is not finite".into());
        }
        for (i, f) in self.frames.iter().enumerate() {
            let want = [grid.len(), cfg.perception.appearance_dim];
            if f.appearance.shape() != want {
                return bad(format!(
                    "frames[{i}].appearance: expected shape {want:?}, got {:?}",
                    f.appearance.shape()
                ));
            }
            if !f.appearance.is_finite() {
                return bad(format!("frames[{i}].appearance is not finite"));
            }
            if f.depth.grid() != grid {
                return bad(format!(
                    "frames[{i}].depth: expected a {}x{} grid, got {}x{}",
                    grid.h,
                    grid.w,
                    f.depth.grid().h,
                    f.depth.grid().w
                ));
            }
        }
        if cfg.use_tracking {
            self.tracks
                .validate(n, grid)
                .map_err(|e| PolicyError::Window(format!("tracks: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub waypoints: Vec<Point>,
    pub arrival_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub window: ObservationWindow,
    pub gt_waypoints: Vec<Point>,
    pub gt_arrived: bool,
}

/// Loss terms on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub wp: Var,
    pub arrival: Var,
    pub direction: Var,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[horizon × 2]`.
    pub waypoints: Var,
    /// `[1 × 1]`.
    pub arrival: Var,
}

#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    depth: DepthEncoder,
    tracking: TrackingAttention,
    frame_emb: ParamId,
    traj: Mlp,
    target_embed: Mlp,
    global: Vec<TransformerBlock>,
    target: Vec<TransformerBlock>,
    trunk: Linear,
    arrival: Linear,
    action: Linear,
}

fn points_tensor(points: &[Point]) -> Tensor {
    let data = points.iter().flat_map(|p| *p).collect();
    Tensor::new(&[points.len(), 2], data).expect("two columns")
}

fn tensor_points(t: &Tensor) -> Vec<Point> {
    t.data().chunks(2).map(|c| [c[0], c[1]]).collect()
}

impl PolicyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut store = ParamStore::new();
        let d = config.token_dim();
        let hidden = config.mlp_ratio * d;
        let n_track = if config.use_tracking { config.n_track_layers } else { 0 };
        let depth = DepthEncoder::new(&mut store, "depth", config.perception.depth_dim, r);
        let tracking = TrackingAttention::new(&mut store, "track", n_track, d, config.heads, r)?;
        let frame_emb = store.uniform("frame_emb", &[config.context_n, d], 0.1, r);
        let traj = Mlp::new(&mut store, "traj", 2, config.embed_hidden, d, r);
        let target_embed = Mlp::new(&mut store, "target_embed", 2, config.embed_hidden, d, r);
        let global = (0..config.n_global_layers)
            .map(|l| TransformerBlock::new(&mut store, &format!("global.{l}"), d, config.heads, hidden, r))
            .collect::<Result<_, _>>()?;
        let target = (0..config.n_target_layers)
            .map(|l| TransformerBlock::new(&mut store, &format!("target.{l}"), d, config.heads, hidden, r))
            .collect::<Result<_, _>>()?;
        let trunk = Linear::new(&mut store, "head.trunk", d, d, r);
        let arrival = Linear::new(&mut store, "head.arrival", d, 1, r);
        let action = Linear::new(&mut store, "head.action", d, 2 * config.horizon, r);
        Ok(Self {
            config,
            store,
            depth,
            tracking,
            frame_emb,
            traj,
            target_embed,
            global,
            target,
            trunk,
            arrival,
            action,
        })
    }

    /// A graph with every parameter bound.
    pub fn graph(&self) -> Graph {
        let mut g = Graph::new();
        g.bind_params(self.store.tensors());
        g
    }

    /// Per-frame token grids after tracking-guided attention, `[HW × d]` each.
    pub fn frame_tokens(&self, g: &mut Graph, window: &ObservationWindow) -> Result<Vec<Var>, PolicyError> {
        let grid = self.config.perception.grid;
        let mut frames = Vec::with_capacity(window.frames.len());
        for f in &window.frames {
            let x = g.constant(f.appearance.clone());
            let z = if self.config.use_depth {
                self.depth.forward(g, &f.depth)?
            } else {
                g.constant(Tensor::zeros(&[grid.len(), self.config.perception.depth_dim]))
            };
            frames.push(assemble_tokens_var(g, x, z, self.config.use_depth)?);
        }
        if self.config.use_tracking && !window.tracks.is_empty() {
            frames = self.tracking.forward(g, &frames, &window.tracks, grid)?;
        }
        Ok(frames)
    }

    /// Trajectory tokens `w` for `[N × 2]` ego-frame positions.
    pub fn encode_trajectory(&self, g: &mut Graph, positions: Var) -> Result<Var, PolicyError> {
        let n = self.config.context_n;
        if g.shape(positions) != [n, 2] {
            let got = g.shape(positions).first().copied().unwrap_or(0);
            return Err(TensorError::Dimension {
                op: "encode_trajectory",
                axis: 0,
                expected: n,
                got,
            }
            .into());
        }
        let x = g.scale(positions, 1.0 / self.config.pos_scale);
        Ok(self.traj.forward(g, x)?)
    }

    /// Target token `g` for a `[1 × 2]` sub-goal.
    pub fn encode_target(&self, g: &mut Graph, subgoal: Var) -> Result<Var, PolicyError> {
        if g.shape(subgoal) != [1, 2] {
            return Err(TensorError::Dimension {
                op: "encode_target",
                axis: 1,
                expected: 2,
                got: g.value(subgoal).len(),
            }
            .into());
        }
        let x = g.scale(subgoal, 1.0 / self.config.pos_scale);
        Ok(self.target_embed.forward(g, x)?)
    }

    fn global_positions(&self, n_frames: usize) -> Vec<Point> {
        let centers = self.config.perception.grid.centers();
        let mut pos = Vec::new();
        for _ in 0..n_frames {
            if self.config.use_patch_tokens {
                pos.extend_from_slice(&centers);
            } else {
                pos.push([0.0, 0.0]);
            }
        }
        pos.extend(std::iter::repeat_n([0.0, 0.0], n_frames));
        pos
    }

    /// Joint self-attention over every frame's tokens followed by the
    /// trajectory tokens. Returns the whole sequence.
    pub fn global_attention(&self, g: &mut Graph, frames: &[Var], traj: Var) -> Result<Var, PolicyError> {
        let n = self.config.context_n;
        if frames.len() != n || g.value(traj).rows() != n {
            return Err(PolicyError::Window(format!(
                "global attention needs {n} frames and {n} trajectory tokens, got {} and {}",
                frames.len(),
                g.value(traj).rows()
            )));
        }
        let emb = self.frame_emb.var(g);
        let mut parts = Vec::with_capacity(n + 1);
        for (i, f) in frames.iter().enumerate() {
            let t = if self.config.use_patch_tokens {
                *f
            } else {
                g.mean_rows(*f)
            };
            let e = g.slice_rows(emb, i, 1)?;
            parts.push(g.add_bias(t, e)?);
        }
        parts.push(g.add(traj, emb)?);
        let mut x = g.concat_rows(&parts)?;
        let pos = self.global_positions(n);
        for block in &self.global {
            x = block.forward(g, x, Some(&pos), None)?;
        }
        Ok(x)
    }

    /// The target token after attending over `[h_global; g]`: `[1 × d]`.
    /// Positions are already mixed into `h_global`, so no RoPE here.
    pub fn target_attention(&self, g: &mut Graph, h_global: Var, target: Var) -> Result<Var, PolicyError> {
        let Some((last, rest)) = self.target.split_last() else {
            return Ok(target);
        };
        let mut x = g.concat_rows(&[h_global, target])?;
        for block in rest {
            x = block.forward(g, x, None, None)?;
        }
        Ok(last.forward_tail(g, x, 1, None)?)
    }

    /// Waypoints `[horizon × 2]` (cumulative sums of predicted steps) and the
    /// arrival probability `[1 × 1]`.
    pub fn heads(&self, g: &mut Graph, token: Var) -> Result<ForwardVars, PolicyError> {
        let h = self.config.horizon;
        let t = self.trunk.forward(g, token)?;
        let t = g.gelu(t);
        let logit = self.arrival.forward(g, t)?;
        let arrival = g.sigmoid(logit);
        let steps = self.action.forward(g, t)?;
        let steps = g.reshape(steps, &[h, 2])?;
        let tri = Tensor::new(
            &[h, h],
            (0..h * h).map(|i| if i % h <= i / h { 1.0 } else { 0.0 }).collect(),
        )?;
        let tri = g.constant(tri);
        let waypoints = g.matmul(tri, steps)?;
        Ok(ForwardVars { waypoints, arrival })
    }

    pub fn forward(&self, g: &mut Graph, window: &ObservationWindow) -> Result<ForwardVars, PolicyError> {
        window.validate(&self.config)?;
        let frames = self.frame_tokens(g, window)?;
        let p = g.constant(points_tensor(&window.positions));
        let w = self.encode_trajectory(g, p)?;
        let h = self.global_attention(g, &frames, w)?;
        let s = g.constant(points_tensor(&[window.subgoal]));
        let target = self.encode_target(g, s)?;
        let token = self.target_attention(g, h, target)?;
        self.heads(g, token)
    }

    pub fn predict(&self, window: &ObservationWindow) -> Result<PolicyOutput, PolicyError> {
        let mut g = self.graph();
        let out = self.forward(&mut g, window)?;
        Ok(PolicyOutput {
            waypoints: tensor_points(g.value(out.waypoints)),
            arrival_prob: g.value(out.arrival).data()[0],
        })
    }

    pub fn predict_batch(&self, windows: &[ObservationWindow]) -> Result<Vec<PolicyOutput>, PolicyError> {
        windows.par_iter().map(|w| self.predict(w)).collect()
    }

    /// Composite loss on the tape for one sample.
    pub fn loss_vars(&self, g: &mut Graph, sample: &TrainingSample) -> Result<LossVars, PolicyError> {
        if sample.gt_waypoints.len() != self.config.horizon {
            return Err(TensorError::Dimension {
                op: "composite_loss",
                axis: 0,
                expected: self.config.horizon,
                got: sample.gt_waypoints.len(),
            }
            .into());
        }
        let out = self.forward(g, &sample.window)?;
        composite_loss_vars(g, out, sample, &self.config)
    }

    /// Mean loss and parameter gradients over a batch, one tape per sample.
    pub fn batch_gradients(&self, batch: &[TrainingSample]) -> Result<(f64, Vec<Vec<f64>>), PolicyError> {
        if batch.is_empty() {
            return Err(PolicyError::EmptyBatch);
        }
        let per_sample: Vec<(f64, Vec<Vec<f64>>)> = batch
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut g = self.graph();
                let l = self.loss_vars(&mut g, s)?;
                let loss = g.value(l.total).data()[0];
                if !loss.is_finite() {
                    let v = |x: Var| g.value(x).data()[0];
                    return Err(PolicyError::NonFiniteLoss {
                        sample: i,
                        loss,
                        wp: v(l.wp),
                        arrival: v(l.arrival),
                        direction: v(l.direction),
                    });
                }
                let grads = g.backward(l.total);
                let gs = g
                    .params()
                    .iter()
                    .zip(self.store.tensors())
                    .map(|(v, t)| grads.get_or_zeros(*v, t.len()))
                    .collect();
                Ok((loss, gs))
            })
            .collect::<Result<_, PolicyError>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut total: Vec<Vec<f64>> = self.store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        for (l, gs) in per_sample {
            loss += l;
            for (acc, g) in total.iter_mut().zip(gs) {
                acc.iter_mut().zip(g).for_each(|(a, x)| *a += x);
            }
        }
        for acc in &mut total {
            acc.iter_mut().for_each(|a| *a *= scale);
        }
        Ok((loss * scale, total))
    }

    /// `SWCK` bytes: magic, version, config JSON, then named tensors.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_header(SWCK_MAGIC, SWCK_VERSION);
        w.str(&serde_json::to_string(&self.config).expect("config serializes"));
        w.len_u32(self.store.len());
        for (name, t) in self.store.iter() {
            w.str(name);
            w.tensor(t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let (mut r, _) = Reader::header(bytes, SWCK_MAGIC, SWCK_VERSION)?;
        let at = r.offset();
        let json = r.str()?;
        let config: ModelConfig = serde_json::from_str(&json).map_err(|e| FormatError::Invalid {
            offset: at,
            msg: format!("config: {e}"),
        })?;
        let mut model = Self::new(config, 0)?;
        let n = r.count(8)?;
        if n != model.store.len() {
            return Err(r
                .invalid(format!("expected {} tensors, found {n}", model.store.len()))
                .into());
        }
        let mut tensors = Vec::with_capacity(n);
        for i in 0..n {
            let at = r.offset();
            let name = r.str()?;
            let t = r.tensor()?;
            let expected = &model.store.names()[i];
            let want = model.store.tensors()[i].shape();
            if &name != expected || t.shape() != want {
                return Err(FormatError::Invalid {
                    offset: at,
                    msg: format!("tensor {i}: expected {expected} {want:?}, found {name} {:?}", t.shape()),
                }
                .into());
            }
            tensors.push(t);
        }
        r.finish()?;
        for (slot, t) in model.store.tensors_mut().iter_mut().zip(tensors) {
            *slot = t;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        Ok(format::write_atomic(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let bytes = std::fs::read(path).map_err(FormatError::from)?;
        Self::from_bytes(&bytes)
    }
}

const SWCK_MAGIC: &[u8; 4] = b"SWCK";
const SWCK_VERSION: u32 = 1;

/// `L = L_wp + λ_arrvd·L_arrvd + λ_dir·L_dir` on the tape.
pub fn composite_loss_vars(
    g: &mut Graph,
    out: ForwardVars,
    sample: &TrainingSample,
    cfg: &ModelConfig,
) -> Result<LossVars, PolicyError> {
    let gt = g.constant(points_tensor(&sample.gt_waypoints));
    let diff = g.sub(out.waypoints, gt)?;
    let sq = g.mul(diff, diff)?;
    let wp = g.mean(sq);
    let arrival = g.bce(out.arrival, if sample.gt_arrived { 1.0 } else { 0.0 })?;
    // A window whose ground truth never moves has no heading to match.
    let moving = geom::steps_from_origin(&sample.gt_waypoints)
        .iter()
        .any(|s| geom::norm(*s) >= DEGENERATE_STEP);
    let direction = if moving {
        direction_loss_var(g, out.waypoints, &sample.gt_waypoints)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let a = g.scale(arrival, cfg.lambda_arrvd);
    let d = g.scale(direction, cfg.lambda_dir);
    let total = g.add(wp, a)?;
    let total = g.add(total, d)?;
    Ok(LossVars {
        total,
        wp,
        arrival,
        direction,
    })
}

/// Mean absolute angle (radians) between predicted and ground-truth step
/// directions. Steps start at the origin; ground-truth steps shorter than
/// [`DEGENERATE_STEP`] are skipped.
pub fn direction_loss(pred: &[Point], gt: &[Point]) -> Result<f64, PolicyError> {
    if pred.len() != gt.len() {
        return Err(TensorError::Dimension {
            op: "direction_loss",
            axis: 0,
            expected: gt.len(),
            got: pred.len(),
        }
        .into());
    }
    let (ps, gs) = (geom::steps_from_origin(pred), geom::steps_from_origin(gt));
    let angles: Vec<f64> = ps
        .iter()
        .zip(&gs)
        .filter(|(_, g)| geom::norm(**g) >= DEGENERATE_STEP)
        .map(|(p, g)| geom::step_angle(*p, *g))
        .collect();
    if angles.is_empty() {
        return Err(PolicyError::UndefinedDirection);
    }
    Ok(angles.iter().sum::<f64>() / angles.len() as f64)
}

/// [`direction_loss`] on the tape, differentiable in the predicted waypoints.
pub fn direction_loss_var(g: &mut Graph, pred: Var, gt: &[Point]) -> Result<Var, PolicyError> {
    let pv = tensor_points(g.value(pred));
    let value = direction_loss(&pv, gt)?;
    let gs = geom::steps_from_origin(gt);
    let backward = Box::new(move |inputs: &[&Tensor], _: &Tensor, gy: &[f64]| {
        let pred = tensor_points(inputs[0]);
        let ps = geom::steps_from_origin(&pred);
        let used = gs.iter().filter(|s| geom::norm(**s) >= DEGENERATE_STEP).count() as f64;
        let mut grad = vec![0.0; 2 * pred.len()];
        for (k, (p, s)) in ps.iter().zip(&gs).enumerate() {
            let len2 = geom::dot(*p, *p);
            if geom::norm(*s) < DEGENERATE_STEP || len2 < DEGENERATE_STEP * DEGENERATE_STEP {
                continue;
            }
            let signed = geom::cross(*s, *p).atan2(geom::dot(*s, *p));
            let sign = signed.signum() * gy[0] / used;
            let d = [-p[1] / len2 * sign, p[0] / len2 * sign];
            grad[2 * k] += d[0];
            grad[2 * k + 1] += d[1];
            if k > 0 {
                grad[2 * (k - 1)] -= d[0];
                grad[2 * (k - 1) + 1] -= d[1];
            }
        }
        vec![grad]
    });
    Ok(g.custom(&[pred], Tensor::scalar(value), backward))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub wp: f64,
    pub arrival: f64,
    pub direction: f64,
}

/// The composite loss of an already computed prediction.
pub fn composite_loss(
    pred: &PolicyOutput,
    sample: &TrainingSample,
    cfg: &ModelConfig,
) -> Result<LossParts, PolicyError> {
    if pred.waypoints.len() != sample.gt_waypoints.len() {
        return Err(TensorError::Dimension {
            op: "composite_loss",
            axis: 0,
            expected: sample.gt_waypoints.len(),
            got: pred.waypoints.len(),
        }
        .into());
    }
    let mut g = Graph::new();
    let waypoints = g.constant(points_tensor(&pred.waypoints));
    let arrival = g.constant(Tensor::new(&[1, 1], vec![pred.arrival_prob])?);
    let l = composite_loss_vars(&mut g, ForwardVars { waypoints, arrival }, sample, cfg)?;
    let v = |x: Var| g.value(x).data()[0];
    Ok(LossParts {
        total: v(l.total),
        wp: v(l.wp),
        arrival: v(l.arrival),
        direction: v(l.direction),
    })
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((x, g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *x -= lr * (update + self.weight_decay * *x);
            }
        }
    }
}

/// One optimizer step on the mean composite loss. Returns the pre-step loss.
pub fn train_step(
    model: &mut PolicyModel,
    opt: &mut AdamW,
    batch: &[TrainingSample],
    lr: f64,
) -> Result<f64, PolicyError> {
    let (loss, grads) = model.batch_gradients(batch)?;
    opt.update(&mut model.store, &grads, lr);
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine decay ends at `lr · final_lr_frac`.
    pub final_lr_frac: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            final_lr_frac: 0.05,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

pub fn cosine_lr(cfg: &TrainConfig, step: usize) -> f64 {
    let frac = if cfg.steps <= 1 {
        0.0
    } else {
        step as f64 / (cfg.steps - 1) as f64
    };
    let lo = cfg.lr * cfg.final_lr_frac;
    lo + 0.5 * (cfg.lr - lo) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Minibatch training over shuffled epochs. Calls `on_step(step, loss)` after
/// every step and returns the per-step losses.
pub fn fit(
    model: &mut PolicyModel,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>, PolicyError> {
    if samples.is_empty() || cfg.batch_size == 0 {
        return Err(PolicyError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        batch.clear();
        while batch.len() < cfg.batch_size.min(samples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(samples[order[cursor]].clone());
            cursor += 1;
        }
        let loss = train_step(model, &mut opt, &batch, cosine_lr(cfg, step))?;
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}

/// Mean composite loss over `samples` without updating anything.
pub fn mean_loss(model: &PolicyModel, samples: &[TrainingSample]) -> Result<f64, PolicyError> {
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let mut g = model.graph();
            let l = model.loss_vars(&mut g, s)?;
            Ok(g.value(l.total).data()[0])
        })
        .collect::<Result<_, PolicyError>>()?;
    if losses.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
