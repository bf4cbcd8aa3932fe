//! Tracking-guided attention.
//!
//! Each layer runs three stages over a window of `N` frames:
//!
//! 1. track-aware sampling: track tokens `W_T · rope(e, p_{i,m})` cross-attend
//!    to the frame's image tokens, giving sampled features `S_i`;
//! 2. temporal propagation: a pre-norm transformer block runs along each
//!    track's length-`N` sequence, giving `S̃`; tracks never exchange
//!    information here;
//! 3. feature update: coordinate embeddings `rope(c, patch center)`
//!    cross-attend to `S̃_i`, and the zero-initialized output projection is
//!    added back residually, `H̃_i = H_i + ΔH_i`.
//!
//! Query and key RoPE is applied per head inside each cross-attention, at
//! track points and patch centers respectively.

use rand::Rng;

use crate::perception::{GridSpec, PerceptionError, TrackSet};
use crate::tensor::nn::{AttnInputs, AttnOutput, Linear, MultiHeadAttention, ParamId, ParamStore, TransformerBlock};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Logit bias between tokens of different tracks in the temporal stage.
/// `exp` of it underflows to exactly zero.
pub const CROSS_TRACK_BIAS: f64 = -1e30;
/// Logit bias on keys whose track point is not visible.
pub const INVISIBLE_BIAS: f64 = -1e4;

#[derive(Clone, Debug)]
pub struct TrackAttentionLayer {
    pub track_base: ParamId,
    pub w_t: Linear,
    pub sample: MultiHeadAttention,
    pub temporal: TransformerBlock,
    pub coord_base: ParamId,
    pub update: MultiHeadAttention,
    pub dim: usize,
}

fn repeat_row(g: &mut Graph, row: Var, n: usize) -> Result<Var, TensorError> {
    g.concat_rows(&vec![row; n])
}

impl TrackAttentionLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        if !dim.is_multiple_of(heads) || !(dim / heads).is_multiple_of(4) {
            return Err(TensorError::Config(format!(
                "tracking attention needs dim/heads divisible by 4 (dim {dim}, heads {heads})"
            )));
        }
        Ok(Self {
            track_base: store.uniform(format!("{name}.track_base"), &[1, dim], 1.0, rng),
            w_t: Linear::new(store, &format!("{name}.w_t"), dim, dim, rng),
            sample: MultiHeadAttention::new(store, &format!("{name}.sample"), dim, heads, false, rng)?,
            temporal: TransformerBlock::new(store, &format!("{name}.temporal"), dim, heads, 2 * dim, rng)?,
            coord_base: store.uniform(format!("{name}.coord_base"), &[1, dim], 1.0, rng),
            update: MultiHeadAttention::new(store, &format!("{name}.update"), dim, heads, true, rng)?,
            dim,
        })
    }

    /// Track tokens `q_{i,m} = W_T · rope(e, p_{i,m})` for frame `i`: `[M × d]`.
    pub fn embed_tracks(&self, g: &mut Graph, points: &[[f64; 2]]) -> Result<Var, TensorError> {
        let e = self.track_base.var(g);
        let rep = repeat_row(g, e, points.len())?;
        let r = g.rope2d(rep, points)?;
        self.w_t.forward(g, r)
    }

    /// `S_i`: track tokens attend to the frame's image tokens.
    pub fn track_sample(
        &self,
        g: &mut Graph,
        track_tokens: Var,
        track_points: &[[f64; 2]],
        image_tokens: Var,
        grid: GridSpec,
    ) -> Result<AttnOutput, TensorError> {
        let centers = grid.centers();
        self.sample.forward(
            g,
            track_tokens,
            image_tokens,
            image_tokens,
            AttnInputs {
                q_pos: Some(track_points),
                k_pos: Some(&centers),
                logit_bias: None,
            },
        )
    }

    /// `S̃` from per-frame `S_i` (`[M × d]` each). Returns per-frame `S̃_i`.
    pub fn temporal_propagate(
        &self,
        g: &mut Graph,
        sampled: &[Var],
        tracks: &TrackSet,
    ) -> Result<Vec<Var>, TensorError> {
        let n = sampled.len();
        let m = tracks.len();
        if let Some(t) = tracks
            .tracks
            .iter()
            .position(|t| t.points.len() != n || t.visible.len() != n)
        {
            return Err(TensorError::Evaluation(format!(
                "ragged tracks: track {t} does not have one point per frame of a {n}-frame window"
            )));
        }
        for s in sampled {
            if g.value(*s).rows() != m {
                return Err(TensorError::Dimension {
                    op: "temporal_propagate",
                    axis: 0,
                    expected: m,
                    got: g.value(*s).rows(),
                });
            }
        }
        // Frame-major stacking: row i*M + m.
        let stacked = g.concat_rows(sampled)?;
        let rows = n * m;
        let mut bias = vec![0.0; rows * rows];
        for a in 0..rows {
            for b in 0..rows {
                let (tb, ta) = (b % m, a % m);
                bias[a * rows + b] = if ta != tb {
                    CROSS_TRACK_BIAS
                } else if !tracks.tracks[tb].visible[b / m] {
                    INVISIBLE_BIAS
                } else {
                    0.0
                };
            }
        }
        let bias = Tensor::new(&[rows, rows], bias)?;
        let pos: Vec<[f64; 2]> = (0..rows).map(|r| [(r / m) as f64, 0.0]).collect();
        let out = self.temporal.forward(g, stacked, Some(&pos), Some(&bias))?;
        (0..n).map(|i| g.slice_rows(out, i * m, m)).collect()
    }

    /// `H̃_i = H_i + Attn(C W'_Q, S̃_i W'_K, S̃_i W'_V) W'_O`.
    pub fn feature_update(
        &self,
        g: &mut Graph,
        image_tokens: Var,
        propagated: Var,
        track_points: &[[f64; 2]],
        grid: GridSpec,
    ) -> Result<Var, TensorError> {
        let centers = grid.centers();
        let c = self.coord_base.var(g);
        let rep = repeat_row(g, c, centers.len())?;
        let coords = g.rope2d(rep, &centers)?;
        let delta = self.update.forward(
            g,
            coords,
            propagated,
            propagated,
            AttnInputs {
                q_pos: Some(&centers),
                k_pos: Some(track_points),
                logit_bias: None,
            },
        )?;
        g.add(image_tokens, delta.out)
    }

    /// All three stages over a window of per-frame token grids `[HW × d]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        frames: &[Var],
        tracks: &TrackSet,
        grid: GridSpec,
    ) -> Result<Vec<Var>, PerceptionError> {
        tracks.validate_structure(frames.len())?;
        if tracks.is_empty() {
            return Ok(frames.to_vec());
        }
        let mut sampled = Vec::with_capacity(frames.len());
        for (i, h) in frames.iter().enumerate() {
            let pts = tracks.frame_points(i);
            let q = self.embed_tracks(g, &pts)?;
            sampled.push(self.track_sample(g, q, &pts, *h, grid)?.out);
        }
        let propagated = self.temporal_propagate(g, &sampled, tracks)?;
        let mut out = Vec::with_capacity(frames.len());
        for (i, (h, s)) in frames.iter().zip(&propagated).enumerate() {
            let pts = tracks.frame_points(i);
            out.push(self.feature_update(g, *h, *s, &pts, grid)?);
        }
        Ok(out)
    }
}

/// A stack of tracking-guided attention layers placed before global attention.
#[derive(Clone, Debug)]
pub struct TrackingAttention {
    pub layers: Vec<TrackAttentionLayer>,
}

impl TrackingAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        n_layers: usize,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let layers = (0..n_layers)
            .map(|l| TrackAttentionLayer::new(store, &format!("{name}.{l}"), dim, heads, rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { layers })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        frames: &[Var],
        tracks: &TrackSet,
        grid: GridSpec,
    ) -> Result<Vec<Var>, PerceptionError> {
        let mut h = frames.to_vec();
        for layer in &self.layers {
            h = layer.forward(g, &h, tracks, grid)?;
        }
        Ok(h)
    }
}
