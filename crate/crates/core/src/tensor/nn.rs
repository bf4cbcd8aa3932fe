//! Parameterized layers on top of the tape: linear projections, layer norm,
//! MLPs, multi-head attention and pre-norm transformer blocks.

use rand::Rng;

use super::{Graph, Tensor, TensorError, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn var(self, g: &Graph) -> Var {
        g.param(self.0)
    }
}

/// Named, ordered parameter tensors of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform in `±bound`.
    pub fn uniform<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut R) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape, data).expect("positive dims"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// `y = x·W + b` on tape values.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = (1.0 / d_in as f64).sqrt();
        let w = store.uniform(format!("{name}.w"), &[d_in, d_out], bound, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[d_in, d_out]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        linear(g, x, self.w.var(g), self.b.var(g))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        let (gamma, beta) = (self.gamma.var(g), self.beta.var(g));
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Optional positional and masking inputs to attention.
#[derive(Clone, Copy, Default)]
pub struct AttnInputs<'a> {
    /// 2D RoPE coordinates for query rows, applied per head after projection.
    pub q_pos: Option<&'a [[f64; 2]]>,
    /// 2D RoPE coordinates for key rows.
    pub k_pos: Option<&'a [[f64; 2]]>,
    /// Additive logit bias `[n_q × n_k]`, shared by all heads.
    pub logit_bias: Option<&'a Tensor>,
}

pub struct AttnOutput {
    pub out: Var,
    /// Row-stochastic attention weights, one `[n_q × n_k]` var per head.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        zero_out: bool,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Config(format!(
                "attention dim {dim} is not divisible by {heads} heads"
            )));
        }
        let wo = if zero_out {
            Linear::zeros(store, &format!("{name}.wo"), dim, dim)
        } else {
            Linear::new(store, &format!("{name}.wo"), dim, dim, rng)
        };
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, rng),
            wo,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        q: Var,
        k: Var,
        v: Var,
        extra: AttnInputs<'_>,
    ) -> Result<AttnOutput, TensorError> {
        let n_k = g.value(k).rows();
        if n_k == 0 {
            return Err(TensorError::Config("attention needs at least one key".into()));
        }
        if g.value(v).rows() != n_k {
            return Err(TensorError::Dimension {
                op: "multi_head_attention",
                axis: 0,
                expected: n_k,
                got: g.value(v).rows(),
            });
        }
        let n_q = g.value(q).rows();
        if let Some(b) = extra.logit_bias {
            if b.shape() != [n_q, n_k] {
                return Err(TensorError::Dimension {
                    op: "multi_head_attention",
                    axis: 1,
                    expected: n_k,
                    got: b.cols(),
                });
            }
        }
        let hd = self.head_dim();
        if (extra.q_pos.is_some() || extra.k_pos.is_some()) && !hd.is_multiple_of(4) {
            return Err(TensorError::Config(format!(
                "RoPE in attention needs head dim divisible by 4, got {hd}"
            )));
        }
        let qp = self.wq.forward(g, q)?;
        let kp = self.wk.forward(g, k)?;
        let vp = self.wv.forward(g, v)?;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut head_outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut qh = g.slice_cols(qp, h * hd, hd)?;
            let mut kh = g.slice_cols(kp, h * hd, hd)?;
            let vh = g.slice_cols(vp, h * hd, hd)?;
            if let Some(pos) = extra.q_pos {
                qh = g.rope2d(qh, pos)?;
            }
            if let Some(pos) = extra.k_pos {
                kh = g.rope2d(kh, pos)?;
            }
            let scores = g.matmul_t(qh, kh)?;
            let mut scores = g.scale(scores, scale);
            if let Some(b) = extra.logit_bias {
                scores = g.add_const(scores, b)?;
            }
            let w = g.softmax(scores);
            weights.push(w);
            head_outs.push(g.matmul(w, vh)?);
        }
        let cat = if head_outs.len() == 1 {
            head_outs[0]
        } else {
            g.concat_cols(&head_outs)?
        };
        let out = self.wo.forward(g, cat)?;
        Ok(AttnOutput { out, weights })
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, false, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, mlp_hidden, dim, rng),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        pos: Option<&[[f64; 2]]>,
        logit_bias: Option<&Tensor>,
    ) -> Result<Var, TensorError> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(
            g,
            h,
            h,
            h,
            AttnInputs {
                q_pos: pos,
                k_pos: pos,
                logit_bias,
            },
        )?;
        let x = g.add(x, a.out)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }

    /// Block output for the final `n_last` rows only. Identical to slicing
    /// [`TransformerBlock::forward`] but skips the other query rows.
    pub fn forward_tail(
        &self,
        g: &mut Graph,
        x: Var,
        n_last: usize,
        pos: Option<&[[f64; 2]]>,
    ) -> Result<Var, TensorError> {
        let n = g.value(x).rows();
        let h = self.ln1.forward(g, x)?;
        let hq = g.slice_rows(h, n - n_last, n_last)?;
        let xq = g.slice_rows(x, n - n_last, n_last)?;
        let a = self.attn.forward(
            g,
            hq,
            h,
            h,
            AttnInputs {
                q_pos: pos.map(|p| &p[n - n_last..]),
                k_pos: pos,
                logit_bias: None,
            },
        )?;
        let x = g.add(xq, a.out)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}
