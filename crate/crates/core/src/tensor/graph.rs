use super::{rope_frequencies, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a user-supplied op: `(input values, output value, output grad) -> input grads`.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>> + Send + Sync>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Passthrough(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Rope {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    Sum(Var),
    Bce {
        p: Var,
        target: f64,
        clamped: bool,
    },
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Values are computed eagerly as ops are recorded.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or zeros of length `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn check_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    if t.shape().len() != 2 {
        return Err(TensorError::Rank {
            op,
            expected: 2,
            shape: t.shape().to_vec(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn dim_err(op: &'static str, axis: usize, expected: usize, got: usize) -> TensorError {
    TensorError::Dimension {
        op,
        axis,
        expected,
        got,
    }
}

// a[n×k] · b[k×m]
fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// a[n×k] · b[m×k]ᵀ
fn matmul_t_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

// a[k×n]ᵀ · b[k×m]
fn t_matmul_raw(a: &[f64], b: &[f64], k: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for (i, av) in arow.iter().enumerate() {
            if *av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a leaf. Gradients flow into it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad();
        self.push(t, Op::Leaf, ng)
    }

    /// Record a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Record a leaf that always receives gradients.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(true), Op::Leaf, true)
    }

    /// Register parameter tensors as gradient-carrying leaves; see [`Graph::param`].
    pub fn bind_params<'a>(&mut self, params: impl IntoIterator<Item = &'a Tensor>) {
        let vars: Vec<Var> = params.into_iter().map(|t| self.variable(t.clone())).collect();
        self.params = vars;
    }

    /// Use already-recorded vars as the parameter set (e.g. gradient-check inputs).
    pub fn bind_param_vars(&mut self, vars: &[Var]) {
        self.params = vars.to_vec();
    }

    pub fn param(&self, index: usize) -> Var {
        self.params[index]
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n, k) = check_rank2("matmul", self.value(a))?;
        let (k2, m) = check_rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(dim_err("matmul", 0, k, k2));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a: [n×k]`, `b: [m×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n, k) = check_rank2("matmul_t", self.value(a))?;
        let (m, k2) = check_rank2("matmul_t", self.value(b))?;
        if k != k2 {
            return Err(dim_err("matmul_t", 1, k, k2));
        }
        let out = matmul_t_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMulT(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(TensorError::Rank {
                op,
                expected: sa.len(),
                shape: sb.to_vec(),
            });
        }
        if let Some(axis) = (0..sa.len()).find(|&i| sa[i] != sb[i]) {
            return Err(dim_err(op, axis, sa[axis], sb[axis]));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(va.shape(), data).expect("same shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `a[n×d] + b` where `b` holds `d` values broadcast over rows.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let d = self.value(a).cols();
        let bl = self.value(b).len();
        if bl != d {
            let axis = self.shape(a).len() - 1;
            return Err(dim_err("add_bias", axis, d, bl));
        }
        let bv = self.value(b).data().to_vec();
        let va = self.value(a);
        let data = va
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(&bv).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::AddBias(a, b), ng))
    }

    /// Add a constant tensor (no gradient flows into `c`).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var, TensorError> {
        let va = self.value(a);
        if va.shape() != c.shape() {
            let axis = (0..va.shape().len().min(c.shape().len()))
                .find(|&i| va.shape()[i] != c.shape()[i])
                .unwrap_or(0);
            return Err(dim_err(
                "add_const",
                axis,
                va.shape().get(axis).copied().unwrap_or(0),
                c.shape().get(axis).copied().unwrap_or(0),
            ));
        }
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Passthrough(a), ng))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.data().iter().map(|x| f(*x)).collect()).expect("same shape");
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    /// Softmax over the trailing axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let k = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(k) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(va.shape(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::Config(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let vx = self.value(x);
        let d = vx.cols();
        let axis = vx.shape().len() - 1;
        for v in [gamma, beta] {
            if self.value(v).len() != d {
                return Err(dim_err("layer_norm", axis, d, self.value(v).len()));
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let n = vx.rows();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(vx.shape(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// 2D rotary position encoding, one coordinate per row.
    ///
    /// With `d = 4q`, pairs `0..q` rotate by `pos.x · freq[i]` and pairs
    /// `q..2q` by `pos.y · freq[i - q]`.
    pub fn rope2d(&mut self, x: Var, pos: &[[f64; 2]]) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let d = vx.cols();
        let n = vx.rows();
        if !d.is_multiple_of(4) {
            return Err(TensorError::Config(format!(
                "rope2d needs a feature dim divisible by 4, got {d}"
            )));
        }
        if pos.len() != n {
            return Err(dim_err("rope2d", 0, n, pos.len()));
        }
        let q = d / 4;
        let freqs = rope_frequencies(q);
        let half = d / 2;
        let mut cos = vec![0.0; n * half];
        let mut sin = vec![0.0; n * half];
        let mut out = vx.data().to_vec();
        for (i, p) in pos.iter().enumerate() {
            for pair in 0..half {
                let angle = if pair < q {
                    p[0] * freqs[pair]
                } else {
                    p[1] * freqs[pair - q]
                };
                let (s, c) = angle.sin_cos();
                cos[i * half + pair] = c;
                sin[i * half + pair] = s;
                let a = out[i * d + 2 * pair];
                let b = out[i * d + 2 * pair + 1];
                out[i * d + 2 * pair] = c * a - s * b;
                out[i * d + 2 * pair + 1] = s * a + c * b;
            }
        }
        let t = Tensor::new(vx.shape(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Rope { x, cos, sin }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Config("concat_rows of nothing".into()))?;
        let d = self.value(*first).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != d {
                return Err(dim_err("concat_rows", 1, d, v.cols()));
            }
            n += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(Tensor::new(&[n, d], data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Config("concat_cols of nothing".into()))?;
        let n = self.value(*first).rows();
        let mut d = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != n {
                return Err(dim_err("concat_cols", 0, n, v.rows()));
            }
            d += v.cols();
        }
        let mut data = vec![0.0; n * d];
        let mut off = 0;
        for p in parts {
            let v = self.value(*p);
            let c = v.cols();
            for i in 0..n {
                data[i * d + off..i * d + off + c].copy_from_slice(v.row(i));
            }
            off += c;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(Tensor::new(&[n, d], data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let v = self.value(x);
        let (n, d) = (v.rows(), v.cols());
        if len == 0 || start + len > n {
            return Err(dim_err("slice_rows", 0, n, start + len));
        }
        let data = v.data()[start * d..(start + len) * d].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[len, d], data)?, Op::SliceRows(x, start), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let v = self.value(x);
        let (n, d) = (v.rows(), v.cols());
        if len == 0 || start + len > d {
            return Err(dim_err("slice_cols", 1, d, start + len));
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&v.row(i)[start..start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[n, len], data)?, Op::SliceCols(x, start), ng))
    }

    /// Mean over rows: `[n×d] -> [1×d]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (n, d) = (v.rows(), v.cols());
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, val) in out.iter_mut().zip(v.row(i)) {
                *o += val / n as f64;
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[1, d], out).expect("d > 0"), Op::MeanRows(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Passthrough(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Binary cross-entropy of a probability against a 0/1 target.
    /// The probability is clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, p: Var, target: f64) -> Result<Var, TensorError> {
        let v = self.value(p);
        if v.len() != 1 {
            return Err(dim_err("bce", 0, 1, v.len()));
        }
        let raw = v.data()[0];
        let pc = raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let loss = -(target * pc.ln() + (1.0 - target) * (1.0 - pc).ln());
        let clamped = pc != raw;
        let ng = self.ng(p);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, target, clamped }, ng))
    }

    /// Record an op with a caller-supplied forward value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let ng = inputs.iter().any(|v| self.ng(*v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            ng,
        )
    }

    /// Reverse pass from `root`, seeding it with ones.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn backward_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.ng(*a) {
                    self.acc(grads, *a, matmul_t_raw(gy, vb.data(), n, m, k));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, t_matmul_raw(va.data(), gy, n, k, m));
                }
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
                if self.ng(*a) {
                    self.acc(grads, *a, matmul_raw(gy, vb.data(), n, m, k));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, t_matmul_raw(gy, va.data(), n, m, k));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.to_vec());
                self.acc(grads, *b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gy.to_vec());
                self.acc(grads, *b, gy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, gy.iter().zip(vb).map(|(g, x)| g * x).collect());
                self.acc(grads, *b, gy.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::AddBias(a, b) => {
                self.acc(grads, *a, gy.to_vec());
                let d = y.cols();
                self.acc_with(grads, *b, |gb| {
                    for row in gy.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(e, g)| *e += g);
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, gy.iter().map(|g| g * c).collect()),
            Op::Passthrough(a) => self.acc(grads, *a, gy.to_vec()),
            Op::Gelu(a) => {
                let xs = self.value(*a).data();
                let g = xs
                    .iter()
                    .zip(gy)
                    .map(|(&x, g)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.acc(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let g = y.data().iter().zip(gy).map(|(s, g)| g * s * (1.0 - s)).collect();
                self.acc(grads, *a, g);
            }
            Op::Softmax(a) => {
                let k = y.cols();
                let mut g = vec![0.0; y.len()];
                for ((yr, gr), out) in y.data().chunks(k).zip(gy.chunks(k)).zip(g.chunks_mut(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = y.cols();
                let n = y.rows();
                let gam = self.value(*gamma).data();
                if self.ng(*x) {
                    let mut gx = vec![0.0; n * d];
                    for i in 0..n {
                        let gr = &gy[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        let dxh: Vec<f64> = gr.iter().zip(gam).map(|(g, w)| g * w).collect();
                        let m1 = dxh.iter().sum::<f64>() / d as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[i * d + j] = rstd[i] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                self.acc_with(grads, *gamma, |gg| {
                    for (gr, xh) in gy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xh[j];
                        }
                    }
                });
                self.acc_with(grads, *beta, |gb| {
                    for gr in gy.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(e, g)| *e += g);
                    }
                });
            }
            Op::Rope { x, cos, sin } => {
                let d = y.cols();
                let half = d / 2;
                let mut gx = gy.to_vec();
                for i in 0..y.rows() {
                    for pair in 0..half {
                        let (c, s) = (cos[i * half + pair], sin[i * half + pair]);
                        let ga = gy[i * d + 2 * pair];
                        let gb = gy[i * d + 2 * pair + 1];
                        gx[i * d + 2 * pair] = c * ga + s * gb;
                        gx[i * d + 2 * pair + 1] = -s * ga + c * gb;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.acc(grads, *p, gy[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let d = y.cols();
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.ng(*p) {
                        let g = gy.chunks(d).flat_map(|row| row[off..off + c].iter().copied()).collect();
                        self.acc(grads, *p, g);
                    }
                    off += c;
                }
            }
            Op::SliceRows(x, start) => {
                let d = y.cols();
                self.acc_with(grads, *x, |gx| {
                    gx[start * d..start * d + gy.len()]
                        .iter_mut()
                        .zip(gy)
                        .for_each(|(e, g)| *e += g);
                });
            }
            Op::SliceCols(x, start) => {
                let len = y.cols();
                let d = self.value(*x).cols();
                self.acc_with(grads, *x, |gx| {
                    for (i, gr) in gy.chunks(len).enumerate() {
                        for j in 0..len {
                            gx[i * d + start + j] += gr[j];
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let vx = self.value(*x);
                let n = vx.rows() as f64;
                let g = (0..vx.rows()).flat_map(|_| gy.iter().map(|g| g / n)).collect();
                self.acc(grads, *x, g);
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                self.acc(grads, *x, vec![gy[0]; len]);
            }
            Op::Bce { p, target, clamped } => {
                let g = if *clamped {
                    0.0
                } else {
                    let pv = self.value(*p).data()[0];
                    gy[0] * (-(target / pv) + (1.0 - target) / (1.0 - pv))
                };
                self.acc(grads, *p, vec![g]);
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = backward(&vals, y, gy);
                for (v, g) in inputs.iter().zip(gs) {
                    self.acc(grads, *v, g);
                }
            }
        }
    }
}

pub const BCE_CLAMP: f64 = 1e-7;

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(t(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let ct = g.matmul_t(a, b).unwrap();
        assert_eq!(g.value(ct).data(), &[17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn matmul_shape_error_names_axis() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        match g.matmul(a, b) {
            Err(TensorError::Dimension {
                axis, expected, got, ..
            }) => {
                assert_eq!((axis, expected, got), (0, 3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[1, 2], 2.0));
        let b = g.variable(Tensor::full(&[1, 2], 3.0));
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::scalar(3.0));
        let b = g.mul(a, a).unwrap();
        let c = g.add(b, a).unwrap();
        let grads = g.backward(c);
        assert_eq!(grads.get(a).unwrap(), &[7.0]);
    }

    #[test]
    fn bce_clamps_extremes() {
        let mut g = Graph::new();
        let p = g.variable(Tensor::scalar(1.0));
        let l = g.bce(p, 0.0).unwrap();
        let v = g.value(l).data()[0];
        assert!(v.is_finite());
        let expected = -(1.0 - (1.0 - BCE_CLAMP)).ln();
        assert!((v - expected).abs() < 1e-9);
    }
}
