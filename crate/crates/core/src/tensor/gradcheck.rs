use super::{Graph, Tensor, TensorError, Var};

/// Denominator floor for relative errors, so gradients that are zero in both
/// routes do not divide by zero.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op_name: String,
    /// Largest relative error over every input position.
    pub max_rel_error: f64,
    /// Largest relative error per input tensor.
    pub per_input_errors: Vec<f64>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn projection_weights(n: usize) -> Vec<f64> {
    // Fixed irrational-ish weights so the scalarized output does not cancel
    // symmetric gradient components.
    (0..n)
        .map(|i| 0.5 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract())
        .collect()
}

fn scalarize(g: &mut Graph, y: Var) -> Result<Var, TensorError> {
    let w = projection_weights(g.value(y).len());
    let shape = g.shape(y).to_vec();
    let wv = g.constant(Tensor::new(&shape, w)?);
    let prod = g.mul(y, wv)?;
    Ok(g.sum(prod))
}

fn evaluate<F>(op: &F, inputs: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = op(&mut g, &vars)?;
    if !g.value(y).is_finite() {
        return Err(TensorError::Evaluation("non-finite forward value".into()));
    }
    let s = scalarize(&mut g, y)?;
    Ok(g.value(s).data()[0])
}

/// Compare the tape gradient of `op` against central finite differences at
/// every scalar position of every input.
///
/// The op output is reduced to a scalar with fixed positive weights before
/// differentiation.
pub fn check_gradients<F>(
    op_name: &str,
    op: F,
    inputs: &[Tensor],
    step: f64,
    tol: f64,
) -> Result<GradReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    if step <= 0.0 {
        return Err(TensorError::Config(format!("step must be positive, got {step}")));
    }
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(TensorError::Evaluation("non-finite input".into()));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = op(&mut g, &vars)?;
    if !g.value(y).is_finite() {
        return Err(TensorError::Evaluation(format!("{op_name}: non-finite forward value")));
    }
    let s = scalarize(&mut g, y)?;
    let grads = g.backward(s);

    let mut per_input_errors = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (idx, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[idx].len());
        let mut worst: f64 = 0.0;
        for pos in 0..inputs[idx].len() {
            let orig = inputs[idx].data()[pos];
            probe[idx].data_mut()[pos] = orig + step;
            let fp = evaluate(&op, &probe)?;
            probe[idx].data_mut()[pos] = orig - step;
            let fm = evaluate(&op, &probe)?;
            probe[idx].data_mut()[pos] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[pos];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        per_input_errors.push(worst);
    }
    let max_rel_error = per_input_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        op_name: op_name.to_string(),
        max_rel_error,
        per_input_errors,
        tolerance: tol,
    })
}
