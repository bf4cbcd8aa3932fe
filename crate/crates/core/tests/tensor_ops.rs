use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wpnav_core::tensor::nn::{linear, AttnInputs, MultiHeadAttention, ParamStore, LN_EPS};
use wpnav_core::tensor::{check_gradients, rope2d, Graph, Tensor, TensorError, Var};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn linear_op(g: &mut Graph, v: &[Var]) -> Result<Var, TensorError> {
    linear(g, v[0], v[1], v[2])
}

#[test]
fn linear_identity_and_scalar_cases() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![2.0, 3.0]]).unwrap());
    let w = g.constant(Tensor::identity(2));
    let b = g.constant(Tensor::zeros(&[2]));
    let y = linear(&mut g, x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 3.0]);

    let x = g.constant(Tensor::from_rows(&[vec![2.0]]).unwrap());
    let w = g.constant(Tensor::from_rows(&[vec![3.0]]).unwrap());
    let b = g.constant(Tensor::new(&[1], vec![1.0]).unwrap());
    let y = linear(&mut g, x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[7.0]);
}

#[test]
fn linear_shape_mismatch_names_axis() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let w = g.constant(Tensor::zeros(&[3, 2]));
    let b = g.constant(Tensor::zeros(&[4]));
    let err = linear(&mut g, x, w, b).unwrap_err();
    assert!(
        matches!(
            err,
            TensorError::Dimension {
                axis: 1,
                expected: 2,
                got: 4,
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [
        rand_tensor(&mut rng, &[3, 4]),
        rand_tensor(&mut rng, &[4, 4]),
        rand_tensor(&mut rng, &[4]),
    ];
    let r = check_gradients("linear", linear_op, &inputs, 1e-5, 1e-4).unwrap();
    assert!(r.passed(), "{r:?}");

    let inputs = [
        rand_tensor(&mut rng, &[2, 2]),
        rand_tensor(&mut rng, &[2, 2]),
        rand_tensor(&mut rng, &[2]),
    ];
    let r = check_gradients("linear", linear_op, &inputs, 1e-5, 1e-4).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    assert_eq!(r.max_rel_error, r.per_input_errors.iter().copied().fold(0.0, f64::max));
}

fn softmax_of(v: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, v.len()], v.to_vec()).unwrap());
    let y = g.softmax(x);
    g.value(y).data().to_vec()
}

#[test]
fn softmax_examples() {
    for p in softmax_of(&[0.0, 0.0, 0.0]) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = softmax_of(&[1000.0, 0.0]);
    assert!(big.iter().all(|p| p.is_finite()));
    assert!((big[0] - 1.0).abs() < 1e-12 && big[1] < 1e-12);
    let a = softmax_of(&[0.3, -1.2, 2.0]);
    let b = softmax_of(&[7.3, 5.8, 9.0]);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_examples() {
    let run = |row: Vec<f64>| {
        let d = row.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, d], row).unwrap());
        let ga = g.constant(Tensor::full(&[d], 1.0));
        let be = g.constant(Tensor::zeros(&[d]));
        let y = g.layer_norm(x, ga, be, LN_EPS).unwrap();
        g.value(y).data().to_vec()
    };
    assert!(run(vec![4.0; 5]).iter().all(|v| *v == 0.0));
    let y = run(vec![1.0, -1.0]);
    let expected = 1.0 / (1.0 + LN_EPS).sqrt();
    assert!((y[0] - expected).abs() < 1e-12 && (y[1] + expected).abs() < 1e-12);
}

fn layer_norm_op(g: &mut Graph, v: &[Var]) -> Result<Var, TensorError> {
    g.layer_norm(v[0], v[1], v[2], LN_EPS)
}

fn softmax_op(g: &mut Graph, v: &[Var]) -> Result<Var, TensorError> {
    Ok(g.softmax(v[0]))
}

const POS4: [[f64; 2]; 4] = [[0.0, 0.0], [1.5, -2.0], [3.0, 0.25], [-0.7, 4.0]];

fn rope_op(g: &mut Graph, v: &[Var]) -> Result<Var, TensorError> {
    g.rope2d(v[0], &POS4)
}

fn mha_fixture(seed: u64, heads: usize, d: usize) -> (ParamStore, MultiHeadAttention) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", d, heads, false, &mut rng).unwrap();
    (store, mha)
}

#[test]
fn every_op_passes_gradient_check_at_ten_seeds() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cases: Vec<(
            &str,
            Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>>,
            Vec<Tensor>,
        )> = vec![
            (
                "linear",
                Box::new(linear_op),
                vec![
                    rand_tensor(&mut rng, &[3, 4]),
                    rand_tensor(&mut rng, &[4, 5]),
                    rand_tensor(&mut rng, &[5]),
                ],
            ),
            ("softmax", Box::new(softmax_op), vec![rand_tensor(&mut rng, &[3, 4])]),
            (
                "layer_norm",
                Box::new(layer_norm_op),
                vec![
                    rand_tensor(&mut rng, &[3, 6]),
                    rand_tensor(&mut rng, &[6]),
                    rand_tensor(&mut rng, &[6]),
                ],
            ),
            ("rope2d", Box::new(rope_op), vec![rand_tensor(&mut rng, &[4, 8])]),
            (
                "gelu",
                Box::new(|g: &mut Graph, v: &[Var]| Ok(g.gelu(v[0]))),
                vec![rand_tensor(&mut rng, &[2, 5])],
            ),
            (
                "sigmoid",
                Box::new(|g: &mut Graph, v: &[Var]| Ok(g.sigmoid(v[0]))),
                vec![rand_tensor(&mut rng, &[2, 5])],
            ),
        ];
        for (name, op, inputs) in cases {
            let r = check_gradients(name, op, &inputs, 1e-5, 1e-3).unwrap();
            assert!(r.passed(), "seed {seed}: {r:?}");
        }
    }
}

#[test]
fn multi_head_attention_gradients() {
    for seed in 0..10u64 {
        let d = 8;
        let (store, mha) = mha_fixture(seed, 2, d);
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut inputs = vec![
            rand_tensor(&mut rng, &[3, d]),
            rand_tensor(&mut rng, &[4, d]),
            rand_tensor(&mut rng, &[4, d]),
        ];
        inputs.extend(store.tensors().iter().cloned());
        let op = |g: &mut Graph, v: &[Var]| {
            g.bind_param_vars(&v[3..]);
            mha.forward(g, v[0], v[1], v[2], AttnInputs::default()).map(|o| o.out)
        };
        let r = check_gradients("multi_head_attention", op, &inputs, 1e-5, 1e-3).unwrap();
        assert!(r.passed(), "seed {seed}: {r:?}");
    }
}

#[test]
fn attention_weights_are_row_stochastic() {
    let (store, mha) = mha_fixture(4, 2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    g.bind_params(store.tensors());
    let q = g.constant(rand_tensor(&mut rng, &[5, 8]));
    let k = g.constant(rand_tensor(&mut rng, &[6, 8]));
    let out = mha.forward(&mut g, q, k, k, AttnInputs::default()).unwrap();
    assert_eq!(out.weights.len(), 2);
    for w in out.weights {
        let w = g.value(w);
        for i in 0..w.rows() {
            let s: f64 = w.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(w.row(i).iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}

#[test]
fn single_key_attention_ignores_queries() {
    let (store, mha) = mha_fixture(5, 2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let kv = rand_tensor(&mut rng, &[1, 8]);
    let mut outs = Vec::new();
    for _ in 0..2 {
        let mut g = Graph::new();
        g.bind_params(store.tensors());
        let q = g.constant(rand_tensor(&mut rng, &[3, 8]));
        let k = g.constant(kv.clone());
        let o = mha.forward(&mut g, q, k, k, AttnInputs::default()).unwrap();
        outs.push(g.value(o.out).clone());
    }
    assert!(outs[0].max_abs_diff(&outs[1]) < 1e-9);
    // Every query row equals the projected value row.
    for i in 1..3 {
        for j in 0..8 {
            assert!((outs[0].at(i, j) - outs[0].at(0, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn rope_rejects_bad_dim() {
    let x = Tensor::zeros(&[1, 6]);
    assert!(matches!(rope2d(&x, &[[1.0, 1.0]]), Err(TensorError::Config(_))));
}

#[test]
fn rope_zero_position_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 8]);
    let y = rope2d(&x, &[[0.0, 0.0], [0.0, 0.0]]).unwrap();
    assert_eq!(x, y);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn rope_relative_property_on_100_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let q = rand_tensor(&mut rng, &[1, 16]);
        let k = rand_tensor(&mut rng, &[1, 16]);
        let p = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
        let pp = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
        let lhs = dot(rope2d(&q, &[p]).unwrap().data(), rope2d(&k, &[pp]).unwrap().data());
        let rel = [p[0] - pp[0], p[1] - pp[1]];
        let rhs = dot(
            rope2d(&q, &[rel]).unwrap().data(),
            rope2d(&k, &[[0.0, 0.0]]).unwrap().data(),
        );
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax_of(&v);
        let s: f64 = p.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn rope_is_an_isometry(
        v in prop::collection::vec(-5.0f64..5.0, 8),
        px in -100.0f64..100.0,
        py in -100.0f64..100.0,
    ) {
        let x = Tensor::new(&[1, 8], v).unwrap();
        let y = rope2d(&x, &[[px, py]]).unwrap();
        prop_assert!((x.norm() - y.norm()).abs() < 1e-9);
    }
}
