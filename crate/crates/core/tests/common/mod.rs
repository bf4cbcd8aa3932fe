#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wpnav_core::tensor::nn::ParamStore;
use wpnav_core::tensor::{check_gradients, GradReport, Graph, Tensor, TensorError, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Replace every parameter with uniform noise so that zero-initialized
/// projections do not hide gradient paths.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
}

/// Gradient check over `inputs` followed by every tensor in `store`; the op
/// receives the input vars and has the parameter vars bound on the graph.
pub fn check_with_params<F>(name: &str, store: &ParamStore, inputs: &[Tensor], tol: f64, op: F) -> GradReport
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let k = inputs.len();
    let mut all = inputs.to_vec();
    all.extend(store.tensors().iter().cloned());
    check_gradients(
        name,
        |g: &mut Graph, v: &[Var]| {
            g.bind_param_vars(&v[k..]);
            op(g, &v[..k])
        },
        &all,
        1e-5,
        tol,
    )
    .unwrap()
}

use std::sync::Arc;
use wpnav_core::perception::{observe, FrameObservation, SeededProvider, ViewSource};
use wpnav_core::policy::{ModelConfig, ObservationWindow, TrainingSample};

/// A well-formed window of seeded frames with a gentle leftward arc.
pub fn window(cfg: &ModelConfig, seed: u64) -> ObservationWindow {
    let n = cfg.context_n;
    let frames: Vec<FrameObservation> = (0..n)
        .map(|i| {
            let s = seed * 1000 + i as u64;
            FrameObservation::stereo(i as u64, ViewSource::Seed(s), ViewSource::Seed(s), 700.0, 0.1)
        })
        .collect();
    let provider = SeededProvider::with_flow([0.25, 0.0]);
    let (feats, tracks) = observe(&provider, &frames, &cfg.perception).unwrap();
    let mut r = rng(seed);
    let positions = (0..n)
        .map(|i| {
            let back = (n - 1 - i) as f64;
            [-1.2 * back, 0.05 * back * back]
        })
        .collect();
    ObservationWindow {
        frames: feats.into_iter().map(Arc::new).collect(),
        tracks,
        positions,
        subgoal: [r.gen_range(4.0..10.0), r.gen_range(-5.0..5.0)],
    }
}

/// A sample whose ground truth walks toward the sub-goal at 1.2 m per step.
pub fn sample(cfg: &ModelConfig, seed: u64) -> TrainingSample {
    let window = window(cfg, seed);
    let g = window.subgoal;
    let len = g[0].hypot(g[1]);
    let gt_waypoints = (1..=cfg.horizon)
        .map(|k| {
            let d = (1.2 * k as f64).min(len);
            [g[0] / len * d, g[1] / len * d]
        })
        .collect();
    TrainingSample {
        window,
        gt_waypoints,
        gt_arrived: seed.is_multiple_of(3),
    }
}
