mod common;

use std::f64::consts::PI;
use std::sync::Arc;

use common::{check_with_params, rand_tensor, randomize, rng, sample, window};
use rand::Rng;
use wpnav_core::geom::DEGENERATE_STEP;
use wpnav_core::policy::{
    composite_loss, direction_loss, train_step, AdamW, ModelConfig, PolicyError, PolicyModel, PolicyOutput,
    TrainingSample,
};
use wpnav_core::tensor::{Graph, Tensor, TensorError};

fn tiny_model(seed: u64) -> PolicyModel {
    PolicyModel::new(ModelConfig::tiny(), seed).unwrap()
}

fn to_terr(e: PolicyError) -> TensorError {
    TensorError::Evaluation(e.to_string())
}

#[test]
fn presets() {
    let desk = ModelConfig::desk();
    assert_eq!((desk.context_n, desk.horizon), (5, 5));
    assert_eq!(
        (desk.n_track_layers, desk.n_global_layers, desk.n_target_layers),
        (2, 2, 1)
    );
    assert_eq!((desk.lambda_arrvd, desk.lambda_dir), (1.0, 10.0));
    let paper = ModelConfig::paper();
    assert_eq!(paper.token_dim(), 832);
    assert_eq!((paper.n_global_layers, paper.n_target_layers), (12, 4));
    paper.validate().unwrap();

    let mut bad = ModelConfig::desk();
    bad.heads = 3;
    assert!(matches!(PolicyModel::new(bad, 0), Err(PolicyError::Config(_))));
    let mut bad = ModelConfig::desk();
    bad.lambda_dir = -1.0;
    assert!(bad.validate().is_err());
}

#[test]
fn encode_trajectory_examples() {
    let m = PolicyModel::new(ModelConfig::desk(), 1).unwrap();
    let mut g = m.graph();
    let p = g.constant(Tensor::from_rows(&vec![vec![0.5, -1.0]; 5]).unwrap());
    let w = m.encode_trajectory(&mut g, p).unwrap();
    let w = g.value(w).clone();
    assert_eq!(w.shape(), &[5, 40]);
    for i in 1..5 {
        assert_eq!(w.row(i), w.row(0));
    }
    let short = g.constant(Tensor::zeros(&[4, 2]));
    assert!(m.encode_trajectory(&mut g, short).is_err());

    let t = tiny_model(2);
    for seed in 0..3 {
        let pos = rand_tensor(&mut rng(seed), &[2, 2]);
        let r = check_with_params("encode_trajectory", &t.store, &[pos], 1e-3, |g, v| {
            t.encode_trajectory(g, v[0]).map_err(to_terr)
        });
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn encode_target_examples() {
    let m = PolicyModel::new(ModelConfig::desk(), 3).unwrap();
    let run = || {
        let mut g = m.graph();
        let s = g.constant(Tensor::from_rows(&[vec![3.0, -2.0]]).unwrap());
        let t = m.encode_target(&mut g, s).unwrap();
        g.value(t).clone()
    };
    let a = run();
    assert_eq!(a.shape(), &[1, 40]);
    assert_eq!(a, run());

    let t = tiny_model(4);
    for seed in 0..3 {
        let s = rand_tensor(&mut rng(10 + seed), &[1, 2]);
        let r = check_with_params("encode_target", &t.store, &[s], 1e-3, |g, v| {
            t.encode_target(g, v[0]).map_err(to_terr)
        });
        assert!(r.passed(), "{r:?}");
    }
}

fn global_output(m: &PolicyModel, frames: &[Tensor], traj: &Tensor) -> Tensor {
    let mut g = m.graph();
    let f: Vec<_> = frames.iter().map(|t| g.constant(t.clone())).collect();
    let w = g.constant(traj.clone());
    let h = m.global_attention(&mut g, &f, w).unwrap();
    g.value(h).clone()
}

#[test]
fn global_attention_shapes_and_order() {
    let cfg = ModelConfig::desk();
    let m = PolicyModel::new(cfg.clone(), 5).unwrap();
    let mut r = rng(6);
    let frames: Vec<Tensor> = (0..5).map(|_| rand_tensor(&mut r, &[64, 40])).collect();
    let traj = rand_tensor(&mut r, &[5, 40]);
    let h = global_output(&m, &frames, &traj);
    assert_eq!(h.shape(), &[5 * 64 + 5, 40]);

    let mut swapped = frames.clone();
    swapped.swap(1, 3);
    assert!(global_output(&m, &swapped, &traj).max_abs_diff(&h) > 1e-6);

    let mut pooled = cfg;
    pooled.use_patch_tokens = false;
    let m = PolicyModel::new(pooled, 5).unwrap();
    assert_eq!(global_output(&m, &frames, &traj).shape(), &[5 + 5, 40]);
}

#[test]
fn target_attention_examples() {
    let m = PolicyModel::new(ModelConfig::desk(), 7).unwrap();
    let mut r = rng(8);
    let h = rand_tensor(&mut r, &[12, 40]);
    let tgt = rand_tensor(&mut r, &[1, 40]);
    let run = |h: &Tensor| {
        let mut g = m.graph();
        let (hv, tv) = (g.constant(h.clone()), g.constant(tgt.clone()));
        let out = m.target_attention(&mut g, hv, tv).unwrap();
        g.value(out).clone()
    };
    let a = run(&h);
    assert_eq!(a.shape(), &[1, 40]);
    let mut h2 = h.clone();
    h2.data_mut()[17] += 0.5;
    assert!(run(&h2).max_abs_diff(&a) > 1e-9);

    let t = tiny_model(9);
    for seed in 0..3 {
        let mut r = rng(20 + seed);
        let inputs = [rand_tensor(&mut r, &[5, 8]), rand_tensor(&mut r, &[1, 8])];
        let rep = check_with_params("target_attention", &t.store, &inputs, 1e-3, |g, v| {
            t.target_attention(g, v[0], v[1]).map_err(to_terr)
        });
        assert!(rep.passed(), "{rep:?}");
    }
}

#[test]
fn predict_contract() {
    let cfg = ModelConfig::desk();
    let m = PolicyModel::new(cfg.clone(), 11).unwrap();
    for seed in 0..4 {
        let w = window(&cfg, seed);
        let out = m.predict(&w).unwrap();
        assert_eq!(out.waypoints.len(), 5);
        assert!((0.0..=1.0).contains(&out.arrival_prob));
        assert!(out.waypoints.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
        assert_eq!(out, m.predict(&w).unwrap());
    }

    let mut w = window(&cfg, 1);
    w.positions.pop();
    assert!(matches!(m.predict(&w), Err(PolicyError::Window(msg)) if msg.contains("positions")));
    let mut w = window(&cfg, 1);
    w.frames.pop();
    assert!(matches!(m.predict(&w), Err(PolicyError::Window(_))));
    let mut w = window(&cfg, 1);
    w.subgoal = [f64::NAN, 0.0];
    assert!(matches!(m.predict(&w), Err(PolicyError::Window(_))));
    let mut w = window(&cfg, 1);
    w.tracks.tracks[0].points.pop();
    assert!(matches!(m.predict(&w), Err(PolicyError::Window(_))));
}

#[test]
fn direction_loss_examples() {
    let gt = [[1.0, 0.5], [2.0, 0.0], [2.5, -1.0]];
    assert_eq!(direction_loss(&gt, &gt).unwrap(), 0.0);

    let a = 179f64.to_radians();
    let b = (-179f64).to_radians();
    let d = direction_loss(&[[a.cos(), a.sin()]], &[[b.cos(), b.sin()]]).unwrap();
    assert!((d - 2f64.to_radians()).abs() < 1e-12);
    assert!((d - 0.0349).abs() < 1e-4);

    assert!(matches!(
        direction_loss(&[[1.0, 0.0], [2.0, 0.0]], &[[0.0, 0.0], [0.0, 0.0]]),
        Err(PolicyError::UndefinedDirection)
    ));
}

/// Heading of each step via `atan2`, difference reduced into `[-π, π]` by
/// repeated shifts.
fn brute_direction(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    let (mut pp, mut gp) = ([0.0, 0.0], [0.0, 0.0]);
    for (p, g) in pred.iter().zip(gt) {
        let ps = [p[0] - pp[0], p[1] - pp[1]];
        let gs = [g[0] - gp[0], g[1] - gp[1]];
        pp = *p;
        gp = *g;
        if gs[0].hypot(gs[1]) < DEGENERATE_STEP {
            continue;
        }
        let mut diff = ps[1].atan2(ps[0]) - gs[1].atan2(gs[0]);
        while diff > PI {
            diff -= 2.0 * PI;
        }
        while diff < -PI {
            diff += 2.0 * PI;
        }
        total += diff.abs();
        count += 1;
    }
    total / count as f64
}

#[test]
fn direction_loss_matches_brute_force() {
    let mut r = rng(30);
    for _ in 0..100 {
        let h = r.gen_range(1..8);
        let mut pts = || -> Vec<[f64; 2]> {
            (0..h)
                .map(|_| [r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0)])
                .collect()
        };
        let (p, g) = (pts(), pts());
        let got = direction_loss(&p, &g).unwrap();
        assert!((got - brute_direction(&p, &g)).abs() < 1e-9);
    }
}

fn perfect(sample: &TrainingSample, arrival_prob: f64) -> PolicyOutput {
    PolicyOutput {
        waypoints: sample.gt_waypoints.clone(),
        arrival_prob,
    }
}

#[test]
#[allow(clippy::approx_constant)]
fn composite_loss_examples() {
    let cfg = ModelConfig::desk();
    let mut s = sample(&cfg, 1);
    s.gt_arrived = true;
    let l = composite_loss(&perfect(&s, 0.5), &s, &cfg).unwrap();
    assert!((l.total - 2f64.ln()).abs() < 1e-12);
    assert!((l.total - 0.6931).abs() < 1e-4);
    assert_eq!((l.wp, l.direction), (0.0, 0.0));

    let near = composite_loss(&perfect(&s, 1.0 - 1e-9), &s, &cfg).unwrap();
    assert!(near.total < 1e-6);
    let clamped = composite_loss(&perfect(&s, 1.0), &s, &cfg).unwrap();
    assert!(clamped.total.is_finite() && clamped.total < 1e-6);
    let zero = composite_loss(&perfect(&s, 0.0), &s, &cfg).unwrap();
    assert!((zero.total + (1e-7f64).ln()).abs() < 1e-9);

    let mut r = rng(31);
    for seed in 0..20 {
        let s = sample(&cfg, seed);
        let pred = PolicyOutput {
            waypoints: (0..5)
                .map(|_| [r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)])
                .collect(),
            arrival_prob: r.gen_range(0.0..1.0),
        };
        let l = composite_loss(&pred, &s, &cfg).unwrap();
        assert!(l.total >= 0.0);
        let expect = l.wp + cfg.lambda_arrvd * l.arrival + cfg.lambda_dir * l.direction;
        assert!((l.total - expect).abs() < 1e-12);
    }
}

fn end_to_end_check(cfg: ModelConfig, seed: u64) {
    let mut m = PolicyModel::new(cfg.clone(), seed).unwrap();
    randomize(&mut m.store, 500 + seed, 0.5);
    let s = sample(&cfg, seed);
    let rep = check_with_params("composite_loss", &m.store, &[], 1e-3, |g, _| {
        m.loss_vars(g, &s).map(|l| l.total).map_err(to_terr)
    });
    assert!(rep.passed(), "seed {seed}: {rep:?}");
}

#[test]
fn end_to_end_gradients_minimal_config() {
    for seed in 0..10 {
        end_to_end_check(ModelConfig::tiny(), seed);
    }
}

#[test]
fn every_ablation_runs_forward_and_backward() {
    for mask in 0..8 {
        let mut cfg = ModelConfig::tiny();
        cfg.use_patch_tokens = mask & 1 != 0;
        cfg.use_depth = mask & 2 != 0;
        cfg.use_tracking = mask & 4 != 0;
        let m = PolicyModel::new(cfg.clone(), mask).unwrap();
        let s = sample(&cfg, mask);
        let (loss, grads) = m.batch_gradients(std::slice::from_ref(&s)).unwrap();
        assert!(loss.is_finite());
        assert_eq!(grads.len(), m.store.len());
        let out = m.predict(&s.window).unwrap();
        assert_eq!(out.waypoints.len(), cfg.horizon);
        assert!((0.0..=1.0).contains(&out.arrival_prob));
    }
}

#[test]
fn depth_ablation_ignores_depth() {
    let mut cfg = ModelConfig::tiny();
    cfg.use_depth = false;
    let m = PolicyModel::new(cfg.clone(), 3).unwrap();
    let w = window(&cfg, 2);
    let mut w2 = w.clone();
    let mut f = (*w2.frames[0]).clone();
    f.depth = wpnav_core::perception::DepthMap::new(f.depth.grid(), vec![42.0; 4]).unwrap();
    w2.frames[0] = Arc::new(f);
    assert_eq!(m.predict(&w).unwrap(), m.predict(&w2).unwrap());
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = ModelConfig::tiny();
    let mut m = PolicyModel::new(cfg.clone(), 1).unwrap();
    let before = m.store.clone();
    let mut opt = AdamW::new(&m.store, 0.01);
    let batch = vec![sample(&cfg, 1), sample(&cfg, 2)];
    train_step(&mut m, &mut opt, &batch, 0.0).unwrap();
    assert_eq!(m.store.tensors(), before.tensors());
    assert!(matches!(
        train_step(&mut m, &mut opt, &[], 0.1),
        Err(PolicyError::EmptyBatch)
    ));
}

#[test]
fn identical_batch_equals_single_sample() {
    let cfg = ModelConfig::tiny();
    let s = sample(&cfg, 4);
    let mut a = PolicyModel::new(cfg.clone(), 2).unwrap();
    let mut b = a.clone();
    let mut oa = AdamW::new(&a.store, 0.01);
    let mut ob = AdamW::new(&b.store, 0.01);
    let la = train_step(&mut a, &mut oa, std::slice::from_ref(&s), 1e-2).unwrap();
    let lb = train_step(&mut b, &mut ob, &vec![s.clone(); 4], 1e-2).unwrap();
    assert!((la - lb).abs() < 1e-12);
    for (x, y) in a.store.tensors().iter().zip(b.store.tensors()) {
        assert!(x.max_abs_diff(y) < 1e-12);
    }
}

#[test]
fn returned_loss_is_pre_step() {
    let cfg = ModelConfig::tiny();
    let s = vec![sample(&cfg, 5), sample(&cfg, 6)];
    let mut m = PolicyModel::new(cfg, 3).unwrap();
    let (expected, _) = m.batch_gradients(&s).unwrap();
    let mut opt = AdamW::new(&m.store, 0.0);
    assert_eq!(train_step(&mut m, &mut opt, &s, 1e-2).unwrap(), expected);
}

#[test]
fn memorizes_sixteen_samples() {
    let mut cfg = ModelConfig::tiny();
    cfg.context_n = 3;
    cfg.horizon = 3;
    let samples: Vec<TrainingSample> = (0..16).map(|i| sample(&cfg, 100 + i)).collect();
    let mut m = PolicyModel::new(cfg, 7).unwrap();
    let mut opt = AdamW::new(&m.store, 0.0);
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..200 {
        last = train_step(&mut m, &mut opt, &samples, 1e-2).unwrap();
        first.get_or_insert(last);
    }
    let (after, _) = m.batch_gradients(&samples).unwrap();
    let first = first.unwrap();
    assert!(after <= 0.1 * first, "loss {first} -> {last} -> {after}");
}

#[test]
fn non_finite_loss_aborts() {
    let cfg = ModelConfig::tiny();
    let mut m = PolicyModel::new(cfg.clone(), 1).unwrap();
    for t in m.store.tensors_mut() {
        t.data_mut()[0] = f64::INFINITY;
    }
    let before = m.store.clone();
    let mut opt = AdamW::new(&m.store, 0.0);
    let r = train_step(&mut m, &mut opt, &[sample(&cfg, 1)], 1e-2);
    assert!(matches!(r, Err(PolicyError::NonFiniteLoss { .. })), "{r:?}");
    assert_eq!(m.store.tensors(), before.tensors());
}

#[test]
fn checkpoint_round_trip() {
    let cfg = ModelConfig::tiny();
    let mut m = PolicyModel::new(cfg.clone(), 8).unwrap();
    randomize(&mut m.store, 9, 1.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.swck");
    m.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let loaded = PolicyModel::load(&path).unwrap();
    assert_eq!(loaded.config, m.config);
    for (a, b) in loaded.store.tensors().iter().zip(m.store.tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(loaded.to_bytes(), bytes);
    let w = window(&cfg, 3);
    assert_eq!(loaded.predict(&w).unwrap(), m.predict(&w).unwrap());

    let mut bad = bytes.clone();
    bad[1] ^= 0xff;
    assert!(PolicyModel::from_bytes(&bad).is_err());
    assert!(PolicyModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(PolicyModel::from_bytes(&extra).is_err());
}

#[test]
fn graph_is_reusable_for_inference() {
    let cfg = ModelConfig::tiny();
    let m = tiny_model(1);
    let w = window(&cfg, 1);
    let mut g: Graph = m.graph();
    let out = m.forward(&mut g, &w).unwrap();
    assert_eq!(g.shape(out.waypoints), &[2, 2]);
    assert_eq!(g.shape(out.arrival), &[1, 1]);
}
