use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::Engine;
use serde_json::{json, Value};
use wpnav_core::episodes::{filter_clips, ClipMeta, FilterClient, FilterRequest};
use wpnav_core::perception::{FeatureFile, FrameObservation, Provider, SeededProvider, ViewSource};
use wpnav_core::policy::{ModelConfig, PolicyModel};
use wpnav_serve::*;

fn start(model: Option<(PolicyModel, &str)>) -> (SocketAddr, Arc<ServerState>) {
    let state = Arc::new(ServerState::new());
    if let Some((m, id)) = model {
        state.install(Loaded::from_model(m, id));
    }
    let addr = spawn_background("127.0.0.1:0".parse().unwrap(), state.clone()).unwrap();
    (addr, state)
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn post(addr: SocketAddr, body: &Value) -> (u16, Value) {
    let mut r = agent().post(&format!("http://{addr}/predict")).send_json(body).unwrap();
    let status = r.status().as_u16();
    (status, r.body_mut().read_json().unwrap())
}

fn health(addr: SocketAddr) -> Health {
    agent()
        .get(&format!("http://{addr}/health"))
        .call()
        .unwrap()
        .body_mut()
        .read_json()
        .unwrap()
}

fn seeds_request(n: usize) -> Value {
    json!({
        "protocol_version": 1,
        "positions": (0..n).map(|i| [-((n - 1 - i) as f64) * 1.2, 0.0]).collect::<Vec<_>>(),
        "subgoal": [6.0, 1.5],
        "mode": "stereo",
        "frames": { "kind": "seeds", "seeds": (0..n as u64).map(|i| 40 + i).collect::<Vec<_>>(), "flow": [0.1, 0.0] }
    })
}

fn without_latency(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("latency_ms");
    v
}

#[test]
fn valid_request_returns_horizon_waypoints() {
    let cfg = ModelConfig::desk();
    let (addr, _) = start(Some((PolicyModel::new(cfg.clone(), 3).unwrap(), "desk")));
    let (status, body) = post(addr, &seeds_request(cfg.context_n));
    assert_eq!(status, 200, "{body}");
    let r: PredictResponse = serde_json::from_value(body).unwrap();
    assert_eq!(r.waypoints.len(), 5);
    assert!((0.0..=1.0).contains(&r.arrival_prob));
    assert!(r.model_id.starts_with("desk@"));
    assert!(r.latency_ms >= 0.0);
}

#[test]
fn identical_requests_give_identical_bodies() {
    let cfg = ModelConfig::small();
    let (addr, _) = start(Some((PolicyModel::new(cfg.clone(), 4).unwrap(), "m")));
    let req = seeds_request(cfg.context_n);
    let a = without_latency(post(addr, &req).1);
    let b = without_latency(post(addr, &req).1);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let bodies: Vec<String> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..4)
            .map(|_| s.spawn(|| serde_json::to_string(&without_latency(post(addr, &req).1)).unwrap()))
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(bodies.iter().all(|x| *x == serde_json::to_string(&a).unwrap()));
}

#[test]
fn validation_errors_name_the_field() {
    let cfg = ModelConfig::small();
    let (addr, _) = start(Some((PolicyModel::new(cfg.clone(), 5).unwrap(), "m")));
    let n = cfg.context_n;
    let cases: Vec<(Value, &str)> = vec![
        (
            {
                let mut r = seeds_request(n);
                r["positions"] = json!([[0.0, 0.0]]);
                r
            },
            "positions",
        ),
        (
            {
                let mut r = seeds_request(n);
                r["subgoal"] = json!("north");
                r
            },
            "subgoal",
        ),
        (
            {
                let mut r = seeds_request(n);
                r["mode"] = json!("lidar");
                r
            },
            "mode",
        ),
        (
            {
                let mut r = seeds_request(n);
                r["protocol_version"] = json!(9);
                r
            },
            "protocol_version",
        ),
        (
            {
                let mut r = seeds_request(n);
                r["frames"]["seeds"] = json!([1, 2]);
                r
            },
            "frames.seeds",
        ),
        (
            {
                let mut r = seeds_request(n);
                r.as_object_mut().unwrap().remove("positions");
                r
            },
            "positions",
        ),
        (
            {
                let mut r = seeds_request(n);
                r["frames"].as_object_mut().unwrap().remove("seeds");
                r
            },
            "frames.seeds",
        ),
        (
            {
                let mut r = seeds_request(n);
                r["positions"][1] = json!([0.0, "x"]);
                r
            },
            "positions[1][1]",
        ),
        (
            {
                let mut r = seeds_request(n);
                r["tracks"] = json!([]);
                r
            },
            "tracks",
        ),
        (
            {
                let mut r = seeds_request(n);
                r["frames"] = json!({"kind": "features", "swft": "%%%"});
                r
            },
            "frames.swft",
        ),
    ];
    for (req, field) in cases {
        let (status, body) = post(addr, &req);
        assert_eq!(status, 400, "{field}: {body}");
        assert_eq!(body["error"]["kind"], "validation");
        assert_eq!(body["error"]["field"], field, "{body}");
    }
    let r = agent()
        .post(&format!("http://{addr}/predict"))
        .content_type("application/json")
        .send("{not json")
        .unwrap();
    assert_eq!(r.status().as_u16(), 400);
    assert_eq!(parse_field("{not json"), "$");
}

fn parse_field(body: &str) -> String {
    wpnav_serve::protocol::parse_request(body.as_bytes()).unwrap_err().field
}

#[test]
fn feature_payload_matches_seeded_frames() {
    let cfg = ModelConfig::small();
    let model = PolicyModel::new(cfg.clone(), 6).unwrap();
    let (addr, _) = start(Some((model, "m")));
    let n = cfg.context_n;
    let grid = cfg.perception.grid;
    let provider = SeededProvider::with_flow([0.1, 0.0]);
    let seeds: Vec<u64> = (0..n as u64).map(|i| 40 + i).collect();
    let obs: Vec<FrameObservation> = seeds
        .iter()
        .enumerate()
        .map(|(i, s)| FrameObservation::stereo(i as u64, ViewSource::Seed(*s), ViewSource::Seed(*s), 700.0, 0.1))
        .collect();
    let file = FeatureFile {
        grid,
        dim: cfg.perception.appearance_dim,
        frames: obs
            .iter()
            .map(|o| provider.appearance(o, grid, cfg.perception.appearance_dim).unwrap())
            .collect(),
    };
    let disparity: Vec<Vec<f64>> = obs.iter().map(|o| provider.disparity(o, grid).unwrap()).collect();
    let tracks = provider.tracks(&obs, grid, cfg.perception.m_trk).unwrap();
    let mut req = seeds_request(n);
    req["frames"] = json!({
        "kind": "features",
        "swft": base64::engine::general_purpose::STANDARD.encode(file.to_bytes()),
        "disparity": disparity,
        "focal_px": 700.0,
        "baseline_m": 0.1,
    });
    req["tracks"] = serde_json::to_value(&tracks.tracks).unwrap();
    let (status, feat) = post(addr, &req);
    assert_eq!(status, 200, "{feat}");
    let (_, seeded) = post(addr, &seeds_request(n));
    assert_eq!(without_latency(feat.clone()), without_latency(seeded));

    // Side-loaded file gives the same answer.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frames.swft");
    file.save(&path).unwrap();
    req["frames"].as_object_mut().unwrap().remove("swft");
    req["frames"]["swft_path"] = json!(path.to_str().unwrap());
    let (status, side) = post(addr, &req);
    assert_eq!(status, 200, "{side}");
    assert_eq!(without_latency(side), without_latency(feat));

    // Stereo without disparity is a validation error.
    req["frames"].as_object_mut().unwrap().remove("disparity");
    let (status, body) = post(addr, &req);
    assert_eq!(status, 400);
    assert_eq!(body["error"]["field"], "frames.disparity");
}

#[test]
fn monocular_feature_payload_runs() {
    let cfg = ModelConfig::small();
    let (addr, _) = start(Some((PolicyModel::new(cfg.clone(), 7).unwrap(), "m")));
    let n = cfg.context_n;
    let cells = cfg.perception.grid.len();
    let file = FeatureFile {
        grid: cfg.perception.grid,
        dim: cfg.perception.appearance_dim,
        frames: (0..n)
            .map(|i| {
                wpnav_core::tensor::Tensor::new(
                    &[cells, cfg.perception.appearance_dim],
                    (0..cells * cfg.perception.appearance_dim)
                        .map(|k| ((k + i) as f64).sin())
                        .collect(),
                )
                .unwrap()
            })
            .collect(),
    };
    let mut req = seeds_request(n);
    req["mode"] = json!("monocular");
    req["frames"] = json!({
        "kind": "features",
        "swft": base64::engine::general_purpose::STANDARD.encode(file.to_bytes()),
        "depth": vec![vec![3.0; cells]; n],
    });
    let (status, body) = post(addr, &req);
    assert_eq!(status, 200, "{body}");
    req["frames"]["depth"][2][0] = json!(-1.0);
    let (status, body) = post(addr, &req);
    assert_eq!(status, 400);
    assert_eq!(body["error"]["field"], "frames.depth[2]");
}

#[test]
fn health_reports_readiness_and_hash() {
    let (addr, state) = start(None);
    let h = health(addr);
    assert_eq!(h.status, "not ready");
    assert!(h.uptime_s >= 0.0);
    assert!(h.checkpoint_id.is_none());
    let (status, body) = post(addr, &seeds_request(5));
    assert_eq!(status, 503, "{body}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::small();
    let a = dir.path().join("alpha.swck");
    let b = dir.path().join("beta.swck");
    let a2 = dir.path().join("alpha-copy.swck");
    PolicyModel::new(cfg.clone(), 1).unwrap().save(&a).unwrap();
    PolicyModel::new(cfg.clone(), 2).unwrap().save(&b).unwrap();
    std::fs::copy(&a, &a2).unwrap();

    state.load_checkpoint(&a).unwrap();
    let ha = health(addr);
    assert_eq!(ha.status, "ready");
    assert_eq!(ha.checkpoint_id.as_deref(), Some("alpha"));
    assert_eq!(ha.horizon, Some(cfg.horizon));
    let (_, pa) = post(addr, &seeds_request(cfg.context_n));

    state.load_checkpoint(&b).unwrap();
    let hb = health(addr);
    assert_eq!(hb.checkpoint_id.as_deref(), Some("beta"));
    assert_ne!(hb.config_hash, ha.config_hash);
    let (_, pb) = post(addr, &seeds_request(cfg.context_n));
    assert_ne!(pa["model_id"], pb["model_id"]);
    assert_ne!(pa["waypoints"], pb["waypoints"]);

    state.load_checkpoint(&a2).unwrap();
    assert_eq!(health(addr).config_hash, ha.config_hash);
    assert!(health(addr).uptime_s >= ha.uptime_s);

    std::fs::write(&b, b"SWCKjunk").unwrap();
    assert!(state.load_checkpoint(&b).is_err());
    assert_eq!(
        health(addr).config_hash,
        ha.config_hash,
        "failed load keeps the old checkpoint"
    );
}

#[test]
fn p50_latency_under_one_second_at_desk_scale() {
    let cfg = ModelConfig::desk();
    let (addr, _) = start(Some((PolicyModel::new(cfg.clone(), 9).unwrap(), "desk")));
    let req = seeds_request(cfg.context_n);
    let mut times: Vec<f64> = (0..7)
        .map(|_| {
            let t = Instant::now();
            let (status, _) = post(addr, &req);
            assert_eq!(status, 200);
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    assert!(times[3] < 1.0, "p50 {:.3}s", times[3]);
}

#[test]
fn bind_address_comes_from_env() {
    std::env::remove_var(BIND_ENV);
    assert_eq!(bind_addr(8080).unwrap(), "127.0.0.1:8080".parse().unwrap());
    std::env::set_var(BIND_ENV, "0.0.0.0");
    assert_eq!(bind_addr(9).unwrap(), "0.0.0.0:9".parse().unwrap());
    std::env::set_var(BIND_ENV, "not-an-ip");
    assert!(bind_addr(9).is_err());
    std::env::remove_var(BIND_ENV);
}

// Filter client over HTTP against local stub endpoints.

fn stub_filter(delay: Duration) -> SocketAddr {
    use axum::routing::post;
    use axum::Json;
    let app = axum::Router::new().route(
        "/complete",
        post(move |Json(req): Json<FilterRequest>| async move {
            tokio::time::sleep(delay).await;
            let response = match req.description.as_str() {
                d if d.starts_with("walk") => "Yes.",
                d if d.starts_with("garbled") => "maybe",
                _ => "no",
            };
            Json(FilterResponse {
                response: response.into(),
            })
        }),
    );
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(1)
        .enable_all()
        .build()
        .unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || rt.block_on(async { axum::serve(listener, app).await.unwrap() }));
    addr
}

fn clip(id: usize, description: &str) -> ClipMeta {
    ClipMeta {
        clip_id: format!("c{id}"),
        duration_s: 3.0,
        description: description.into(),
        keep: None,
    }
}

#[test]
fn http_filter_client_follows_exclusion_rules() {
    let addr = stub_filter(Duration::ZERO);
    let client = HttpFilterClient::new(format!("http://{addr}/complete"), Duration::from_secs(5));
    assert_eq!(
        client.complete(&FilterRequest::for_clip(&clip(0, "walking"))).unwrap(),
        "Yes."
    );
    let clips = vec![
        clip(0, "walking in a park"),
        clip(1, "sitting"),
        clip(2, "garbled"),
        clip(3, "walking home"),
    ];
    let report = filter_clips(&clips, &client).unwrap();
    let kept: Vec<&str> = report.kept.iter().map(|c| c.clip_id.as_str()).collect();
    assert_eq!(kept, ["c0", "c3"]);
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].clip_id, "c2");
    assert!(!report.failures[0].retriable);

    let slow = stub_filter(Duration::from_millis(800));
    let client = HttpFilterClient::new(format!("http://{slow}/complete"), Duration::from_millis(100));
    let report = filter_clips(&clips[..1], &client).unwrap();
    assert!(report.kept.is_empty());
    assert!(report.failures[0].retriable);
    assert!(
        report.failures[0].error.contains("timed out"),
        "{}",
        report.failures[0].error
    );

    // Nothing listens on a just-closed port.
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let client = HttpFilterClient::new(format!("http://127.0.0.1:{port}/complete"), Duration::from_secs(1));
    let report = filter_clips(&clips[..1], &client).unwrap();
    assert!(report.kept.is_empty());
    assert!(report.failures[0].retriable);
}
