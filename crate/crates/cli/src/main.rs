use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use wpnav_core::episodes::{
    filter_clips, generate_dataset, load_dataset, save_dataset, window_dataset, window_dataset_tagged, ClientError,
    ClipMeta, FilterClient, FilterRequest, WindowSpec,
};
use wpnav_core::format;
use wpnav_core::metrics::{aggregate, EvalSample};
use wpnav_core::policy::{fit, mean_loss, ModelConfig, PolicyModel, TrainConfig};
use wpnav_core::sim::{
    generate_scene, rollout_many, sample_routes, trajectory_tsv, ModelPolicy, PlannerConfig, RolloutConfig, Template,
    World,
};
use wpnav_serve::{bind_addr, run_blocking, HttpFilterClient, ServerState};

#[derive(Parser)]
#[command(name = "wpnav", version, about = "Goal-conditioned waypoint navigation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic expert episodes into an SWEP dataset.
    GenData {
        #[arg(long)]
        episodes: usize,
        /// Episode length in seconds (frames at 1 Hz).
        #[arg(long, default_value_t = 32)]
        length: usize,
        /// Id of the first episode; templates rotate with the id.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        context: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the world of one synthetic template as JSON.
    GenWorld {
        #[arg(long, value_parser = parse_template)]
        template: Template,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ask a completion endpoint whether each clip shows walking.
    Filter {
        /// JSON array of clips (`clip_id`, `duration_s`, `description`, optional `keep`).
        #[arg(long)]
        clips: PathBuf,
        /// Endpoint URL; receives the request JSON, answers `{"response": ...}`.
        #[arg(long, conflicts_with = "oracle")]
        endpoint: Option<String>,
        /// Answer from each clip's `keep` label instead of calling an endpoint.
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy on the windows of a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Preset::Small)]
        preset: Preset,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use at most this many windows.
        #[arg(long)]
        max_windows: Option<usize>,
        #[arg(long)]
        no_patch_tokens: bool,
        #[arg(long)]
        no_depth: bool,
        #[arg(long)]
        no_tracking: bool,
    },
    /// Offline metrics of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        /// Steps counted for arrival; defaults to the full horizon.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TSV report; a JSON twin is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop rollouts on routes sampled in a world.
    Rollout {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        routes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8.0)]
        min_length: f64,
        #[arg(long, default_value_t = 80)]
        max_steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve /predict and /health. The host comes from WPNAV_BIND.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Tiny,
    Small,
    Desk,
    Paper,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Small => ModelConfig::small(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Paper => ModelConfig::paper(),
        }
    }
}

fn parse_template(s: &str) -> Result<Template, String> {
    s.parse().map_err(|e: wpnav_core::sim::SimError| e.to_string())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            episodes,
            length,
            seed,
            context,
            out,
        } => {
            let eps = generate_dataset(seed, episodes, length, context)?;
            save_dataset(&out, &eps)?;
            println!("wrote {} episodes to {}", eps.len(), out.display());
        }
        Command::GenWorld { template, seed, out } => {
            let scene = generate_scene(seed, template, &PlannerConfig::default())?;
            write(&out, serde_json::to_string_pretty(&scene.world)?.as_bytes())?;
            println!("wrote {template} world {seed} to {}", out.display());
        }
        Command::Filter {
            clips,
            endpoint,
            oracle,
            timeout_ms,
            out,
        } => {
            let text = std::fs::read_to_string(&clips).with_context(|| format!("reading {}", clips.display()))?;
            let clips: Vec<ClipMeta> = serde_json::from_str(&text).context("parsing clips")?;
            let client: Box<dyn FilterClient> = match (endpoint, oracle) {
                (_, true) => Box::new(LabelOracle { clips: clips.clone() }),
                (Some(url), false) => Box::new(HttpFilterClient::new(url, Duration::from_millis(timeout_ms))),
                (None, false) => bail!("either --endpoint or --oracle is required"),
            };
            let report = filter_clips(&clips, client.as_ref())?;
            write(&out, serde_json::to_string_pretty(&report)?.as_bytes())?;
            println!(
                "kept {} of {} clips ({} failures)",
                report.kept.len(),
                clips.len(),
                report.failures.len()
            );
        }
        Command::Train {
            dataset,
            out,
            preset,
            steps,
            batch_size,
            lr,
            seed,
            max_windows,
            no_patch_tokens,
            no_depth,
            no_tracking,
        } => {
            let mut cfg = preset.config();
            cfg.use_patch_tokens = !no_patch_tokens;
            cfg.use_depth = !no_depth;
            cfg.use_tracking = !no_tracking;
            let eps = load_dataset(&dataset)?;
            let spec = WindowSpec {
                context_n: cfg.context_n,
                horizon: cfg.horizon,
                radius_m: 1.0,
                seed,
            };
            let mut samples = window_dataset(&eps, &cfg.perception, &spec)?;
            if let Some(m) = max_windows {
                samples.truncate(m);
            }
            ensure!(!samples.is_empty(), "dataset yields no training windows");
            let mut model = PolicyModel::new(cfg, seed)?;
            let l0 = mean_loss(&model, &samples)?;
            println!("{} windows, initial loss {l0:.4}", samples.len());
            let tc = TrainConfig {
                steps,
                batch_size,
                lr,
                seed,
                ..TrainConfig::default()
            };
            let t = Instant::now();
            fit(&mut model, &samples, &tc, |s, l| {
                if s % 100 == 0 || s + 1 == steps {
                    log::info!("step {s} loss {l:.4} ({:.0}s)", t.elapsed().as_secs_f64());
                }
            })?;
            let l1 = mean_loss(&model, &samples)?;
            model.save(&out)?;
            println!(
                "final loss {l1:.4} ({:+.1}%), saved {}",
                100.0 * (l1 / l0 - 1.0),
                out.display()
            );
        }
        Command::Eval {
            dataset,
            checkpoint,
            radius,
            k,
            seed,
            out,
        } => {
            ensure!(radius > 0.0 && radius.is_finite(), "--radius must be positive");
            let model = PolicyModel::load(&checkpoint)?;
            let cfg = &model.config;
            let eps = load_dataset(&dataset)?;
            let spec = WindowSpec {
                context_n: cfg.context_n,
                horizon: cfg.horizon,
                radius_m: radius,
                seed,
            };
            let tagged = window_dataset_tagged(&eps, &cfg.perception, &spec)?;
            ensure!(!tagged.is_empty(), "dataset yields no evaluation windows");
            let windows: Vec<_> = tagged.iter().map(|(_, s)| s.window.clone()).collect();
            let preds = model.predict_batch(&windows)?;
            let samples: Vec<EvalSample> = tagged
                .iter()
                .zip(preds)
                .map(|((scenario, s), p)| EvalSample {
                    pred_waypoints: p.waypoints,
                    gt_waypoints: s.gt_waypoints.clone(),
                    subgoal: s.window.subgoal,
                    scenario: *scenario,
                })
                .collect();
            let report = aggregate(&samples, radius, k)?;
            report.write(&out)?;
            print!("{}", report.to_tsv());
        }
        Command::Rollout {
            world,
            checkpoint,
            routes,
            seed,
            min_length,
            max_steps,
            out,
        } => {
            let text = std::fs::read_to_string(&world).with_context(|| format!("reading {}", world.display()))?;
            let world: World = serde_json::from_str(&text).context("parsing world")?;
            let model = PolicyModel::load(&checkpoint)?;
            let planned = sample_routes(&world, routes, min_length, seed, &PlannerConfig::default())?;
            let world = Arc::new(world);
            let scenes: Vec<_> = planned.iter().map(|r| (world.clone(), r.clone())).collect();
            let cfg = RolloutConfig {
                max_steps,
                ..RolloutConfig::default()
            };
            let results = rollout_many(&ModelPolicy { model: &model }, &scenes, &cfg)?;
            write(&out, trajectory_tsv(&planned, &results).as_bytes())?;
            let ok = results.iter().filter(|r| r.success()).count();
            println!(
                "success {ok}/{} ({:.1}%)",
                results.len(),
                100.0 * ok as f64 / results.len().max(1) as f64
            );
        }
        Command::Serve { checkpoint, port } => {
            let state = match &checkpoint {
                Some(p) => ServerState::with_checkpoint(p)?,
                None => ServerState::new(),
            };
            let addr = bind_addr(port)?;
            run_blocking(addr, Arc::new(state), |a| println!("listening on http://{a}"))?;
        }
    }
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    format::write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Answers from the clips' own labels, matched by description.
struct LabelOracle {
    clips: Vec<ClipMeta>,
}

impl FilterClient for LabelOracle {
    fn complete(&self, request: &FilterRequest) -> Result<String, ClientError> {
        let clip = self.clips.iter().find(|c| c.description == request.description);
        match clip.and_then(|c| c.keep) {
            Some(true) => Ok("yes".into()),
            Some(false) => Ok("no".into()),
            None => Err(ClientError::Unreachable("clip has no keep label".into())),
        }
    }
}
