//! Closed-loop harness: a 2D kinematic world with convex obstacles and
//! constant-velocity pedestrians, lattice planning with A*, a scripted expert,
//! the sub-goal chaining controller and rollouts.
//!
//! World time is measured in whole seconds and doubles as the frame id of
//! every rendered observation, so [`SceneProvider`] can place the agents.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Point};
use crate::metrics::Scenario;
use crate::perception::{
    self, hash_unit, query_points, DepthMap, FrameObservation, GridSpec, PerceptionError, Provider, Track, TrackSet,
    ViewSource,
};
use crate::policy::{ObservationWindow, PolicyError, PolicyModel, PolicyOutput};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("node {node} out of range for a graph with {len} nodes")]
    NodeOutOfRange { node: usize, len: usize },
    #[error("invalid edge {a}-{b}: {reason}")]
    InvalidEdge { a: usize, b: usize, reason: &'static str },
    #[error("no path from {start} to {goal}; the start component has {reachable} nodes")]
    NoPath {
        start: usize,
        goal: usize,
        reachable: usize,
    },
    #[error("invalid world: {0}")]
    World(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub const ROBOT_RADIUS: f64 = 0.25;
pub const AGENT_RADIUS: f64 = 0.3;
const AGENT_HEIGHT: f64 = 1.7;
const OBSTACLE_HEIGHT: f64 = 2.5;
const WALL_HEIGHT: f64 = 3.0;

/// Convex polygon, counter-clockwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<Point>,
}

impl Polygon {
    pub fn rect(min: Point, max: Point) -> Self {
        Self {
            vertices: vec![min, [max[0], min[1]], max, [min[0], max[1]]],
        }
    }

    fn from_points(mut vertices: Vec<Point>) -> Self {
        if signed_area(&vertices) < 0.0 {
            vertices.reverse();
        }
        Self { vertices }
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn is_convex(&self) -> bool {
        let n = self.vertices.len();
        n >= 3
            && (0..n).all(|i| {
                let (a, b, c) = (self.vertices[i], self.vertices[(i + 1) % n], self.vertices[(i + 2) % n]);
                geom::cross(geom::sub(b, a), geom::sub(c, b)) > 0.0
            })
    }

    /// Inside or on the boundary.
    pub fn contains(&self, p: Point) -> bool {
        self.edges()
            .all(|(a, b)| geom::cross(geom::sub(b, a), geom::sub(p, a)) >= 0.0)
    }

    pub fn point_dist(&self, p: Point) -> f64 {
        if self.contains(p) {
            return 0.0;
        }
        self.edges()
            .map(|(a, b)| geom::point_segment_dist(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    /// Zero when the segment touches or enters the polygon.
    pub fn segment_dist(&self, a: Point, b: Point) -> f64 {
        if self.contains(a) || self.contains(b) {
            return 0.0;
        }
        self.edges()
            .map(|(c, d)| geom::segment_segment_dist(a, b, c, d))
            .fold(f64::INFINITY, f64::min)
    }
}

fn signed_area(v: &[Point]) -> f64 {
    let n = v.len();
    (0..n).map(|i| geom::cross(v[i], v[(i + 1) % n])).sum::<f64>() / 2.0
}

/// Pedestrian walking `from → to` at constant `speed`, leaving at `depart_s`.
/// It waits at either end outside that interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub from: Point,
    pub to: Point,
    pub speed: f64,
    pub depart_s: f64,
}

impl Agent {
    fn arrive_s(&self) -> f64 {
        let len = geom::dist(self.from, self.to);
        if len == 0.0 || self.speed == 0.0 {
            self.depart_s
        } else {
            self.depart_s + len / self.speed
        }
    }

    pub fn position(&self, t: f64) -> Point {
        let len = geom::dist(self.from, self.to);
        if len == 0.0 || self.speed == 0.0 {
            return self.from;
        }
        let s = ((t - self.depart_s) * self.speed / len).clamp(0.0, 1.0);
        geom::add(
            self.from,
            [s * (self.to[0] - self.from[0]), s * (self.to[1] - self.from[1])],
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    /// `[min, max]` corners.
    pub bounds: [Point; 2],
    pub obstacles: Vec<Polygon>,
    pub agents: Vec<Agent>,
    pub seed: u64,
}

impl World {
    pub fn validate(&self) -> Result<(), SimError> {
        let [lo, hi] = self.bounds;
        if !(lo[0] < hi[0] && lo[1] < hi[1]) {
            return Err(SimError::World("empty bounds".into()));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !o.is_convex() {
                return Err(SimError::World(format!(
                    "obstacle {i} is not a convex counter-clockwise polygon"
                )));
            }
            if !o.vertices.iter().all(|p| self.in_bounds(*p)) {
                return Err(SimError::World(format!("obstacle {i} leaves the bounds")));
            }
        }
        for (i, a) in self.agents.iter().enumerate() {
            if !(a.speed >= 0.0) || !a.depart_s.is_finite() {
                return Err(SimError::World(format!("agent {i} has an invalid speed or departure")));
            }
        }
        Ok(())
    }

    pub fn in_bounds(&self, p: Point) -> bool {
        let [lo, hi] = self.bounds;
        p[0] >= lo[0] && p[0] <= hi[0] && p[1] >= lo[1] && p[1] <= hi[1]
    }

    fn wall_dist(&self, p: Point) -> f64 {
        let [lo, hi] = self.bounds;
        (p[0] - lo[0])
            .min(hi[0] - p[0])
            .min(p[1] - lo[1])
            .min(hi[1] - p[1])
            .max(0.0)
    }

    /// Distance from a point to the nearest obstacle or boundary wall.
    pub fn clearance(&self, p: Point) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.point_dist(p))
            .fold(self.wall_dist(p), f64::min)
    }

    /// Smallest static clearance along a segment.
    pub fn segment_clearance(&self, a: Point, b: Point) -> f64 {
        let walls = self.wall_dist(a).min(self.wall_dist(b));
        self.obstacles
            .iter()
            .map(|o| o.segment_dist(a, b))
            .fold(walls, f64::min)
    }

    /// Closest approach between a robot moving `a → b` over `[t0, t1]` and any agent.
    pub fn agent_clearance(&self, a: Point, b: Point, t0: f64, t1: f64) -> f64 {
        let robot = |t: f64| {
            let s = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]
        };
        let mut best = f64::INFINITY;
        for ag in &self.agents {
            let mut cuts = vec![t0, t1];
            for c in [ag.depart_s, ag.arrive_s()] {
                if c > t0 && c < t1 {
                    cuts.push(c);
                }
            }
            cuts.sort_by(f64::total_cmp);
            for w in cuts.windows(2) {
                // Relative motion is linear between breakpoints.
                let r0 = geom::sub(robot(w[0]), ag.position(w[0]));
                let r1 = geom::sub(robot(w[1]), ag.position(w[1]));
                best = best.min(geom::point_segment_dist([0.0, 0.0], r0, r1));
            }
        }
        best
    }

    /// Horizontal ray from `o` along `dir` (unit): nearest hit distance and
    /// the surface it belongs to.
    fn cast(&self, o: Point, dir: Point, t: f64, max_range: f64) -> (f64, Surface) {
        let mut best = (max_range, Surface::Sky);
        let [lo, hi] = self.bounds;
        let walls = [
            (lo, [hi[0], lo[1]]),
            ([hi[0], lo[1]], hi),
            (hi, [lo[0], hi[1]]),
            ([lo[0], hi[1]], lo),
        ];
        for (i, (a, b)) in walls.into_iter().enumerate() {
            if let Some((d, u)) = ray_segment(o, dir, a, b) {
                if d < best.0 {
                    best = (
                        d,
                        Surface::Wall {
                            index: i,
                            along: u * geom::dist(a, b),
                        },
                    );
                }
            }
        }
        for (i, poly) in self.obstacles.iter().enumerate() {
            for (a, b) in poly.edges() {
                if let Some((d, u)) = ray_segment(o, dir, a, b) {
                    if d < best.0 {
                        best = (
                            d,
                            Surface::Obstacle {
                                index: i,
                                along: u * geom::dist(a, b),
                            },
                        );
                    }
                }
            }
        }
        for (i, ag) in self.agents.iter().enumerate() {
            if let Some(d) = ray_circle(o, dir, ag.position(t), AGENT_RADIUS) {
                if d < best.0 {
                    best = (d, Surface::Agent { index: i });
                }
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Surface {
    Sky,
    Ground,
    Wall { index: usize, along: f64 },
    Obstacle { index: usize, along: f64 },
    Agent { index: usize },
}

impl Surface {
    fn height(self) -> f64 {
        match self {
            Surface::Wall { .. } => WALL_HEIGHT,
            Surface::Obstacle { .. } => OBSTACLE_HEIGHT,
            Surface::Agent { .. } => AGENT_HEIGHT,
            Surface::Sky | Surface::Ground => 0.0,
        }
    }
}

fn ray_segment(o: Point, dir: Point, a: Point, b: Point) -> Option<(f64, f64)> {
    let e = geom::sub(b, a);
    let denom = geom::cross(dir, e);
    if denom.abs() < 1e-12 {
        return None;
    }
    let w = geom::sub(a, o);
    let t = geom::cross(w, e) / denom;
    let u = geom::cross(w, dir) / denom;
    (t >= 0.0 && (0.0..=1.0).contains(&u)).then_some((t, u))
}

fn ray_circle(o: Point, dir: Point, c: Point, r: f64) -> Option<f64> {
    let oc = geom::sub(o, c);
    let b = geom::dot(oc, dir);
    let disc = b * b - (geom::dot(oc, oc) - r * r);
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    [-b - s, -b + s].into_iter().find(|t| *t >= 0.0)
}

/// Pinhole-style sensor on the robot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub hfov: f64,
    pub vfov: f64,
    pub height_m: f64,
    pub max_range_m: f64,
    pub focal_px: f64,
    pub baseline_m: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            hfov: FRAC_PI_2,
            vfov: PI / 3.0,
            height_m: 1.2,
            max_range_m: 20.0,
            focal_px: 100.0,
            baseline_m: 0.12,
        }
    }
}

impl Camera {
    /// Stereo observation of a robot pose; the frame id is the world time.
    pub fn frame(&self, state: &RobotState) -> FrameObservation {
        let [x, y] = state.position;
        let h = state.heading;
        let right = geom::from_ego([0.0, -self.baseline_m], state.position, h);
        FrameObservation::stereo(
            state.time_s.round().max(0.0) as u64,
            ViewSource::Pose { x, y, heading: h },
            ViewSource::Pose {
                x: right[0],
                y: right[1],
                heading: h,
            },
            self.focal_px,
            self.baseline_m,
        )
    }

    /// Azimuth (left positive) and elevation of a continuous grid coordinate.
    fn angles(&self, grid: GridSpec, p: Point) -> (f64, f64) {
        let az = self.hfov / 2.0 - (p[0] + 0.5) / grid.w as f64 * self.hfov;
        let el = self.vfov / 2.0 - (p[1] + 0.5) / grid.h as f64 * self.vfov;
        (az, el)
    }

    fn project(&self, grid: GridSpec, az: f64, el: f64) -> Point {
        [
            (self.hfov / 2.0 - az) / self.hfov * grid.w as f64 - 0.5,
            (self.vfov / 2.0 - el) / self.vfov * grid.h as f64 - 0.5,
        ]
    }
}

/// Pose-consistent perception of a [`World`]: appearance from surface class
/// and texture, exact forward depth, `f·B/Z` disparity, and tracks that follow
/// static world points seen in the first frame.
#[derive(Clone, Debug)]
pub struct SceneProvider {
    pub world: Arc<World>,
    pub camera: Camera,
}

struct Sample {
    surface: Surface,
    range: f64,
    az: f64,
    point: [f64; 3],
}

fn pose_of(frame: &FrameObservation) -> Result<(Point, f64), PerceptionError> {
    match frame.left {
        ViewSource::Pose { x, y, heading } => Ok(([x, y], heading)),
        ViewSource::Seed(_) => Err(PerceptionError::Provider("scene provider needs pose views".into())),
    }
}

impl SceneProvider {
    pub fn new(world: Arc<World>) -> Self {
        Self {
            world,
            camera: Camera::default(),
        }
    }

    fn sample(&self, pos: Point, heading: f64, t: f64, az: f64, el: f64) -> Sample {
        let cam = &self.camera;
        let dir = [(heading + az).cos(), (heading + az).sin()];
        let (hit, surface) = self.world.cast(pos, dir, t, cam.max_range_m);
        let ground = if el < 0.0 {
            cam.height_m / (-el).tan()
        } else {
            f64::INFINITY
        };
        let (range, surface) = if ground < hit {
            (ground, Surface::Ground)
        } else if surface != Surface::Sky && cam.height_m + hit * el.tan() <= surface.height() {
            (hit, surface)
        } else {
            (cam.max_range_m, Surface::Sky)
        };
        let xy = geom::add(pos, [range * dir[0], range * dir[1]]);
        Sample {
            surface,
            range,
            az,
            point: [xy[0], xy[1], cam.height_m + range * el.tan()],
        }
    }

    fn render(&self, frame: &FrameObservation, grid: GridSpec) -> Result<Vec<Sample>, PerceptionError> {
        let (pos, heading) = pose_of(frame)?;
        let t = frame.frame_id as f64;
        Ok(grid
            .centers()
            .into_iter()
            .map(|c| {
                let (az, el) = self.camera.angles(grid, c);
                self.sample(pos, heading, t, az, el)
            })
            .collect())
    }

    fn forward_depth(s: &Sample) -> f64 {
        (s.range * s.az.cos()).max(0.05)
    }
}

fn texture_key(s: &Sample) -> [u64; 3] {
    let q = |v: f64| (v / 2.0).floor() as i64 as u64;
    match s.surface {
        Surface::Sky => [0, 0, 0],
        Surface::Ground => [1, q(s.point[0]), q(s.point[1])],
        Surface::Wall { index, along } => [2, index as u64, q(along)],
        Surface::Obstacle { index, along } => [3, index as u64, q(along)],
        Surface::Agent { index } => [4, index as u64, 0],
    }
}

impl Provider for SceneProvider {
    fn appearance(&self, frame: &FrameObservation, grid: GridSpec, dim: usize) -> Result<Tensor, PerceptionError> {
        let samples = self.render(frame, grid)?;
        let mut data = Vec::with_capacity(grid.len() * dim);
        for s in &samples {
            let [class, a, b] = texture_key(s);
            let shade = (-s.range / 10.0).exp();
            for k in 0..dim as u64 {
                data.push(0.7 * hash_unit(&[class, k]) + 0.3 * hash_unit(&[class, a, b, k]) * shade);
            }
        }
        Ok(Tensor::new(&[grid.len(), dim], data)?)
    }

    fn mono_depth(&self, frame: &FrameObservation, grid: GridSpec) -> Result<DepthMap, PerceptionError> {
        let z = self.render(frame, grid)?.iter().map(Self::forward_depth).collect();
        DepthMap::new(grid, z)
    }

    fn disparity(&self, frame: &FrameObservation, grid: GridSpec) -> Result<Vec<f64>, PerceptionError> {
        let fb = frame.focal_px * frame.baseline_m;
        Ok(self
            .render(frame, grid)?
            .iter()
            .map(|s| fb / Self::forward_depth(s))
            .collect())
    }

    fn tracks(&self, frames: &[FrameObservation], grid: GridSpec, m_trk: usize) -> Result<TrackSet, PerceptionError> {
        let first = frames
            .first()
            .ok_or_else(|| PerceptionError::Config("tracks need at least one frame".into()))?;
        let (pos0, h0) = pose_of(first)?;
        let poses = frames.iter().map(pose_of).collect::<Result<Vec<_>, _>>()?;
        let cam = &self.camera;
        let tracks = query_points(grid, m_trk)
            .into_iter()
            .map(|q| {
                let (az, el) = cam.angles(grid, q);
                let p = self.sample(pos0, h0, first.frame_id as f64, az, el).point;
                let mut points = Vec::with_capacity(frames.len());
                let mut visible = Vec::with_capacity(frames.len());
                for (pos, heading) in &poses {
                    let rel = geom::to_ego([p[0], p[1]], *pos, *heading);
                    let a = rel[1].atan2(rel[0]);
                    let e = (p[2] - cam.height_m).atan2(geom::norm(rel));
                    let uv = cam.project(grid, a, e);
                    visible.push(rel[0] > 0.05 && grid.contains(uv));
                    points.push(uv);
                }
                Track { points, visible }
            })
            .collect();
        Ok(TrackSet { tracks })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub position: Point,
    pub heading: f64,
    pub time_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kinematics {
    /// Meters per second.
    pub max_speed: f64,
    /// Radians per second.
    pub max_turn_rate: f64,
    pub robot_radius: f64,
}

impl Default for Kinematics {
    fn default() -> Self {
        Self {
            max_speed: 1.2,
            max_turn_rate: FRAC_PI_2,
            robot_radius: ROBOT_RADIUS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub state: RobotState,
    pub collision: bool,
}

/// Turn toward `waypoint` within the turn cap, then advance along the new
/// heading by the waypoint's forward component, capped by the speed limit.
pub fn simulator_step(
    world: &World,
    state: &RobotState,
    waypoint: Point,
    dt: f64,
    kin: &Kinematics,
) -> Result<StepResult, SimError> {
    if !(dt > 0.0) {
        return Err(SimError::Param(format!("dt must be positive, got {dt}")));
    }
    let to = geom::sub(waypoint, state.position);
    let d = geom::norm(to);
    let mut next = RobotState {
        time_s: state.time_s + dt,
        ..*state
    };
    if d > 1e-9 {
        let want = to[1].atan2(to[0]);
        let cap = kin.max_turn_rate * dt;
        let turn = geom::wrap_angle(want - state.heading).clamp(-cap, cap);
        next.heading = geom::wrap_angle(state.heading + turn);
        let step = (d * geom::wrap_angle(want - next.heading).cos()).clamp(0.0, kin.max_speed * dt);
        next.position = geom::add(state.position, [step * next.heading.cos(), step * next.heading.sin()]);
    }
    let collision = !world.in_bounds(next.position)
        || world.segment_clearance(state.position, next.position) < kin.robot_radius
        || world.agent_clearance(state.position, next.position, state.time_s, next.time_s)
            < kin.robot_radius + AGENT_RADIUS;
    Ok(StepResult { state: next, collision })
}

/// Advance past every waypoint within `r`, or one waypoint when the model
/// declares arrival. The index never decreases and stops at the last waypoint.
pub fn subgoal_controller(
    position: Point,
    waypoints: &[Point],
    current: usize,
    arrival_prob: f64,
    r: f64,
    tau: f64,
) -> usize {
    let last = waypoints.len().saturating_sub(1);
    let mut idx = current.min(last);
    if idx < last && arrival_prob >= tau {
        idx += 1;
    }
    while idx < last && geom::dist(position, waypoints[idx]) <= r {
        idx += 1;
    }
    idx
}

/// Simple undirected graph with Euclidean edge weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WaypointGraph {
    nodes: Vec<Point>,
    adj: Vec<Vec<(usize, f64)>>,
}

impl WaypointGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, p: Point) -> usize {
        self.nodes.push(p);
        self.adj.push(Vec::new());
        self.nodes.len() - 1
    }

    /// Adds `a-b` with weight `‖a − b‖`; repeated edges are ignored.
    pub fn add_edge(&mut self, a: usize, b: usize) -> Result<(), SimError> {
        self.check(a)?;
        self.check(b)?;
        if a == b {
            return Err(SimError::InvalidEdge {
                a,
                b,
                reason: "self loop",
            });
        }
        if self.adj[a].iter().any(|(n, _)| *n == b) {
            return Ok(());
        }
        let w = geom::dist(self.nodes[a], self.nodes[b]);
        self.adj[a].push((b, w));
        self.adj[b].push((a, w));
        Ok(())
    }

    fn check(&self, n: usize) -> Result<(), SimError> {
        if n < self.nodes.len() {
            Ok(())
        } else {
            Err(SimError::NodeOutOfRange {
                node: n,
                len: self.nodes.len(),
            })
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, n: usize) -> Point {
        self.nodes[n]
    }

    pub fn neighbors(&self, n: usize) -> &[(usize, f64)] {
        &self.adj[n]
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    fn reachable(&self, start: usize) -> usize {
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut count = 0;
        while let Some(u) = queue.pop_front() {
            count += 1;
            for &(v, _) in &self.adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        count
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub nodes: Vec<usize>,
    pub cost: f64,
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    node: usize,
}

impl Eq for Open {}

impl Ord for Open {
    // Reversed so the max-heap pops the smallest f, then the smallest id.
    fn cmp(&self, other: &Self) -> Ordering {
        other.f.total_cmp(&self.f).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A* with the straight-line heuristic.
pub fn astar_plan(graph: &WaypointGraph, start: usize, goal: usize) -> Result<Plan, SimError> {
    graph.check(start)?;
    graph.check(goal)?;
    let h = |n: usize| geom::dist(graph.nodes[n], graph.nodes[goal]);
    let mut g = vec![f64::INFINITY; graph.len()];
    let mut parent = vec![usize::MAX; graph.len()];
    let mut open = BinaryHeap::new();
    g[start] = 0.0;
    open.push(Open {
        f: h(start),
        node: start,
    });
    while let Some(Open { f, node }) = open.pop() {
        if f > g[node] + h(node) {
            continue;
        }
        if node == goal {
            let mut nodes = vec![goal];
            while *nodes.last().unwrap() != start {
                nodes.push(parent[*nodes.last().unwrap()]);
            }
            nodes.reverse();
            return Ok(Plan { nodes, cost: g[goal] });
        }
        for &(v, w) in &graph.adj[node] {
            let cand = g[node] + w;
            if cand < g[v] {
                g[v] = cand;
                parent[v] = node;
                open.push(Open {
                    f: cand + h(v),
                    node: v,
                });
            }
        }
    }
    Err(SimError::NoPath {
        start,
        goal,
        reachable: graph.reachable(start),
    })
}

/// Shortest-path costs from `start` by plain O(V²) Dijkstra; unreachable
/// nodes are infinite.
pub fn dijkstra_costs(graph: &WaypointGraph, start: usize) -> Result<Vec<f64>, SimError> {
    graph.check(start)?;
    let n = graph.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    dist[start] = 0.0;
    for _ in 0..n {
        let Some(u) = (0..n)
            .filter(|&i| !done[i] && dist[i].is_finite())
            .min_by(|&a, &b| dist[a].total_cmp(&dist[b]))
        else {
            break;
        };
        done[u] = true;
        for &(v, w) in &graph.adj[u] {
            if dist[u] + w < dist[v] {
                dist[v] = dist[u] + w;
            }
        }
    }
    Ok(dist)
}

/// Planning lattice and route shaping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub spacing_m: f64,
    /// Required static clearance of nodes and edges.
    pub margin_m: f64,
    /// Longest gap between consecutive route waypoints.
    pub max_segment_m: f64,
    /// Half-width of the moving average that rounds corners.
    pub smooth_window_m: f64,
    pub smooth_iterations: usize,
    /// Static clearance a smoothed point must keep.
    pub smooth_clearance_m: f64,
    /// Heading change along the path that forces a new waypoint (radians).
    pub waypoint_turn: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            spacing_m: 0.5,
            margin_m: 1.5,
            max_segment_m: 8.0,
            smooth_window_m: 1.0,
            smooth_iterations: 20,
            smooth_clearance_m: 0.75,
            waypoint_turn: std::f64::consts::PI / 6.0,
        }
    }
}

/// 8-connected lattice over the free space. Returns the graph and the ids of
/// `start` and `goal`, which are added as extra nodes.
pub fn lattice_graph(
    world: &World,
    start: Point,
    goal: Point,
    cfg: &PlannerConfig,
) -> Result<(WaypointGraph, usize, usize), SimError> {
    if !(cfg.spacing_m > 0.0) || !(cfg.margin_m >= 0.0) {
        return Err(SimError::Param("lattice spacing must be positive".into()));
    }
    let [lo, hi] = world.bounds;
    let nx = ((hi[0] - lo[0]) / cfg.spacing_m).floor() as usize + 1;
    let ny = ((hi[1] - lo[1]) / cfg.spacing_m).floor() as usize + 1;
    let mut graph = WaypointGraph::new();
    let mut ids = vec![None; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let p = [lo[0] + i as f64 * cfg.spacing_m, lo[1] + j as f64 * cfg.spacing_m];
            if world.clearance(p) >= cfg.margin_m {
                ids[j * nx + i] = Some(graph.add_node(p));
            }
        }
    }
    for j in 0..ny {
        for i in 0..nx {
            let Some(a) = ids[j * nx + i] else { continue };
            for (di, dj) in [(1i64, 0i64), (0, 1), (1, 1), (-1, 1)] {
                let (ii, jj) = (i as i64 + di, j as i64 + dj);
                if ii < 0 || ii >= nx as i64 || jj >= ny as i64 {
                    continue;
                }
                if let Some(b) = ids[jj as usize * nx + ii as usize] {
                    if world.segment_clearance(graph.node(a), graph.node(b)) >= cfg.margin_m {
                        graph.add_edge(a, b)?;
                    }
                }
            }
        }
    }
    let lattice = graph.len();
    let attach = |graph: &mut WaypointGraph, p: Point| -> Result<usize, SimError> {
        let id = graph.add_node(p);
        for n in 0..lattice {
            let q = graph.node(n);
            if geom::dist(p, q) <= 1.5 * cfg.spacing_m && world.segment_clearance(p, q) >= cfg.margin_m {
                graph.add_edge(id, n)?;
            }
        }
        Ok(id)
    };
    let s = attach(&mut graph, start)?;
    let g = attach(&mut graph, goal)?;
    if geom::dist(start, goal) <= 1.5 * cfg.spacing_m && world.segment_clearance(start, goal) >= cfg.margin_m {
        graph.add_edge(s, g)?;
    }
    Ok((graph, s, g))
}

/// A planned route: the start pose position and the waypoints to chain,
/// ending at the goal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub start: Point,
    /// Sub-goals handed to the controller, ending at the goal.
    pub waypoints: Vec<Point>,
    /// Smooth path from start to goal that the waypoints lie on.
    pub path: Vec<Point>,
}

impl Route {
    pub fn goal(&self) -> Point {
        *self.waypoints.last().expect("routes are nonempty")
    }

    /// Start followed by the waypoints.
    pub fn polyline(&self) -> Vec<Point> {
        std::iter::once(self.start)
            .chain(self.waypoints.iter().copied())
            .collect()
    }

    /// Length of the smooth path.
    pub fn length(&self) -> f64 {
        self.path.windows(2).map(|w| geom::dist(w[0], w[1])).sum()
    }
}

/// Plan on the lattice, shortcut the node path wherever the straight segment
/// keeps the margin, smooth the corners and place waypoints along the result.
pub fn plan_route(world: &World, start: Point, goal: Point, cfg: &PlannerConfig) -> Result<Route, SimError> {
    if world.clearance(start) < cfg.margin_m || world.clearance(goal) < cfg.margin_m {
        return Err(SimError::World("start or goal lacks the planning margin".into()));
    }
    let (graph, s, g) = lattice_graph(world, start, goal, cfg)?;
    let plan = astar_plan(&graph, s, g)?;
    let pts: Vec<Point> = plan.nodes.iter().map(|n| graph.node(*n)).collect();
    let mut pulled = vec![pts[0]];
    let mut i = 0;
    while i + 1 < pts.len() {
        let mut j = pts.len() - 1;
        while j > i + 1 && world.segment_clearance(pts[i], pts[j]) < cfg.margin_m {
            j -= 1;
        }
        pulled.push(pts[j]);
        i = j;
    }
    let path = smooth_path(world, &pulled, cfg);
    let waypoints = place_waypoints(&path, cfg);
    Ok(Route { start, waypoints, path })
}

fn unit(a: Point, b: Point) -> Point {
    let d = geom::dist(a, b);
    [(b[0] - a[0]) / d, (b[1] - a[1]) / d]
}

/// Resample at 0.25 m and repeatedly average each point with its neighbours
/// within `smooth_window_m`, keeping a move only where the segments to its
/// neighbours hold the smoothing clearance. Endpoints stay fixed; a path without corners is
/// returned as is.
fn smooth_path(world: &World, pts: &[Point], cfg: &PlannerConfig) -> Vec<Point> {
    if pts.len() < 3 {
        return pts.to_vec();
    }
    const STEP: f64 = 0.25;
    let mut dense = vec![pts[0]];
    for w in pts.windows(2) {
        let pieces = (geom::dist(w[0], w[1]) / STEP).ceil().max(1.0) as usize;
        for m in 1..=pieces {
            let f = m as f64 / pieces as f64;
            dense.push([w[0][0] + f * (w[1][0] - w[0][0]), w[0][1] + f * (w[1][1] - w[0][1])]);
        }
    }
    let half = (cfg.smooth_window_m / STEP).round().max(1.0) as usize;
    let n = dense.len();
    for _ in 0..cfg.smooth_iterations {
        let prev = dense.clone();
        for i in 1..n - 1 {
            let (lo, hi) = (i.saturating_sub(half), (i + half).min(n - 1));
            let k = (hi - lo + 1) as f64;
            let mean = prev[lo..=hi]
                .iter()
                .fold([0.0, 0.0], |a, p| [a[0] + p[0] / k, a[1] + p[1] / k]);
            let c = cfg.smooth_clearance_m;
            if world.segment_clearance(dense[i - 1], mean) >= c && world.segment_clearance(mean, prev[i + 1]) >= c {
                dense[i] = mean;
            }
        }
    }
    dense.dedup_by(|a, b| geom::dist(*a, *b) < 1e-9);
    dense
}

/// A waypoint wherever the path has turned by `waypoint_turn` since the
/// previous one, plus the goal; gaps longer than `max_segment_m` of path are
/// split evenly by arclength.
fn place_waypoints(path: &[Point], cfg: &PlannerConfig) -> Vec<Point> {
    let mut keys = vec![0];
    let mut turned = 0.0;
    for k in 1..path.len() - 1 {
        let (u, v) = (unit(path[k - 1], path[k]), unit(path[k], path[k + 1]));
        turned += geom::cross(u, v).atan2(geom::dot(u, v)).abs();
        if turned >= cfg.waypoint_turn - 1e-9 {
            keys.push(k);
            turned = 0.0;
        }
    }
    keys.push(path.len() - 1);
    let mut out = Vec::new();
    for w in keys.windows(2) {
        let piece = &path[w[0]..=w[1]];
        let mut cum = vec![0.0];
        for s in piece.windows(2) {
            cum.push(cum.last().unwrap() + geom::dist(s[0], s[1]));
        }
        let total = *cum.last().unwrap();
        let parts = (total / cfg.max_segment_m).ceil().max(1.0) as usize;
        for m in 1..parts {
            let at = total * m as f64 / parts as f64;
            let k = cum.windows(2).position(|c| at <= c[1]).unwrap();
            let f = (at - cum[k]) / (cum[k + 1] - cum[k]);
            let (a, b) = (piece[k], piece[k + 1]);
            out.push([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
        }
        out.push(path[w[1]]);
    }
    out
}

/// Expert motion at 1 Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPath {
    pub positions: Vec<Point>,
    pub headings: Vec<f64>,
}

/// Walk the route at constant speed (one chord of `speed` meters per second),
/// standing still for `lead` seconds first and `tail` seconds at the goal.
/// Headings follow the route segment, or the chord where a step spans a corner.
pub fn scripted_expert(
    world: &World,
    route: &Route,
    speed: f64,
    lead: usize,
    tail: usize,
) -> Result<ExpertPath, SimError> {
    if !(speed > 0.0) {
        return Err(SimError::Param("expert speed must be positive".into()));
    }
    let line = &route.path;
    let mut cum = vec![0.0];
    for w in line.windows(2) {
        cum.push(cum.last().unwrap() + geom::dist(w[0], w[1]));
    }
    let total = *cum.last().unwrap();
    let seg_of = |s: f64| {
        cum.windows(2)
            .position(|c| s <= c[1])
            .unwrap_or(line.len().saturating_sub(2))
    };
    let at = |s: f64| {
        let k = seg_of(s);
        let len = cum[k + 1] - cum[k];
        let f = if len > 0.0 { (s - cum[k]) / len } else { 0.0 };
        let (a, b) = (line[k], line[k + 1]);
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
    };
    if line.len() < 2 || total == 0.0 {
        return Err(SimError::World("route has no length".into()));
    }
    let steps = (total / speed).ceil() as usize;
    let arcs: Vec<f64> = (0..=steps).map(|k| (k as f64 * speed).min(total)).collect();
    let moving: Vec<Point> = arcs.iter().map(|s| at(*s)).collect();
    let mut head = Vec::with_capacity(steps);
    for k in 1..=steps {
        let (s0, s1) = (arcs[k - 1], arcs[k]);
        let (k0, k1) = (seg_of(s0.max(1e-12)), seg_of(s1));
        let (a, b) = if k0 == k1 {
            (line[k0], line[k0 + 1])
        } else {
            (moving[k - 1], moving[k])
        };
        head.push((b[1] - a[1]).atan2(b[0] - a[0]));
    }
    for w in moving.windows(2) {
        if world.segment_clearance(w[0], w[1]) < ROBOT_RADIUS {
            return Err(SimError::World("expert path touches an obstacle".into()));
        }
    }
    let mut positions = vec![moving[0]; lead];
    let mut headings = vec![head[0]; lead];
    positions.extend(&moving);
    headings.push(head[0]);
    headings.extend(&head);
    positions.extend(std::iter::repeat_n(moving[steps], tail));
    headings.extend(std::iter::repeat_n(head[steps - 1], tail));
    Ok(ExpertPath { positions, headings })
}

/// Motion templates of the synthetic generator; each maps to one scenario tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    Straight,
    Turn,
    Crossing,
    Detour,
    Proximity,
    Crowd,
}

impl Template {
    pub const ALL: [Template; 6] = [
        Template::Straight,
        Template::Turn,
        Template::Crossing,
        Template::Detour,
        Template::Proximity,
        Template::Crowd,
    ];

    pub fn scenario(self) -> Scenario {
        match self {
            Template::Straight => Scenario::Other,
            Template::Turn => Scenario::Turn,
            Template::Crossing => Scenario::Crossing,
            Template::Detour => Scenario::Detour,
            Template::Proximity => Scenario::Proximity,
            Template::Crowd => Scenario::Crowd,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Template::Straight => "straight",
            Template::Turn => "turn",
            Template::Crossing => "crossing",
            Template::Detour => "detour",
            Template::Proximity => "proximity",
            Template::Crowd => "crowd",
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Template {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Template::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| SimError::Param(format!("unknown template {s:?}")))
    }
}

/// A generated world with its planned route.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub world: World,
    pub route: Route,
    pub template: Template,
}

pub const WORLD_SIZE: f64 = 30.0;

/// Dihedral symmetry of the square world: rotate by `k·90°` about the center,
/// after an optional mirror.
fn symmetry(sym: u8) -> impl Fn(Point) -> Point {
    move |p: Point| {
        let c = WORLD_SIZE / 2.0;
        let mut q = [p[0] - c, p[1] - c];
        if sym >= 4 {
            q[1] = -q[1];
        }
        for _ in 0..sym % 4 {
            q = [-q[1], q[0]];
        }
        [q[0] + c, q[1] + c]
    }
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Point> {
    vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
}

/// Off-route clutter at least `gap` meters from the line `y = y0`.
fn clutter(rng: &mut ChaCha8Rng, y0: f64, gap: f64, count: usize) -> Vec<Vec<Point>> {
    (0..count)
        .map(|_| {
            let (w, h) = (rng.gen_range(1.5..3.0), rng.gen_range(1.5..3.0));
            let x = rng.gen_range(2.0..WORLD_SIZE - 2.0 - w);
            let y = if rng.gen_bool(0.5) {
                rng.gen_range(y0 + gap..(y0 + gap + 1.0).max(WORLD_SIZE - 1.0 - h))
            } else {
                rng.gen_range((1.0f64).min(y0 - gap - h - 1.0)..y0 - gap - h)
            };
            rect(x, y, x + w, y + h)
        })
        .collect()
}

/// `count` planned routes between random free points of `world` at least
/// `min_length_m` apart. Pairs the planner cannot connect are redrawn.
pub fn sample_routes(
    world: &World,
    count: usize,
    min_length_m: f64,
    seed: u64,
    planner: &PlannerConfig,
) -> Result<Vec<Route>, SimError> {
    world.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = world.bounds;
    let m = planner.margin_m;
    if hi[0] - lo[0] <= 2.0 * m || hi[1] - lo[1] <= 2.0 * m {
        return Err(SimError::World("world is too small for the planning margin".into()));
    }
    let free = |rng: &mut ChaCha8Rng| {
        (0..10_000).find_map(|_| {
            let p = [rng.gen_range(lo[0] + m..hi[0] - m), rng.gen_range(lo[1] + m..hi[1] - m)];
            (world.clearance(p) >= m).then_some(p)
        })
    };
    let mut routes = Vec::with_capacity(count);
    let mut attempts = 0;
    while routes.len() < count {
        attempts += 1;
        if attempts > 200 * count.max(1) {
            return Err(SimError::World(format!(
                "found only {} of {count} routes after {} attempts",
                routes.len(),
                attempts - 1
            )));
        }
        let (Some(a), Some(b)) = (free(&mut rng), free(&mut rng)) else {
            return Err(SimError::World("no free space with the planning margin".into()));
        };
        if geom::dist(a, b) < min_length_m {
            continue;
        }
        if let Ok(r) = plan_route(world, a, b, planner) {
            routes.push(r);
        }
    }
    Ok(routes)
}

/// Build the world for `(seed, template)` and plan its route.
pub fn generate_scene(seed: u64, template: Template, planner: &PlannerConfig) -> Result<Scene, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (template as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let y0 = rng.gen_range(13.0..17.0);
    let (start, goal, boxes) = match template {
        Template::Straight | Template::Crossing | Template::Crowd => {
            let n = rng.gen_range(1..=3);
            ([4.0, y0], [26.0, y0], clutter(&mut rng, y0, 5.0, n))
        }
        Template::Turn => {
            let c = rng.gen_range(9.5..10.5);
            (
                [rng.gen_range(7.0..8.0), rng.gen_range(20.0..22.0)],
                [rng.gen_range(20.0..22.0), rng.gen_range(7.0..8.0)],
                vec![rect(c, c, 28.0, 28.0)],
            )
        }
        Template::Detour => {
            let xc = rng.gen_range(14.0..16.0);
            let half = rng.gen_range(1.0..2.0);
            let (below, above) = (rng.gen_range(1.5..4.0), rng.gen_range(1.5..4.0));
            (
                [4.0, y0],
                [26.0, y0],
                vec![rect(xc - half, y0 - below, xc + half, y0 + above)],
            )
        }
        Template::Proximity => {
            let hw = rng.gen_range(1.9..2.3);
            let (x0, x1) = (rng.gen_range(8.0..10.0), rng.gen_range(20.0..22.0));
            (
                [4.0, y0],
                [26.0, y0],
                vec![
                    rect(x0, y0 + hw, x1, y0 + hw + 1.5),
                    rect(x0, y0 - hw - 1.5, x1, y0 - hw),
                ],
            )
        }
    };
    let sym = symmetry(rng.gen_range(0..8));
    let mut world = World {
        bounds: [[0.0, 0.0], [WORLD_SIZE, WORLD_SIZE]],
        obstacles: boxes
            .into_iter()
            .map(|b| Polygon::from_points(b.into_iter().map(&sym).collect()))
            .collect(),
        agents: Vec::new(),
        seed,
    };
    world.validate()?;
    let route = plan_route(&world, sym(start), sym(goal), planner)
        .map_err(|e| SimError::World(format!("{template} template unreachable: {e}")))?;
    world.agents = route_agents(&mut rng, template, &route);
    world.validate()?;
    Ok(Scene { world, route, template })
}

/// Pedestrians placed relative to a straight route. Crossers pass the route
/// at least six seconds before anything moving at the speed cap could get
/// there; the crowd walks in lanes beside the route.
fn route_agents(rng: &mut ChaCha8Rng, template: Template, route: &Route) -> Vec<Agent> {
    let (a, b) = (route.start, route.goal());
    let len = geom::dist(a, b);
    let tangent = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
    let normal = [-tangent[1], tangent[0]];
    let at = |s: f64, lateral: f64| {
        [
            a[0] + s * tangent[0] + lateral * normal[0],
            a[1] + s * tangent[1] + lateral * normal[1],
        ]
    };
    let crossers = match template {
        Template::Crossing => rng.gen_range(2..=3),
        Template::Crowd => 1,
        _ => 0,
    };
    let mut agents = Vec::new();
    for _ in 0..crossers {
        let s = rng.gen_range(0.4..0.75) * len;
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let speed = rng.gen_range(0.8..1.3);
        let t_cross = s / 1.2 - rng.gen_range(6.0..8.0);
        agents.push(Agent {
            from: at(s, 8.0 * side),
            to: at(s, -8.0 * side),
            speed,
            depart_s: t_cross - 8.0 / speed,
        });
    }
    if template == Template::Crowd {
        for _ in 0..rng.gen_range(4..=6) {
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let lateral = side * rng.gen_range(2.6..3.5);
            let (s0, s1) = (len + rng.gen_range(0.0..3.0), rng.gen_range(-3.0..0.0));
            let (from, to) = if rng.gen_bool(0.7) { (s0, s1) } else { (s1, s0) };
            agents.push(Agent {
                from: at(from, lateral),
                to: at(to, lateral),
                speed: rng.gen_range(0.8..1.3),
                depart_s: rng.gen_range(-10.0..5.0),
            });
        }
    }
    agents
}

/// What a navigation policy is told at each control step.
pub struct StepContext<'a> {
    pub world: &'a World,
    pub provider: &'a SceneProvider,
    /// Every state so far; the last one is current.
    pub history: &'a [RobotState],
    pub route: &'a Route,
    pub subgoal_index: usize,
}

impl StepContext<'_> {
    pub fn state(&self) -> &RobotState {
        self.history.last().expect("history starts with the initial state")
    }

    pub fn subgoal(&self) -> Point {
        self.route.waypoints[self.subgoal_index]
    }

    /// The last `n` states, oldest first, padded by repeating the first.
    pub fn context(&self, n: usize) -> Vec<RobotState> {
        let h = self.history;
        (0..n)
            .map(|i| {
                let back = n - 1 - i;
                h[h.len().saturating_sub(1 + back)]
            })
            .collect()
    }
}

pub trait NavPolicy: Sync {
    /// Ego-frame waypoints and arrival probability.
    fn act(&self, ctx: &StepContext<'_>) -> Result<PolicyOutput, SimError>;
}

/// Policy observation window for the current step of a rollout.
pub fn observation_window(ctx: &StepContext<'_>, model: &PolicyModel) -> Result<ObservationWindow, SimError> {
    let cfg = &model.config;
    let states = ctx.context(cfg.context_n);
    let frames: Vec<FrameObservation> = states.iter().map(|s| ctx.provider.camera.frame(s)).collect();
    let feats = frames
        .iter()
        .map(|f| perception::observe_frame(ctx.provider, f, &cfg.perception).map(Arc::new))
        .collect::<Result<Vec<_>, _>>()?;
    let tracks = if cfg.use_tracking {
        perception::track_features(ctx.provider, &frames, cfg.perception.grid, cfg.perception.m_trk)?
    } else {
        TrackSet::default()
    };
    let now = ctx.state();
    Ok(ObservationWindow {
        frames: feats,
        tracks,
        positions: states
            .iter()
            .map(|s| geom::to_ego(s.position, now.position, now.heading))
            .collect(),
        subgoal: geom::to_ego(ctx.subgoal(), now.position, now.heading),
    })
}

/// A trained model in the loop.
pub struct ModelPolicy<'m> {
    pub model: &'m PolicyModel,
}

impl NavPolicy for ModelPolicy<'_> {
    fn act(&self, ctx: &StepContext<'_>) -> Result<PolicyOutput, SimError> {
        Ok(self.model.predict(&observation_window(ctx, self.model)?)?)
    }
}

/// Walks straight at the current sub-goal at full speed, stopping on it.
pub struct OraclePolicy {
    pub horizon: usize,
    pub speed: f64,
}

impl NavPolicy for OraclePolicy {
    fn act(&self, ctx: &StepContext<'_>) -> Result<PolicyOutput, SimError> {
        let now = ctx.state();
        let g = geom::to_ego(ctx.subgoal(), now.position, now.heading);
        let d = geom::norm(g);
        let waypoints = (1..=self.horizon)
            .map(|k| {
                let s = if d > 0.0 {
                    (k as f64 * self.speed).min(d) / d
                } else {
                    0.0
                };
                [g[0] * s, g[1] * s]
            })
            .collect();
        Ok(PolicyOutput {
            waypoints,
            arrival_prob: 0.0,
        })
    }
}

/// Predicts staying in place and never declares arrival.
pub struct ZeroPolicy {
    pub horizon: usize,
}

impl NavPolicy for ZeroPolicy {
    fn act(&self, _: &StepContext<'_>) -> Result<PolicyOutput, SimError> {
        Ok(PolicyOutput {
            waypoints: vec![[0.0, 0.0]; self.horizon],
            arrival_prob: 0.0,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub max_steps: usize,
    /// Waypoint reach radius, meters.
    pub radius_m: f64,
    /// Arrival-head threshold for advancing.
    pub tau: f64,
    pub dt: f64,
    pub kinematics: Kinematics,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            max_steps: 80,
            radius_m: 1.0,
            tau: 0.5,
            dt: 1.0,
            kinematics: Kinematics::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Collision,
    Timeout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    /// Initial state plus one state per executed step.
    pub states: Vec<RobotState>,
    /// Sub-goal index in force at each entry of `states`.
    pub subgoal_indices: Vec<usize>,
    pub outcome: Outcome,
}

impl RolloutResult {
    pub fn success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    pub fn path_length(&self) -> f64 {
        self.states
            .windows(2)
            .map(|w| geom::dist(w[0].position, w[1].position))
            .sum()
    }
}

/// Header of the per-step trajectory table written by [`trajectory_tsv`].
pub const TRAJECTORY_HEADER: &str = "route\tstep\ttime_s\tx\ty\theading\tsubgoal_index\tsubgoal_x\tsubgoal_y\toutcome";

/// One row per state of every rollout; `outcome` repeats the route's result.
pub fn trajectory_tsv(routes: &[Route], results: &[RolloutResult]) -> String {
    let mut out = format!("{TRAJECTORY_HEADER}\n");
    for (i, (route, r)) in routes.iter().zip(results).enumerate() {
        let outcome = match r.outcome {
            Outcome::Success => "success",
            Outcome::Collision => "collision",
            Outcome::Timeout => "timeout",
        };
        for (k, (s, idx)) in r.states.iter().zip(&r.subgoal_indices).enumerate() {
            let g = route.waypoints[*idx];
            out += &format!(
                "{i}\t{k}\t{:.3}\t{:.6}\t{:.6}\t{:.6}\t{idx}\t{:.6}\t{:.6}\t{outcome}\n",
                s.time_s, s.position[0], s.position[1], s.heading, g[0], g[1]
            );
        }
    }
    out
}

/// Closed loop: predict, execute the first waypoint for `dt`, update the
/// sub-goal. Succeeds once the last waypoint is current and within the reach
/// radius; a collision ends the episode as a failure.
pub fn rollout(
    policy: &dyn NavPolicy,
    world: &Arc<World>,
    route: &Route,
    cfg: &RolloutConfig,
) -> Result<RolloutResult, SimError> {
    if route.waypoints.is_empty() {
        return Err(SimError::Param("route has no waypoints".into()));
    }
    let provider = SceneProvider::new(world.clone());
    let first = route.waypoints[0];
    let mut states = vec![RobotState {
        position: route.start,
        heading: (first[1] - route.start[1]).atan2(first[0] - route.start[0]),
        time_s: 0.0,
    }];
    let last = route.waypoints.len() - 1;
    let mut idx = subgoal_controller(route.start, &route.waypoints, 0, 0.0, cfg.radius_m, cfg.tau);
    let mut indices = vec![idx];
    for _ in 0..cfg.max_steps {
        let ctx = StepContext {
            world,
            provider: &provider,
            history: &states,
            route,
            subgoal_index: idx,
        };
        let out = policy.act(&ctx)?;
        let now = *ctx.state();
        let target = out
            .waypoints
            .first()
            .map(|w| geom::from_ego(*w, now.position, now.heading))
            .unwrap_or(now.position);
        let step = simulator_step(world, &now, target, cfg.dt, &cfg.kinematics)?;
        states.push(step.state);
        idx = subgoal_controller(
            step.state.position,
            &route.waypoints,
            idx,
            out.arrival_prob,
            cfg.radius_m,
            cfg.tau,
        );
        indices.push(idx);
        if step.collision {
            return Ok(RolloutResult {
                states,
                subgoal_indices: indices,
                outcome: Outcome::Collision,
            });
        }
        if idx == last && geom::dist(step.state.position, route.waypoints[last]) <= cfg.radius_m {
            return Ok(RolloutResult {
                states,
                subgoal_indices: indices,
                outcome: Outcome::Success,
            });
        }
    }
    Ok(RolloutResult {
        states,
        subgoal_indices: indices,
        outcome: Outcome::Timeout,
    })
}

/// Independent rollouts in parallel, results in input order.
pub fn rollout_many(
    policy: &dyn NavPolicy,
    scenes: &[(Arc<World>, Route)],
    cfg: &RolloutConfig,
) -> Result<Vec<RolloutResult>, SimError> {
    scenes.par_iter().map(|(w, r)| rollout(policy, w, r, cfg)).collect()
}
