//! Planar geometry shared by the policy, metrics and simulator.

use std::f64::consts::PI;

/// Steps shorter than this (meters) have no defined direction.
pub const DEGENERATE_STEP: f64 = 1e-6;

pub type Point = [f64; 2];

/// Wrap an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

pub fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

pub fn rotate(p: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// World point to the frame with `origin` at zero and `heading` along +x.
pub fn to_ego(p: Point, origin: Point, heading: f64) -> Point {
    rotate(sub(p, origin), -heading)
}

pub fn from_ego(p: Point, origin: Point, heading: f64) -> Point {
    add(rotate(p, heading), origin)
}

/// Consecutive differences of `waypoints` with the origin prepended.
pub fn steps_from_origin(waypoints: &[Point]) -> Vec<Point> {
    let mut prev = [0.0, 0.0];
    waypoints
        .iter()
        .map(|p| {
            let s = sub(*p, prev);
            prev = *p;
            s
        })
        .collect()
}

/// Unsigned angle between two step vectors in `[0, π]`. A zero-length
/// predicted step counts as the worst case, `π`.
pub fn step_angle(pred: Point, gt: Point) -> f64 {
    if norm(pred) < DEGENERATE_STEP {
        return PI;
    }
    cross(pred, gt).atan2(dot(pred, gt)).abs()
}

/// Segment `a-b` against segment `c-d`, endpoints included.
pub fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let o1 = cross(sub(b, a), sub(c, a));
    let o2 = cross(sub(b, a), sub(d, a));
    let o3 = cross(sub(d, c), sub(a, c));
    let o4 = cross(sub(d, c), sub(b, c));
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0)) && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0)) {
        return true;
    }
    let on = |p: Point, q: Point, r: Point, o: f64| {
        o == 0.0 && r[0] >= p[0].min(q[0]) && r[0] <= p[0].max(q[0]) && r[1] >= p[1].min(q[1]) && r[1] <= p[1].max(q[1])
    };
    on(a, b, c, o1) || on(a, b, d, o2) || on(c, d, a, o3) || on(c, d, b, o4)
}

/// Distance from `p` to segment `a-b`.
pub fn point_segment_dist(p: Point, a: Point, b: Point) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 == 0.0 {
        0.0
    } else {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

/// Smallest distance between segments `a-b` and `c-d`.
pub fn segment_segment_dist(a: Point, b: Point, c: Point, d: Point) -> f64 {
    if segments_intersect(a, b, c, d) {
        return 0.0;
    }
    point_segment_dist(a, c, d)
        .min(point_segment_dist(b, c, d))
        .min(point_segment_dist(c, a, b))
        .min(point_segment_dist(d, a, b))
}
