//! Offline navigation metrics and scenario aggregation.
//!
//! * MAOE: mean over samples of the worst per-step orientation error.
//! * Arrival accuracy: fraction of samples whose first `K` predicted
//!   waypoints come within `r` of the sub-goal.
//! * L2: mean waypoint displacement.
//!
//! [`aggregate`] reports each scenario, the unweighted mean of the scenario
//! values (`mean`) and the pooled sample mean (`all`).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{self, FormatError};
use crate::geom::{self, Point, DEGENERATE_STEP};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0}: empty sample set")]
    Empty(&'static str),
    #[error("sample {0}: every ground-truth step is degenerate")]
    UndefinedDirection(usize),
    #[error("sample {sample}: prediction has {pred} waypoints, ground truth {gt}")]
    Horizon { sample: usize, pred: usize, gt: usize },
    #[error("unknown scenario tag {0:?}")]
    UnknownTag(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Turn,
    Crossing,
    Detour,
    Proximity,
    Crowd,
    Other,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Turn,
        Scenario::Crossing,
        Scenario::Detour,
        Scenario::Proximity,
        Scenario::Crowd,
        Scenario::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Turn => "turn",
            Scenario::Crossing => "crossing",
            Scenario::Detour => "detour",
            Scenario::Proximity => "proximity",
            Scenario::Crowd => "crowd",
            Scenario::Other => "other",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| MetricsError::UnknownTag(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub pred_waypoints: Vec<Point>,
    pub gt_waypoints: Vec<Point>,
    pub subgoal: Point,
    pub scenario: Scenario,
}

/// Per-step heading errors in degrees, `[0, 180]`. Steps whose ground truth is
/// shorter than [`DEGENERATE_STEP`] are left out.
pub fn step_orientation_errors(pred: &[Point], gt: &[Point]) -> Result<Vec<f64>, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Horizon {
            sample: 0,
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let errs: Vec<f64> = geom::steps_from_origin(pred)
        .into_iter()
        .zip(geom::steps_from_origin(gt))
        .filter(|(_, g)| geom::norm(*g) >= DEGENERATE_STEP)
        .map(|(p, g)| geom::step_angle(p, g).to_degrees())
        .collect();
    if errs.is_empty() {
        return Err(MetricsError::UndefinedDirection(0));
    }
    Ok(errs)
}

fn check_horizons(samples: &[EvalSample]) -> Result<(), MetricsError> {
    for (i, s) in samples.iter().enumerate() {
        if s.pred_waypoints.len() != s.gt_waypoints.len() || s.gt_waypoints.is_empty() {
            return Err(MetricsError::Horizon {
                sample: i,
                pred: s.pred_waypoints.len(),
                gt: s.gt_waypoints.len(),
            });
        }
    }
    Ok(())
}

/// Mean of per-sample maxima.
pub fn maoe_from_errors(errors: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::Empty("maoe"));
    }
    let mut total = 0.0;
    for (i, e) in errors.iter().enumerate() {
        total += e
            .iter()
            .copied()
            .reduce(f64::max)
            .ok_or(MetricsError::UndefinedDirection(i))?;
    }
    Ok(total / errors.len() as f64)
}

/// Mean over samples of the worst step heading error, degrees. Samples whose
/// ground truth never moves are left out.
pub fn maoe(samples: &[EvalSample]) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty("maoe"));
    }
    check_horizons(samples)?;
    let errors: Vec<Vec<f64>> = samples
        .iter()
        .filter_map(|s| step_orientation_errors(&s.pred_waypoints, &s.gt_waypoints).ok())
        .collect();
    if errors.is_empty() {
        return Err(MetricsError::UndefinedDirection(0));
    }
    maoe_from_errors(&errors)
}

/// Fraction of samples with some `k ≤ K` such that `‖p̂_k − g‖ ≤ r`.
pub fn arrival_accuracy(samples: &[EvalSample], r: f64, k: usize) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty("arrival_accuracy"));
    }
    check_horizons(samples)?;
    if !(r > 0.0) {
        return Err(MetricsError::Param(format!("radius must be positive, got {r}")));
    }
    let arrived = samples
        .iter()
        .map(|s| {
            if k == 0 || k > s.pred_waypoints.len() {
                return Err(MetricsError::Param(format!(
                    "K = {k} must be in 1..={}",
                    s.pred_waypoints.len()
                )));
            }
            Ok(s.pred_waypoints[..k].iter().any(|p| geom::dist(*p, s.subgoal) <= r))
        })
        .collect::<Result<Vec<bool>, _>>()?;
    Ok(arrived.iter().filter(|a| **a).count() as f64 / samples.len() as f64)
}

/// Mean over samples of the mean waypoint displacement, meters.
pub fn l2_error(samples: &[EvalSample]) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty("l2_error"));
    }
    check_horizons(samples)?;
    let total: f64 = samples
        .iter()
        .map(|s| {
            let sum: f64 = s
                .pred_waypoints
                .iter()
                .zip(&s.gt_waypoints)
                .map(|(p, g)| geom::dist(*p, *g))
                .sum();
            sum / s.gt_waypoints.len() as f64
        })
        .sum();
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub maoe_deg: f64,
    pub arrival_pct: f64,
    pub l2_m: f64,
    pub n: usize,
}

fn row(samples: &[EvalSample], r: f64, k: Option<usize>) -> Result<MetricRow, MetricsError> {
    let k = k.unwrap_or_else(|| samples.first().map_or(0, |s| s.gt_waypoints.len()));
    Ok(MetricRow {
        maoe_deg: maoe(samples)?,
        arrival_pct: 100.0 * arrival_accuracy(samples, r, k)?,
        l2_m: l2_error(samples)?,
        n: samples.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: Scenario,
    #[serde(flatten)]
    pub metrics: MetricRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub radius_m: f64,
    /// `None` means the full horizon.
    pub k: Option<usize>,
    /// Present scenarios in canonical order.
    pub scenarios: Vec<ScenarioRow>,
    /// Scenarios with no samples; left out of `mean`.
    pub missing: Vec<Scenario>,
    /// Unweighted mean of the scenario rows; `n` is the total sample count.
    pub mean_row: MetricRow,
    /// Metrics over the pooled samples.
    pub all_row: MetricRow,
}

pub fn aggregate(samples: &[EvalSample], r: f64, k: Option<usize>) -> Result<MetricsReport, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty("aggregate"));
    }
    let mut scenarios = Vec::new();
    let mut missing = Vec::new();
    for tag in Scenario::ALL {
        let subset: Vec<EvalSample> = samples.iter().filter(|s| s.scenario == tag).cloned().collect();
        if subset.is_empty() {
            missing.push(tag);
        } else {
            scenarios.push(ScenarioRow {
                scenario: tag,
                metrics: row(&subset, r, k)?,
            });
        }
    }
    let m = scenarios.len() as f64;
    let mean = |f: fn(&MetricRow) -> f64| scenarios.iter().map(|s| f(&s.metrics)).sum::<f64>() / m;
    let mean_row = MetricRow {
        maoe_deg: mean(|r| r.maoe_deg),
        arrival_pct: mean(|r| r.arrival_pct),
        l2_m: mean(|r| r.l2_m),
        n: samples.len(),
    };
    Ok(MetricsReport {
        radius_m: r,
        k,
        all_row: row(samples, r, k)?,
        scenarios,
        missing,
        mean_row,
    })
}

pub const TSV_HEADER: &str = "scenario\tn\tmaoe_deg\tarrival_pct\tl2_m";

impl MetricsReport {
    /// Tab-separated table: header, one line per present scenario, then
    /// `mean` and `all`. Missing scenarios are listed on a trailing `#` line.
    pub fn to_tsv(&self) -> String {
        let line = |name: &str, r: &MetricRow| {
            format!(
                "{name}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
                r.n, r.maoe_deg, r.arrival_pct, r.l2_m
            )
        };
        let mut out = format!("{TSV_HEADER}\n");
        for s in &self.scenarios {
            out += &line(s.scenario.as_str(), &s.metrics);
        }
        out += &line("mean", &self.mean_row);
        out += &line("all", &self.all_row);
        if !self.missing.is_empty() {
            let names: Vec<&str> = self.missing.iter().map(|s| s.as_str()).collect();
            out += &format!("# missing: {}\n", names.join(","));
        }
        out
    }

    pub fn to_json(&self) -> Result<String, MetricsError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Write the table to `path` and the JSON twin next to it (`.json`).
    pub fn write(&self, path: &Path) -> Result<(), MetricsError> {
        format::write_atomic(path, self.to_tsv().as_bytes())?;
        format::write_atomic(&path.with_extension("json"), self.to_json()?.as_bytes())?;
        Ok(())
    }
}
