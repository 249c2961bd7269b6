//! Pose-search evaluation and its metrics.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vird_core::geometry::wrap_angle;
use vird_core::model::Model;
use vird_core::{Pose, PoseGrid};

use crate::config::GridSettings;
use crate::data::Prepared;
use crate::error::{io_err, ExperimentError, Result};

pub const REPORT_FILE: &str = "report.json";
pub const PER_SAMPLE_FILE: &str = "per_sample.csv";
pub const TIMING_FILE: &str = "timing.json";

/// Orientation error in degrees, in `[0, 180]`.
pub fn orientation_error_deg(pred: f64, gt: f64) -> f64 {
    wrap_angle(pred - gt).abs().to_degrees().min(180.0)
}

/// Position error split along the true heading (longitudinal) and across
/// it (lateral), metres.
pub fn lateral_longitudinal(pred: &Pose, gt: &Pose) -> (f64, f64) {
    let (ex, ey) = (pred.x() - gt.x(), pred.y() - gt.y());
    let (hx, hy) = (gt.theta().cos(), -gt.theta().sin());
    let longitudinal = ex * hx + ey * hy;
    let lateral = ex * -hy + ey * hx;
    (lateral, longitudinal)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    pub position_m: f64,
    pub orientation_deg: f64,
    pub lateral_m: f64,
    pub longitudinal_m: f64,
}

impl PoseErrors {
    pub fn between(pred: &Pose, gt: &Pose) -> Self {
        let (lateral_m, longitudinal_m) = lateral_longitudinal(pred, gt);
        Self {
            position_m: (pred.x() - gt.x()).hypot(pred.y() - gt.y()),
            orientation_deg: orientation_error_deg(pred.theta(), gt.theta()),
            lateral_m,
            longitudinal_m,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub gt: Pose,
    pub pred: Pose,
    pub coarse: Pose,
    pub score: f64,
    pub errors: PoseErrors,
    pub coarse_errors: PoseErrors,
}

/// Percentages in `[0, 100]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub count: usize,
    pub mean_position_m: f64,
    pub median_position_m: f64,
    pub mean_orientation_deg: f64,
    pub median_orientation_deg: f64,
    pub lateral_r1m: f64,
    pub lateral_r5m: f64,
    pub longitudinal_r1m: f64,
    pub longitudinal_r5m: f64,
    pub orientation_r1deg: f64,
    pub orientation_r5deg: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl Aggregates {
    pub fn from_errors(errors: &[PoseErrors]) -> Self {
        let n = errors.len();
        if n == 0 {
            return Self::default();
        }
        let pos: Vec<f64> = errors.iter().map(|e| e.position_m).collect();
        let ori: Vec<f64> = errors.iter().map(|e| e.orientation_deg).collect();
        let recall = |f: &dyn Fn(&PoseErrors) -> bool| 100.0 * errors.iter().filter(|e| f(e)).count() as f64 / n as f64;
        Self {
            count: n,
            mean_position_m: pos.iter().sum::<f64>() / n as f64,
            median_position_m: median(&pos),
            mean_orientation_deg: ori.iter().sum::<f64>() / n as f64,
            median_orientation_deg: median(&ori),
            lateral_r1m: recall(&|e| e.lateral_m.abs() <= 1.0),
            lateral_r5m: recall(&|e| e.lateral_m.abs() <= 5.0),
            longitudinal_r1m: recall(&|e| e.longitudinal_m.abs() <= 1.0),
            longitudinal_r5m: recall(&|e| e.longitudinal_m.abs() <= 5.0),
            orientation_r1deg: recall(&|e| e.orientation_deg <= 1.0),
            orientation_r5deg: recall(&|e| e.orientation_deg <= 5.0),
        }
    }
}

/// Work counts. Wall-clock times are in [`Timing`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub samples: usize,
    pub candidates_per_sample: usize,
    pub descriptors_per_sample: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_s: f64,
    pub per_sample_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub grid_side: usize,
    pub n_theta_requested: usize,
    /// Yaw count after snapping to a divisor of the polar width.
    pub n_theta: usize,
    pub refine: bool,
    /// Errors of the reported poses (refined when `refine`).
    pub summary: Aggregates,
    /// Errors of the grid argmax alone.
    pub coarse: Aggregates,
    pub runtime: RuntimeStats,
    pub per_sample: Vec<SampleResult>,
}

/// Searches `grid` for every sample. Samples are processed in parallel and
/// collected in input order.
pub fn evaluate_grid(model: &Model, samples: &[Prepared], grid: &PoseGrid, refine: bool) -> Result<(Vec<SampleResult>, Timing)> {
    if grid.is_empty() {
        return Err(ExperimentError::Config("the search grid has no candidates".into()));
    }
    let start = Instant::now();
    let results = samples
        .par_iter()
        .map(|s| {
            let inf = model.infer(&s.sat, &s.grd, grid, refine)?;
            Ok(SampleResult {
                id: s.id.clone(),
                gt: s.pose,
                pred: inf.refined,
                coarse: inf.coarse,
                score: inf.score,
                errors: PoseErrors::between(&inf.refined, &s.pose),
                coarse_errors: PoseErrors::between(&inf.coarse, &s.pose),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total_s = start.elapsed().as_secs_f64();
    let timing = Timing {
        total_s,
        per_sample_ms: 1e3 * total_s / samples.len().max(1) as f64,
    };
    Ok((results, timing))
}

pub fn evaluate(model: &Model, samples: &[Prepared], grid: GridSettings, refine: bool) -> Result<(EvalReport, Timing)> {
    let g = model.pose_grid(grid.side, grid.n_theta)?;
    let (per_sample, timing) = evaluate_grid(model, samples, &g, refine)?;
    let summary = Aggregates::from_errors(&per_sample.iter().map(|r| r.errors).collect::<Vec<_>>());
    let coarse = Aggregates::from_errors(&per_sample.iter().map(|r| r.coarse_errors).collect::<Vec<_>>());
    let report = EvalReport {
        grid_side: g.side(),
        n_theta_requested: grid.n_theta,
        n_theta: g.n_theta(),
        refine,
        summary,
        coarse,
        runtime: RuntimeStats {
            samples: samples.len(),
            candidates_per_sample: g.len(),
            descriptors_per_sample: g.n_positions(),
        },
        per_sample,
    };
    Ok((report, timing))
}

#[derive(Serialize)]
struct CsvRow<'a> {
    id: &'a str,
    gt_x_m: f64,
    gt_y_m: f64,
    gt_theta_deg: f64,
    pred_x_m: f64,
    pred_y_m: f64,
    pred_theta_deg: f64,
    pos_err_m: f64,
    orient_err_deg: f64,
    lateral_m: f64,
    longitudinal_m: f64,
    coarse_x_m: f64,
    coarse_y_m: f64,
    coarse_theta_deg: f64,
    coarse_pos_err_m: f64,
    coarse_orient_err_deg: f64,
    score: f64,
}

/// `report.json`, `per_sample.csv` and `timing.json` in `dir`.
pub fn write_report(report: &EvalReport, timing: &Timing, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(REPORT_FILE);
    fs::write(&path, serde_json::to_string_pretty(report).expect("report serializes")).map_err(io_err(&path))?;
    let path = dir.join(TIMING_FILE);
    fs::write(&path, serde_json::to_string_pretty(timing).expect("timing serializes")).map_err(io_err(&path))?;
    let path = dir.join(PER_SAMPLE_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| ExperimentError::Csv(path.clone(), e))?;
    for r in &report.per_sample {
        w.serialize(CsvRow {
            id: &r.id,
            gt_x_m: r.gt.x(),
            gt_y_m: r.gt.y(),
            gt_theta_deg: r.gt.theta().to_degrees(),
            pred_x_m: r.pred.x(),
            pred_y_m: r.pred.y(),
            pred_theta_deg: r.pred.theta().to_degrees(),
            pos_err_m: r.errors.position_m,
            orient_err_deg: r.errors.orientation_deg,
            lateral_m: r.errors.lateral_m,
            longitudinal_m: r.errors.longitudinal_m,
            coarse_pos_err_m: r.coarse_errors.position_m,
            coarse_x_m: r.coarse.x(),
            coarse_y_m: r.coarse.y(),
            coarse_theta_deg: r.coarse.theta().to_degrees(),
            coarse_orient_err_deg: r.coarse_errors.orientation_deg,
            score: r.score,
        })
        .map_err(|e| ExperimentError::Csv(path.clone(), e))?;
    }
    w.flush().map_err(io_err(&path))
}
