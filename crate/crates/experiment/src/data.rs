//! Samples decoded into tensors, with their reconstruction targets.

use rayon::prelude::*;
use vird_core::geometry::{cyclic_shift_crop, polar_transform, snap_to_column};
use vird_core::model::Model;
use vird_core::{Pose, Tensor};
use vird_synth::{Dataset, SamplePair};

use crate::error::{ExperimentError, Result};

#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    /// `(3, A, A)`.
    pub sat: Tensor,
    /// `(3, H, W)`.
    pub grd: Tensor,
    pub pose: Pose,
    /// Satellite image resampled around the true position and aligned with
    /// the true yaw, at panorama size.
    pub sat_polar: Tensor,
}

/// Polar view of `sat` at `pose`, rotated by the yaw snapped to the
/// descriptor columns and cropped to the panorama width.
pub fn polar_target(model: &Model, sat: &Tensor, pose: &Pose) -> Result<Tensor> {
    let cfg = &model.polar_img;
    let centre = model.sat_frame.pose_to_pixel(pose);
    let polar = polar_transform(sat, centre, cfg, &model.sat_frame)?;
    let (c, h, w) = (polar.dim(0), polar.dim(1), polar.dim(2));
    let theta = snap_to_column(pose.theta(), model.sat_cols());
    let rows = cyclic_shift_crop(&polar.reshape(&[c * h, w])?, theta, cfg.ground_cols)?;
    Ok(rows.reshape(&[c, h, cfg.ground_cols])?)
}

pub fn prepare_sample(model: &Model, s: &SamplePair) -> Result<Prepared> {
    let cfg = &model.config;
    let sat = s.sat_tensor();
    let grd = s.grd_tensor();
    if sat.shape() != [3, cfg.sat_size, cfg.sat_size] || grd.shape() != [3, cfg.pano_height, cfg.pano_width] {
        return Err(ExperimentError::Config(format!(
            "sample {}: images {:?} and {:?} do not match the model's {}x{} satellite and {}x{} panorama",
            s.id,
            sat.shape(),
            grd.shape(),
            cfg.sat_size,
            cfg.sat_size,
            cfg.pano_height,
            cfg.pano_width
        )));
    }
    if (s.frame.resolution - cfg.sat_resolution).abs() > 1e-12 {
        return Err(ExperimentError::Config(format!(
            "sample {}: {} m/px satellite, model expects {}",
            s.id, s.frame.resolution, cfg.sat_resolution
        )));
    }
    let sat_polar = polar_target(model, &sat, &s.pose)?;
    Ok(Prepared {
        id: s.id.clone(),
        sat,
        grd,
        pose: s.pose,
        sat_polar,
    })
}

pub fn prepare(model: &Model, ds: &Dataset) -> Result<Vec<Prepared>> {
    ds.samples.par_iter().map(|s| prepare_sample(model, s)).collect()
}
