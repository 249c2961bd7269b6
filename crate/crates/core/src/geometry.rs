//! Coordinate conventions, polar resampling, candidate pose grids and
//! azimuth shift-and-crop.
//!
//! World coordinates are metres with x east and y north. Image coordinates
//! have u growing right (east) and v growing down (south); integer
//! coordinates are pixel centres. Yaw is measured clockwise from east, so in
//! image coordinates the heading `theta` points along `(cos theta, sin theta)`.
//! An azimuth-indexed array (polar map or panorama) has column index growing
//! with clockwise azimuth; its central column looks east when `theta = 0`.

use std::f64::consts::{PI, TAU};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = (theta + PI).rem_euclid(TAU) - PI;
    if t >= PI {
        t - TAU
    } else {
        t
    }
}

/// Planar camera pose: position in metres, yaw in radians clockwise from east.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    x: f64,
    y: f64,
    theta: f64,
}

impl Pose {
    /// Panics on non-finite input; see [`Pose::try_new`].
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self::try_new(x, y, theta).expect("pose components must be finite")
    }

    pub fn try_new(x: f64, y: f64, theta: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && theta.is_finite()) {
            return Err(CoreError::Invalid(format!(
                "non-finite pose ({x}, {y}, {theta})"
            )));
        }
        Ok(Self {
            x,
            y,
            theta: wrap_angle(theta),
        })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// `self + delta`, with the yaw re-wrapped.
    pub fn offset(&self, dx: f64, dy: f64, dtheta: f64) -> Self {
        Self::new(self.x + dx, self.y + dy, self.theta + dtheta)
    }
}

/// Pixel grid of a north-up raster centred on the world origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFrame {
    /// Metres per pixel.
    pub resolution: f64,
    pub width_px: usize,
    pub height_px: usize,
}

impl ImageFrame {
    pub fn new(resolution: f64, width_px: usize, height_px: usize) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(CoreError::Config(format!("resolution must be > 0, got {resolution}")));
        }
        if width_px == 0 || height_px == 0 {
            return Err(CoreError::Config("frame must be at least 1x1 px".into()));
        }
        Ok(Self {
            resolution,
            width_px,
            height_px,
        })
    }

    pub fn world_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.width_px as f64 / 2.0 + x / self.resolution,
            self.height_px as f64 / 2.0 - y / self.resolution,
        )
    }

    pub fn pixel_to_world(&self, u: f64, v: f64) -> (f64, f64) {
        (
            (u - self.width_px as f64 / 2.0) * self.resolution,
            (self.height_px as f64 / 2.0 - v) * self.resolution,
        )
    }

    pub fn pose_to_pixel(&self, pose: &Pose) -> (f64, f64) {
        self.world_to_pixel(pose.x, pose.y)
    }

    /// Frame of a feature map produced by downsampling this raster by `factor`.
    pub fn downsampled(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.width_px % factor != 0 || self.height_px % factor != 0 {
            return Err(CoreError::Config(format!(
                "downsample factor {factor} does not divide {}x{}",
                self.width_px, self.height_px
            )));
        }
        Self::new(
            self.resolution * factor as f64,
            self.width_px / factor,
            self.height_px / factor,
        )
    }

    /// Width and height of the covered area in metres.
    pub fn coverage_m(&self) -> (f64, f64) {
        (
            self.width_px as f64 * self.resolution,
            self.height_px as f64 * self.resolution,
        )
    }

    pub fn to_meters(&self, px: f64) -> f64 {
        px * self.resolution
    }

    pub fn to_pixels(&self, meters: f64) -> f64 {
        meters / self.resolution
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

/// Polar resampling parameters. Radii are in metres; they are converted to
/// pixels with the frame of whatever raster is being sampled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarConfig {
    pub r_min: f64,
    pub r_max: f64,
    /// Output rows (radial samples).
    pub rows: usize,
    /// Width of the ground view this map is matched against.
    pub ground_cols: usize,
    /// Output columns covering the full circle.
    pub cols: usize,
    /// Horizontal field of view of the ground camera, radians.
    pub hfov: f64,
    pub interpolation: Interpolation,
}

impl PolarConfig {
    pub fn new(r_min: f64, r_max: f64, rows: usize, ground_cols: usize, hfov: f64) -> Result<Self> {
        if !(0.0 <= r_min && r_min < r_max && r_max.is_finite()) {
            return Err(CoreError::Config(format!(
                "need 0 <= r_min < r_max, got {r_min}, {r_max}"
            )));
        }
        if rows == 0 || ground_cols == 0 {
            return Err(CoreError::Config("polar map needs at least one row and column".into()));
        }
        if !(hfov > 0.0 && hfov <= TAU + 1e-9) {
            return Err(CoreError::Config(format!("hfov must lie in (0, 2pi], got {hfov}")));
        }
        let cols = (TAU / hfov * ground_cols as f64).round() as usize;
        Ok(Self {
            r_min,
            r_max,
            rows,
            ground_cols,
            cols: cols.max(ground_cols),
            hfov,
            interpolation: Interpolation::Bilinear,
        })
    }

    pub fn with_interpolation(mut self, interpolation: Interpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    /// The same geometry resampled at a different output size.
    pub fn with_size(&self, rows: usize, ground_cols: usize) -> Result<Self> {
        Ok(Self::new(self.r_min, self.r_max, rows, ground_cols, self.hfov)?
            .with_interpolation(self.interpolation))
    }
}

/// Source coordinate sampled by output pixel `(u_out, v_out)` of a polar map
/// centred at `center` with radii in pixels.
pub fn polar_source(
    u_out: f64,
    v_out: f64,
    center: (f64, f64),
    r_min_px: f64,
    r_max_px: f64,
    rows: usize,
    cols: usize,
) -> (f64, f64) {
    let rho = (r_max_px - r_min_px) * (1.0 - v_out / rows as f64) + r_min_px;
    let phi = TAU * u_out / cols as f64;
    (center.0 - rho * phi.cos(), center.1 - rho * phi.sin())
}

/// Four weighted taps per output pixel into a `height x width` plane.
struct SampleTable {
    taps: Vec<(usize, f64)>,
}

fn build_table(
    center: (f64, f64),
    cfg: &PolarConfig,
    r_min_px: f64,
    r_max_px: f64,
    height: usize,
    width: usize,
) -> SampleTable {
    let (rows, cols) = (cfg.rows, cfg.cols);
    let trig: Vec<(f64, f64)> = (0..cols)
        .map(|u| {
            let phi = TAU * u as f64 / cols as f64;
            (phi.cos(), phi.sin())
        })
        .collect();
    let mut taps = Vec::with_capacity(rows * cols * 4);
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height;
    for v in 0..rows {
        let rho = (r_max_px - r_min_px) * (1.0 - v as f64 / rows as f64) + r_min_px;
        for &(c, s) in &trig {
            let (su, sv) = (center.0 - rho * c, center.1 - rho * s);
            match cfg.interpolation {
                Interpolation::Bilinear => {
                    let (x0, y0) = (su.floor(), sv.floor());
                    let (fx, fy) = (su - x0, sv - y0);
                    let (x0, y0) = (x0 as i64, y0 as i64);
                    for (dx, dy, w) in [
                        (0, 0, (1.0 - fx) * (1.0 - fy)),
                        (1, 0, fx * (1.0 - fy)),
                        (0, 1, (1.0 - fx) * fy),
                        (1, 1, fx * fy),
                    ] {
                        let (x, y) = (x0 + dx, y0 + dy);
                        taps.push(if inside(x, y) {
                            (y as usize * width + x as usize, w)
                        } else {
                            (0, 0.0)
                        });
                    }
                }
                Interpolation::Nearest => {
                    let (x, y) = (su.round() as i64, sv.round() as i64);
                    taps.push(if inside(x, y) {
                        (y as usize * width + x as usize, 1.0)
                    } else {
                        (0, 0.0)
                    });
                    taps.extend([(0, 0.0); 3]);
                }
            }
        }
    }
    SampleTable { taps }
}

fn radii_px(cfg: &PolarConfig, frame: &ImageFrame) -> Result<(f64, f64)> {
    let r_min = frame.to_pixels(cfg.r_min);
    let r_max = frame.to_pixels(cfg.r_max);
    if !(r_max > 0.0) {
        return Err(CoreError::Invalid(format!("r_max must be > 0 px, got {r_max}")));
    }
    Ok((r_min, r_max))
}

fn check_center(center: (f64, f64)) -> Result<()> {
    if !(center.0.is_finite() && center.1.is_finite()) {
        return Err(CoreError::Invalid(format!(
            "polar centre must be finite, got ({}, {})",
            center.0, center.1
        )));
    }
    Ok(())
}

fn apply_table(table: &SampleTable, plane: &[f64], out: &mut [f64]) {
    for (o, taps) in out.iter_mut().zip(table.taps.chunks_exact(4)) {
        *o = taps.iter().map(|&(i, w)| w * plane[i]).sum();
    }
}

/// Resamples a `(C, height, width)` array into `(C, rows, cols)` polar
/// coordinates around `center` (pixels of `frame`). Values outside the
/// array read as zero.
pub fn polar_transform(
    sat: &Tensor,
    center: (f64, f64),
    cfg: &PolarConfig,
    frame: &ImageFrame,
) -> Result<Tensor> {
    if sat.ndim() != 3 {
        return Err(CoreError::Shape(format!(
            "polar_transform expects (C, H, W), got {:?}",
            sat.shape()
        )));
    }
    check_center(center)?;
    let (r_min, r_max) = radii_px(cfg, frame)?;
    let (c, h, w) = (sat.dim(0), sat.dim(1), sat.dim(2));
    let table = build_table(center, cfg, r_min, r_max, h, w);
    let plane_out = cfg.rows * cfg.cols;
    let mut out = vec![0.0; c * plane_out];
    for ch in 0..c {
        apply_table(
            &table,
            &sat.data()[ch * h * w..(ch + 1) * h * w],
            &mut out[ch * plane_out..(ch + 1) * plane_out],
        );
    }
    Ok(Tensor::from_parts(vec![c, cfg.rows, cfg.cols], out))
}

/// Differentiable polar resampling of one `(C, height, width)` feature map
/// around several centres, giving `(P, C, rows, cols)`.
pub fn polar_transform_var<'t>(
    sat: Var<'t>,
    centers: &[(f64, f64)],
    cfg: &PolarConfig,
    frame: &ImageFrame,
) -> Result<Var<'t>> {
    let value = sat.value();
    if value.ndim() != 3 {
        return Err(CoreError::Shape(format!(
            "polar_transform expects (C, H, W), got {:?}",
            value.shape()
        )));
    }
    for &c in centers {
        check_center(c)?;
    }
    let (r_min, r_max) = radii_px(cfg, frame)?;
    let (c, h, w) = (value.dim(0), value.dim(1), value.dim(2));
    let tables: Rc<Vec<SampleTable>> = Rc::new(
        centers
            .iter()
            .map(|&ctr| build_table(ctr, cfg, r_min, r_max, h, w))
            .collect(),
    );
    let plane_in = h * w;
    let plane_out = cfg.rows * cfg.cols;
    let mut out = vec![0.0; centers.len() * c * plane_out];
    for (p, table) in tables.iter().enumerate() {
        for ch in 0..c {
            let o = (p * c + ch) * plane_out;
            apply_table(
                table,
                &value.data()[ch * plane_in..(ch + 1) * plane_in],
                &mut out[o..o + plane_out],
            );
        }
    }
    let shape = vec![centers.len(), c, cfg.rows, cfg.cols];
    let in_shape = value.shape().to_vec();
    Ok(sat
        .tape()
        .op(Tensor::from_parts(shape, out), &[sat], move |g, _| {
            let mut dx = vec![0.0; c * plane_in];
            let gd = g.data();
            for (p, table) in tables.iter().enumerate() {
                for ch in 0..c {
                    let go = &gd[(p * c + ch) * plane_out..(p * c + ch + 1) * plane_out];
                    let plane = &mut dx[ch * plane_in..(ch + 1) * plane_in];
                    for (&gv, taps) in go.iter().zip(table.taps.chunks_exact(4)) {
                        for &(i, wt) in taps {
                            plane[i] += wt * gv;
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
        }))
}

/// Column shift `theta / 2pi * width`, which must be integral within 1e-6.
pub fn azimuth_shift(theta: f64, width: usize) -> Result<usize> {
    let s = theta / TAU * width as f64;
    let r = s.round();
    if !s.is_finite() || (s - r).abs() > 1e-6 {
        return Err(CoreError::NonIntegralShift {
            theta,
            width,
            shift: s,
        });
    }
    Ok((r as i64).rem_euclid(width as i64) as usize)
}

/// Nearest yaw that is a whole number of columns of a `width`-column map.
pub fn snap_to_column(theta: f64, width: usize) -> f64 {
    let step = TAU / width as f64;
    wrap_angle((theta / step).round() * step)
}

/// Source column of each output column after shifting by `theta` and
/// centre-cropping `width` columns down to `crop`.
pub fn shift_crop_columns(width: usize, crop: usize, theta: f64) -> Result<Vec<usize>> {
    if crop > width {
        return Err(CoreError::Shape(format!("crop {crop} wider than {width}")));
    }
    let shift = azimuth_shift(theta, width)?;
    let start = (width - crop) / 2;
    Ok((0..crop).map(|j| (start + shift + j) % width).collect())
}

/// Shifts the columns of a `(C, width)` array by `theta` and centre-crops to
/// `crop` columns.
pub fn cyclic_shift_crop(cols: &Tensor, theta: f64, crop: usize) -> Result<Tensor> {
    if cols.ndim() != 2 {
        return Err(CoreError::Shape(format!(
            "cyclic_shift_crop expects (C, W), got {:?}",
            cols.shape()
        )));
    }
    let (c, w) = (cols.dim(0), cols.dim(1));
    let map = shift_crop_columns(w, crop, theta)?;
    let mut out = Vec::with_capacity(c * crop);
    for ch in 0..c {
        out.extend(map.iter().map(|&src| cols.data()[ch * w + src]));
    }
    Ok(Tensor::from_parts(vec![c, crop], out))
}

/// Largest divisor of `n` not exceeding `request` (at least 1).
pub fn largest_divisor_at_most(n: usize, request: usize) -> usize {
    (1..=request.min(n)).rev().find(|d| n % d == 0).unwrap_or(1)
}

/// Candidate poses: a cell-centred `G x G` lattice of positions times a
/// uniform set of yaws covering `[-pi, pi)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseGrid {
    pub extent: f64,
    /// Cell-centre coordinates along each axis, ascending.
    pub coords: Vec<f64>,
    pub thetas: Vec<f64>,
    /// Distance between neighbouring positions, metres.
    pub stride: f64,
    /// Column width of the azimuth maps the yaws are aligned to.
    pub azimuth_cols: usize,
}

impl PoseGrid {
    pub fn side(&self) -> usize {
        self.coords.len()
    }

    pub fn n_theta(&self) -> usize {
        self.thetas.len()
    }

    pub fn n_positions(&self) -> usize {
        self.coords.len() * self.coords.len()
    }

    pub fn len(&self) -> usize {
        self.n_positions() * self.n_theta()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positions in flat order: x index major, y index minor.
    pub fn positions(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.n_positions());
        for &x in &self.coords {
            for &y in &self.coords {
                out.push((x, y));
            }
        }
        out
    }

    pub fn flat_index(&self, position: usize, orientation: usize) -> usize {
        position * self.n_theta() + orientation
    }

    /// `(position index, orientation index)` of a flat candidate index.
    pub fn split_index(&self, flat: usize) -> (usize, usize) {
        (flat / self.n_theta(), flat % self.n_theta())
    }

    pub fn candidate(&self, flat: usize) -> Pose {
        let (p, k) = self.split_index(flat);
        let g = self.side();
        Pose::new(self.coords[p / g], self.coords[p % g], self.thetas[k])
    }

    fn nearest_coord(&self, v: f64) -> usize {
        let mut best = 0;
        for (i, &c) in self.coords.iter().enumerate() {
            if (c - v).abs() < (self.coords[best] - v).abs() {
                best = i;
            }
        }
        best
    }

    /// Flat index of the candidate closest to `pose` (position by axis,
    /// yaw by wrapped angular distance).
    pub fn nearest(&self, pose: &Pose) -> usize {
        let g = self.side();
        let p = self.nearest_coord(pose.x()) * g + self.nearest_coord(pose.y());
        let mut best = 0;
        for (k, &t) in self.thetas.iter().enumerate() {
            if wrap_angle(t - pose.theta()).abs() < wrap_angle(self.thetas[best] - pose.theta()).abs() {
                best = k;
            }
        }
        self.flat_index(p, best)
    }
}

/// Builds the candidate grid over a square `extent` centred in `frame`.
///
/// The yaw count is lowered to the largest divisor of the polar width not
/// above `n_theta`; every yaw is then a whole-column shift.
pub fn make_pose_grid(
    extent: f64,
    side: usize,
    n_theta: usize,
    frame: &ImageFrame,
    cfg: &PolarConfig,
) -> Result<PoseGrid> {
    if side == 0 || n_theta == 0 {
        return Err(CoreError::Config("grid needs at least one position and yaw".into()));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(CoreError::Config(format!("search extent must be > 0, got {extent}")));
    }
    let (cw, ch) = frame.coverage_m();
    let limit = cw.min(ch) - 2.0 * cfg.r_max;
    if extent > limit + 1e-9 {
        return Err(CoreError::Config(format!(
            "search extent {extent} m exceeds satellite coverage {:.3} m minus 2*r_max",
            cw.min(ch)
        )));
    }
    if cfg.cols % 2 != 0 {
        return Err(CoreError::Config(format!(
            "polar width {} must be even for a yaw of -pi to be a whole-column shift",
            cfg.cols
        )));
    }
    let n = largest_divisor_at_most(cfg.cols, n_theta);
    let stride = extent / side as f64;
    let coords = (0..side)
        .map(|i| -extent / 2.0 + (i as f64 + 0.5) * stride)
        .collect();
    let step = cfg.cols / n;
    let thetas = (0..n)
        .map(|k| -PI + TAU * (k * step) as f64 / cfg.cols as f64)
        .collect();
    Ok(PoseGrid {
        extent,
        coords,
        thetas,
        stride,
        azimuth_cols: cfg.cols,
    })
}
