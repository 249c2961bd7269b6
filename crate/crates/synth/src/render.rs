//! Orthographic satellite rasters and raycast cylindrical panoramas.

use std::f64::consts::TAU;

use image::{Rgb as Px, RgbImage};
use serde::{Deserialize, Serialize};
use vird_core::{ImageFrame, Pose, Tensor};

use crate::error::{Result, SynthError};
use crate::scene::{Rgb, SceneSpec, SKY};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderParams {
    pub sat_size: usize,
    pub sat_resolution: f64,
    pub pano_height: usize,
    pub pano_width: usize,
    pub hfov_deg: f64,
    /// Total vertical field of view, centred on the horizon.
    pub vfov_deg: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            sat_size: 64,
            sat_resolution: 0.5,
            pano_height: 32,
            pano_width: 128,
            hfov_deg: 360.0,
            vfov_deg: 90.0,
        }
    }
}

impl RenderParams {
    pub fn validate(&self) -> Result<()> {
        if self.sat_size == 0 || self.pano_height == 0 || self.pano_width == 0 {
            return Err(SynthError::Invalid("image sizes must be positive".into()));
        }
        if !(self.sat_resolution > 0.0) {
            return Err(SynthError::Invalid("sat_resolution must be > 0".into()));
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg <= 360.0) {
            return Err(SynthError::Invalid(format!("hfov_deg must lie in (0, 360], got {}", self.hfov_deg)));
        }
        if !(self.vfov_deg > 0.0 && self.vfov_deg < 180.0) {
            return Err(SynthError::Invalid(format!("vfov_deg must lie in (0, 180), got {}", self.vfov_deg)));
        }
        Ok(())
    }

    pub fn sat_frame(&self) -> Result<ImageFrame> {
        Ok(ImageFrame::new(self.sat_resolution, self.sat_size, self.sat_size)?)
    }

    pub fn full_circle(&self) -> bool {
        (self.hfov_deg - 360.0).abs() < 1e-9
    }

    /// Elevation of the centre of panorama row `r`, radians.
    pub fn elevation(&self, r: usize) -> f64 {
        let v = self.vfov_deg.to_radians();
        v / 2.0 - (r as f64 + 0.5) * v / self.pano_height as f64
    }

    /// Clockwise-from-east azimuth of panorama column `c` for yaw `theta`.
    pub fn azimuth(&self, theta: f64, c: usize) -> f64 {
        let w = self.pano_width as f64;
        if self.full_circle() {
            let offset = theta / TAU * w;
            let snapped = offset.round();
            let m = if (offset - snapped).abs() < 1e-9 {
                // whole-column yaws give bitwise-identical angles per column
                ((snapped as i64 + c as i64).rem_euclid(self.pano_width as i64)) as f64
            } else {
                offset + c as f64
            };
            TAU * m / w - std::f64::consts::PI
        } else {
            let h = self.hfov_deg.to_radians();
            theta - h / 2.0 + h * c as f64 / w
        }
    }
}

fn to_tensor(h: usize, w: usize, mut px: impl FnMut(usize, usize) -> Rgb) -> Tensor {
    let mut data = vec![0.0; 3 * h * w];
    for v in 0..h {
        for u in 0..w {
            let c = px(v, u);
            for ch in 0..3 {
                data[(ch * h + v) * w + u] = c[ch];
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("sized buffer")
}

/// Top-down raster sampled at pixel centres; buildings drawn over ground.
pub fn render_satellite(scene: &SceneSpec, frame: &ImageFrame) -> Tensor {
    to_tensor(frame.height_px, frame.width_px, |v, u| {
        scene.top_color(frame.pixel_to_world(u as f64, v as f64))
    })
}

/// First wall met along a ground-plane ray: distance, height and colour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WallHit {
    pub distance: f64,
    pub height: f64,
    pub color: Rgb,
}

/// Entry distance and face of a ray from `o` along `d` into a box.
pub fn ray_box(o: (f64, f64), d: (f64, f64), min: (f64, f64), max: (f64, f64)) -> Option<(f64, usize)> {
    let slab = |o: f64, d: f64, lo: f64, hi: f64, near_face: usize, far_face: usize| {
        if d.abs() < 1e-15 {
            if o < lo || o > hi {
                None
            } else {
                Some((f64::NEG_INFINITY, f64::INFINITY, near_face))
            }
        } else {
            let (t1, t2) = ((lo - o) / d, (hi - o) / d);
            if t1 < t2 {
                Some((t1, t2, near_face))
            } else {
                Some((t2, t1, far_face))
            }
        }
    };
    let (tx0, tx1, fx) = slab(o.0, d.0, min.0, max.0, 0, 1)?;
    let (ty0, ty1, fy) = slab(o.1, d.1, min.1, max.1, 2, 3)?;
    let (t_in, face) = if tx0 > ty0 { (tx0, fx) } else { (ty0, fy) };
    let t_out = tx1.min(ty1);
    (t_in <= t_out && t_in > 0.0).then_some((t_in, face))
}

/// All walls hit along azimuth `alpha`, nearest first.
pub fn wall_hits(scene: &SceneSpec, o: (f64, f64), alpha: f64) -> Vec<WallHit> {
    let d = (alpha.cos(), -alpha.sin());
    let mut hits: Vec<WallHit> = scene
        .buildings
        .iter()
        .filter_map(|b| {
            ray_box(o, d, b.min, b.max).map(|(t, face)| WallHit {
                distance: t,
                height: b.height,
                color: b.facade(face),
            })
        })
        .collect();
    hits.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    hits
}

/// Cylindrical panorama from `pose` at the scene's camera height.
pub fn render_ground(scene: &SceneSpec, pose: &Pose, params: &RenderParams) -> Result<Tensor> {
    params.validate()?;
    let o = (pose.x(), pose.y());
    if scene.in_building(o) {
        return Err(SynthError::Invalid(format!(
            "camera at ({:.3}, {:.3}) is inside a building",
            o.0, o.1
        )));
    }
    let h_cam = scene.camera_height;
    let (h, w) = (params.pano_height, params.pano_width);
    let tans: Vec<f64> = (0..h).map(|r| params.elevation(r).tan()).collect();
    let mut columns: Vec<Vec<Rgb>> = Vec::with_capacity(w);
    for c in 0..w {
        let alpha = params.azimuth(pose.theta(), c);
        let dir = (alpha.cos(), -alpha.sin());
        let hits = wall_hits(scene, o, alpha);
        let col = tans
            .iter()
            .map(|&t| {
                let ground_at = (t < 0.0).then(|| h_cam / -t);
                let wall = hits.iter().find(|hit| {
                    ground_at.is_none_or(|g| hit.distance < g) && h_cam + hit.distance * t <= hit.height
                });
                match (wall, ground_at) {
                    (Some(hit), _) => hit.color,
                    (None, Some(g)) => scene.ground_color((o.0 + g * dir.0, o.1 + g * dir.1)),
                    (None, None) => SKY,
                }
            })
            .collect();
        columns.push(col);
    }
    Ok(to_tensor(h, w, |v, u| columns[u][v]))
}

/// `(3, H, W)` in `[0, 1]` to an 8-bit image.
pub fn to_rgb8(t: &Tensor) -> RgbImage {
    let (h, w) = (t.dim(1), t.dim(2));
    RgbImage::from_fn(w as u32, h as u32, |u, v| {
        let q = |ch: usize| (t.at(&[ch, v as usize, u as usize]).clamp(0.0, 1.0) * 255.0).round() as u8;
        Px([q(0), q(1), q(2)])
    })
}

/// 8-bit image to `(3, H, W)` in `[0, 1]`.
pub fn from_rgb8(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    to_tensor(h, w, |v, u| {
        let p = img.get_pixel(u as u32, v as u32).0;
        p.map(|x| x as f64 / 255.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Building, Road};

    fn empty_scene() -> SceneSpec {
        SceneSpec {
            extent: 32.0,
            ground: [0.3, 0.5, 0.2],
            roads: vec![],
            buildings: vec![],
            patches: vec![],
            camera_height: 1.6,
            camera_range: 8.0,
        }
    }

    #[test]
    fn empty_scene_renders_ground_and_sky() {
        let s = empty_scene();
        let p = RenderParams::default();
        let sat = render_satellite(&s, &p.sat_frame().unwrap());
        for ch in 0..3 {
            for i in 0..64 * 64 {
                assert_eq!(sat.data()[ch * 4096 + i], s.ground[ch]);
            }
        }
        let g = render_ground(&s, &Pose::new(0.0, 0.0, 0.3), &p).unwrap();
        for c in 0..128 {
            for r in 0..32 {
                let expect = if r < 16 { SKY } else { s.ground };
                for ch in 0..3 {
                    assert_eq!(g.at(&[ch, r, c]), expect[ch]);
                }
            }
        }
    }

    #[test]
    fn east_wall_appears_at_zero_azimuth() {
        let mut s = empty_scene();
        s.buildings.push(Building {
            min: (5.0, -0.5),
            max: (6.0, 0.5),
            height: 10.0,
            roof: [1.0, 0.0, 0.0],
        });
        let p = RenderParams::default();
        let g = render_ground(&s, &Pose::new(0.0, 0.0, 0.0), &p).unwrap();
        let c = (0..128).find(|&c| p.azimuth(0.0, c) == 0.0).unwrap();
        assert_eq!(c, 64);
        // analytic intersection: the ray along +x hits the west face at x = 5,
        // whose top subtends atan((10 - 1.6) / 5) above the horizon
        let top = ((10.0 - 1.6f64) / 5.0).atan();
        for r in 0..32 {
            let el = p.elevation(r);
            let wall = el <= top && 1.6 + 5.0 * el.tan() >= 0.0 && el > -(1.6f64 / 5.0).atan();
            let is_facade = g.at(&[0, r, c]) == 0.85 && g.at(&[1, r, c]) == 0.0;
            assert_eq!(is_facade, wall, "row {r}");
        }
        // the opposite direction sees no wall
        assert!((0..32).all(|r| g.at(&[0, r, 0]) != 0.85));
    }

    #[test]
    fn yaw_rotation_shifts_columns_exactly() {
        let mut s = empty_scene();
        s.buildings.push(Building {
            min: (2.0, 3.0),
            max: (5.0, 7.0),
            height: 6.0,
            roof: [0.9, 0.2, 0.4],
        });
        s.roads.push(Road {
            points: vec![(-20.0, -1.0), (20.0, 1.0)],
            width: 4.0,
            color: [0.4, 0.4, 0.4],
        });
        let p = RenderParams::default();
        let base = render_ground(&s, &Pose::new(0.5, -0.3, 0.0), &p).unwrap();
        for k in [1usize, 5, 64, 127] {
            let theta = TAU * k as f64 / 128.0;
            let rot = render_ground(&s, &Pose::new(0.5, -0.3, theta), &p).unwrap();
            for ch in 0..3 {
                for r in 0..32 {
                    for c in 0..128 {
                        assert_eq!(rot.at(&[ch, r, c]), base.at(&[ch, r, (c + k) % 128]));
                    }
                }
            }
        }
    }

    #[test]
    fn camera_inside_building_is_an_error() {
        let mut s = empty_scene();
        s.buildings.push(Building {
            min: (-1.0, -1.0),
            max: (1.0, 1.0),
            height: 5.0,
            roof: [0.5; 3],
        });
        assert!(render_ground(&s, &Pose::new(0.0, 0.0, 0.0), &RenderParams::default()).is_err());
    }

    #[test]
    fn rgb8_round_trip() {
        let t = Tensor::from_fn(&[3, 4, 5], |i| (i % 256) as f64 / 255.0);
        assert_eq!(from_rgb8(&to_rgb8(&t)), t);
    }
}
