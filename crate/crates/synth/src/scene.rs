//! Procedural top-down scenes: roads, box buildings and flat patches.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vird_core::geometry::wrap_angle;
use vird_core::Pose;

use crate::error::{Result, SynthError};

pub type Rgb = [f64; 3];

/// Base colours; every scene jitters its picks.
pub const PALETTE: [Rgb; 8] = [
    [0.45, 0.45, 0.47],
    [0.82, 0.78, 0.62],
    [0.30, 0.52, 0.25],
    [0.70, 0.30, 0.25],
    [0.25, 0.35, 0.65],
    [0.88, 0.85, 0.80],
    [0.55, 0.40, 0.25],
    [0.20, 0.20, 0.22],
];

pub const SKY: Rgb = [0.62, 0.78, 0.95];

/// Brightness of the west, east, south and north walls relative to the roof.
pub const FACE_SHADE: [f64; 4] = [0.85, 0.65, 0.75, 0.95];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    /// Side of the square world centred on the origin, metres.
    pub extent: f64,
    pub roads: usize,
    pub road_width: (f64, f64),
    pub buildings: usize,
    pub building_size: (f64, f64),
    pub building_height: (f64, f64),
    pub patches: usize,
    pub patch_size: (f64, f64),
    /// Cameras are placed within `+-camera_range` of the origin on both axes.
    pub camera_range: f64,
    pub camera_height: f64,
    pub color_jitter: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            extent: 32.0,
            roads: 2,
            road_width: (3.0, 5.0),
            buildings: 14,
            building_size: (2.5, 7.0),
            building_height: (3.0, 12.0),
            patches: 6,
            patch_size: (3.0, 9.0),
            camera_range: 7.5,
            camera_height: 1.6,
            color_jitter: 0.06,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let ranges = [self.road_width, self.building_size, self.building_height, self.patch_size];
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(SynthError::Invalid(format!("extent must be > 0, got {}", self.extent)));
        }
        if ranges.iter().any(|&(lo, hi)| !(lo > 0.0 && lo <= hi && hi.is_finite())) {
            return Err(SynthError::Invalid("size ranges need 0 < min <= max".into()));
        }
        if self.roads == 0 {
            return Err(SynthError::Invalid("a scene needs at least one road".into()));
        }
        if !(self.camera_range > 0.0 && self.camera_range <= self.extent / 2.0) {
            return Err(SynthError::Invalid(format!(
                "camera_range must lie in (0, extent/2], got {}",
                self.camera_range
            )));
        }
        if !(self.camera_height > 0.0 && self.camera_height < self.building_height.0) {
            return Err(SynthError::Invalid(
                "camera height must be positive and below the lowest roof".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.color_jitter) {
            return Err(SynthError::Invalid("color_jitter must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub points: Vec<(f64, f64)>,
    pub width: f64,
    pub color: Rgb,
}

impl Road {
    pub fn distance(&self, p: (f64, f64)) -> f64 {
        self.points
            .windows(2)
            .map(|s| segment_distance(p, s[0], s[1]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, p: (f64, f64)) -> bool {
        self.distance(p) <= self.width / 2.0
    }
}

/// Axis-aligned box standing on the ground.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub min: (f64, f64),
    pub max: (f64, f64),
    pub height: f64,
    pub roof: Rgb,
}

impl Building {
    pub fn contains(&self, p: (f64, f64)) -> bool {
        rect_contains(self.min, self.max, p)
    }

    /// Colour of wall `face` (0 west, 1 east, 2 south, 3 north).
    pub fn facade(&self, face: usize) -> Rgb {
        self.roof.map(|c| c * FACE_SHADE[face])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub min: (f64, f64),
    pub max: (f64, f64),
    pub color: Rgb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub extent: f64,
    pub ground: Rgb,
    pub roads: Vec<Road>,
    pub buildings: Vec<Building>,
    pub patches: Vec<Patch>,
    pub camera_height: f64,
    pub camera_range: f64,
}

impl SceneSpec {
    /// Colour of the ground plane (ignoring buildings) at `p`.
    pub fn ground_color(&self, p: (f64, f64)) -> Rgb {
        if let Some(r) = self.roads.iter().rev().find(|r| r.contains(p)) {
            return r.color;
        }
        if let Some(q) = self.patches.iter().rev().find(|q| rect_contains(q.min, q.max, p)) {
            return q.color;
        }
        self.ground
    }

    /// Colour seen from straight above.
    pub fn top_color(&self, p: (f64, f64)) -> Rgb {
        match self.buildings.iter().rev().find(|b| b.contains(p)) {
            Some(b) => b.roof,
            None => self.ground_color(p),
        }
    }

    pub fn on_road(&self, p: (f64, f64)) -> bool {
        self.roads.iter().any(|r| r.contains(p))
    }

    pub fn in_building(&self, p: (f64, f64)) -> bool {
        self.buildings.iter().any(|b| b.contains(p))
    }

    /// A valid camera spot: on a road, outside buildings, inside the range.
    pub fn valid_camera(&self, p: (f64, f64)) -> bool {
        p.0.abs() <= self.camera_range
            && p.1.abs() <= self.camera_range
            && self.on_road(p)
            && !self.in_building(p)
    }

    /// Rejection-samples a camera pose on a road inside the camera range.
    pub fn sample_camera(&self, rng: &mut ChaCha8Rng) -> Result<Pose> {
        let segments: Vec<(&Road, (f64, f64), (f64, f64))> = self
            .roads
            .iter()
            .flat_map(|r| r.points.windows(2).map(move |s| (r, s[0], s[1])))
            .collect();
        for _ in 0..2000 {
            let (road, a, b) = segments[rng.random_range(0..segments.len())];
            let t: f64 = rng.random_range(0.0..1.0);
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let len = dx.hypot(dy).max(1e-12);
            let off = rng.random_range(-0.3..0.3) * road.width;
            let p = (a.0 + t * dx - off * dy / len, a.1 + t * dy + off * dx / len);
            if self.valid_camera(p) {
                let theta = wrap_angle(rng.random_range(-PI..PI));
                return Ok(Pose::new(p.0, p.1, theta));
            }
        }
        Err(SynthError::Infeasible("no road point inside the camera range".into()))
    }
}

pub fn rect_contains(min: (f64, f64), max: (f64, f64), p: (f64, f64)) -> bool {
    p.0 >= min.0 && p.0 <= max.0 && p.1 >= min.1 && p.1 <= max.1
}

pub fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

fn segments_cross(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let cross = |o: (f64, f64), p: (f64, f64), q: (f64, f64)| (p.0 - o.0) * (q.1 - o.1) - (p.1 - o.1) * (q.0 - o.0);
    let (d1, d2) = (cross(c, d, a), cross(c, d, b));
    let (d3, d4) = (cross(a, b, c), cross(a, b, d));
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Distance between a segment and a filled rectangle.
pub fn segment_rect_distance(a: (f64, f64), b: (f64, f64), min: (f64, f64), max: (f64, f64)) -> f64 {
    if rect_contains(min, max, a) || rect_contains(min, max, b) {
        return 0.0;
    }
    let corners = [min, (max.0, min.1), max, (min.0, max.1)];
    for i in 0..4 {
        if segments_cross(a, b, corners[i], corners[(i + 1) % 4]) {
            return 0.0;
        }
    }
    let mut d = f64::INFINITY;
    for i in 0..4 {
        d = d
            .min(segment_distance(corners[i], a, b))
            .min(segment_distance(a, corners[i], corners[(i + 1) % 4]))
            .min(segment_distance(b, corners[i], corners[(i + 1) % 4]));
    }
    d
}

fn jittered(rng: &mut ChaCha8Rng, base: Rgb, jitter: f64) -> Rgb {
    base.map(|c| {
        let j = if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
        (c + j).clamp(0.0, 1.0)
    })
}

fn pick_color(rng: &mut ChaCha8Rng, jitter: f64, avoid: Option<usize>) -> (usize, Rgb) {
    loop {
        let i = rng.random_range(0..PALETTE.len());
        if Some(i) != avoid {
            return (i, jittered(rng, PALETTE[i], jitter));
        }
    }
}

fn range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Builds a scene. The first road always crosses the camera range.
pub fn generate_scene(rng: &mut ChaCha8Rng, params: &SceneParams) -> Result<SceneSpec> {
    params.validate()?;
    let half = params.extent / 2.0;
    let (ground_idx, ground) = pick_color(rng, params.color_jitter, None);
    let mut roads = Vec::with_capacity(params.roads);
    for i in 0..params.roads {
        let reach = if i == 0 { params.camera_range * 0.6 } else { half * 0.8 };
        let through = (rng.random_range(-reach..reach), rng.random_range(-reach..reach));
        let heading = rng.random_range(0.0..PI);
        let (c, s) = (heading.cos(), heading.sin());
        let len = params.extent;
        let mut points = vec![(through.0 - len * c, through.1 - len * s), through];
        // optional bend at the anchor point
        let bend = if rng.random_bool(0.5) { rng.random_range(-0.6..0.6) } else { 0.0 };
        let (c2, s2) = ((heading + bend).cos(), (heading + bend).sin());
        points.push((through.0 + len * c2, through.1 + len * s2));
        let (_, color) = pick_color(rng, params.color_jitter, Some(ground_idx));
        roads.push(Road {
            points,
            width: range(rng, params.road_width),
            color,
        });
    }
    let mut patches = Vec::with_capacity(params.patches);
    for _ in 0..params.patches {
        let (w, h) = (range(rng, params.patch_size), range(rng, params.patch_size));
        let min = (rng.random_range(-half..half - w.min(half)), rng.random_range(-half..half - h.min(half)));
        let (_, color) = pick_color(rng, params.color_jitter, Some(ground_idx));
        patches.push(Patch {
            min,
            max: (min.0 + w, min.1 + h),
            color,
        });
    }
    let mut buildings: Vec<Building> = Vec::with_capacity(params.buildings);
    let mut attempts = 0;
    while buildings.len() < params.buildings && attempts < 50 * params.buildings.max(1) {
        attempts += 1;
        let (w, h) = (range(rng, params.building_size), range(rng, params.building_size));
        if w >= params.extent || h >= params.extent {
            continue;
        }
        let min = (rng.random_range(-half..half - w), rng.random_range(-half..half - h));
        let max = (min.0 + w, min.1 + h);
        let clear_of_roads = roads.iter().all(|r| {
            r.points
                .windows(2)
                .all(|s| segment_rect_distance(s[0], s[1], min, max) > r.width / 2.0 + 0.5)
        });
        let clear_of_buildings = buildings.iter().all(|b| {
            max.0 + 1.0 < b.min.0 || b.max.0 + 1.0 < min.0 || max.1 + 1.0 < b.min.1 || b.max.1 + 1.0 < min.1
        });
        if clear_of_roads && clear_of_buildings {
            let (_, roof) = pick_color(rng, params.color_jitter, None);
            buildings.push(Building {
                min,
                max,
                height: range(rng, params.building_height),
                roof,
            });
        }
    }
    Ok(SceneSpec {
        extent: params.extent,
        ground,
        roads,
        buildings,
        patches,
        camera_height: params.camera_height,
        camera_range: params.camera_range,
    })
}
