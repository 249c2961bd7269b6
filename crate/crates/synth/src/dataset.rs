//! Paired samples and their on-disk layout.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vird_core::{ImageFrame, Pose, Tensor};

use crate::error::{Result, SynthError};
use crate::render::{from_rgb8, render_ground, render_satellite, to_rgb8, RenderParams};
use crate::scene::{generate_scene, SceneParams, SceneSpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    pub scene: SceneParams,
    pub render: RenderParams,
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.render.validate()?;
        let frame = self.render.sat_frame()?;
        let (cov, _) = frame.coverage_m();
        if cov + 1e-9 < self.scene.extent {
            return Err(SynthError::Invalid(format!(
                "satellite covers {cov} m but the world is {} m wide",
                self.scene.extent
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub sat: RgbImage,
    pub grd: RgbImage,
    pub pose: Pose,
    pub frame: ImageFrame,
}

impl SamplePair {
    pub fn sat_tensor(&self) -> Tensor {
        from_rgb8(&self.sat)
    }

    pub fn grd_tensor(&self) -> Tensor {
        from_rgb8(&self.grd)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub count: usize,
    pub params: GenParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<SamplePair>,
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

/// Generator for sample `index`: the master seed picks the key, the index
/// picks the stream.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Scene and pose of one sample; infeasible scenes are redrawn from the
/// same stream.
pub fn generate_sample_scene(seed: u64, index: usize, params: &GenParams) -> Result<(SceneSpec, Pose)> {
    let mut rng = sample_rng(seed, index);
    let mut last = None;
    for _ in 0..20 {
        let scene = generate_scene(&mut rng, &params.scene)?;
        match scene.sample_camera(&mut rng) {
            Ok(pose) => return Ok((scene, pose)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| SynthError::Infeasible("no scene attempts".into())))
}

pub fn generate_sample(seed: u64, index: usize, params: &GenParams) -> Result<SamplePair> {
    let (scene, pose) = generate_sample_scene(seed, index, params)?;
    let frame = params.render.sat_frame()?;
    let sat = render_satellite(&scene, &frame);
    let grd = render_ground(&scene, &pose, &params.render)?;
    Ok(SamplePair {
        id: sample_id(index),
        sat: to_rgb8(&sat),
        grd: to_rgb8(&grd),
        pose,
        frame,
    })
}

/// Samples `0..count`, generated in parallel; the result does not depend on
/// the number of workers.
pub fn generate_dataset(seed: u64, count: usize, params: &GenParams) -> Result<Dataset> {
    params.validate()?;
    let samples = (0..count)
        .into_par_iter()
        .map(|i| generate_sample(seed, i, params))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: Manifest {
            format_version: FORMAT_VERSION,
            seed,
            count,
            params: params.clone(),
        },
        samples,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseRow {
    id: String,
    x_m: f64,
    y_m: f64,
    theta_rad: f64,
    res_m_per_px: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["sat", "grd"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let manifest = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&ds.manifest).map_err(|e| SynthError::Invalid(e.to_string()))?;
    fs::write(&manifest, json).map_err(io_err(&manifest))?;
    let csv_path = dir.join("poses.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| SynthError::Csv(csv_path.clone(), e))?;
    for s in &ds.samples {
        w.serialize(PoseRow {
            id: s.id.clone(),
            x_m: s.pose.x(),
            y_m: s.pose.y(),
            theta_rad: s.pose.theta(),
            res_m_per_px: s.frame.resolution,
        })
        .map_err(|e| SynthError::Csv(csv_path.clone(), e))?;
    }
    w.flush().map_err(io_err(&csv_path))?;
    if ds.samples.is_empty() {
        // header only
        fs::write(&csv_path, "id,x_m,y_m,theta_rad,res_m_per_px\n").map_err(io_err(&csv_path))?;
    }
    ds.samples.par_iter().try_for_each(|s| {
        for (sub, img) in [("sat", &s.sat), ("grd", &s.grd)] {
            let p = image_path(dir, sub, &s.id);
            img.save(&p).map_err(|e| SynthError::Image {
                id: s.id.clone(),
                path: p.clone(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    })
}

pub fn image_path(dir: &Path, sub: &str, id: &str) -> PathBuf {
    dir.join(sub).join(format!("{id}.png"))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| SynthError::Corrupt(path.clone(), e.to_string()))?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(SynthError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| SynthError::Corrupt(path, e.to_string()))
}

fn load_image(dir: &Path, sub: &str, id: &str) -> Result<RgbImage> {
    let p = image_path(dir, sub, id);
    let img = image::open(&p).map_err(|e| SynthError::Image {
        id: id.to_string(),
        path: p.clone(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let csv_path = dir.join("poses.csv");
    let mut r = csv::Reader::from_path(&csv_path).map_err(|e| SynthError::Csv(csv_path.clone(), e))?;
    let headers = r.headers().map_err(|e| SynthError::Csv(csv_path.clone(), e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "x_m", "y_m", "theta_rad", "res_m_per_px"] {
        return Err(SynthError::Corrupt(csv_path, format!("unexpected header {headers:?}")));
    }
    let rows: Vec<PoseRow> = r
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| SynthError::Csv(csv_path.clone(), e))?;
    let size = manifest.params.render.sat_size;
    let samples = rows
        .into_par_iter()
        .map(|row| {
            let pose = Pose::try_new(row.x_m, row.y_m, row.theta_rad)
                .map_err(|e| SynthError::Corrupt(csv_path.clone(), format!("sample {}: {e}", row.id)))?;
            let frame = ImageFrame::new(row.res_m_per_px, size, size)
                .map_err(|e| SynthError::Corrupt(csv_path.clone(), format!("sample {}: {e}", row.id)))?;
            Ok(SamplePair {
                sat: load_image(dir, "sat", &row.id)?,
                grd: load_image(dir, "grd", &row.id)?,
                id: row.id,
                pose,
                frame,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if samples.len() != manifest.count {
        return Err(SynthError::Corrupt(
            dir.join("poses.csv"),
            format!("manifest lists {} samples, found {}", manifest.count, samples.len()),
        ));
    }
    Ok(Dataset { manifest, samples })
}
