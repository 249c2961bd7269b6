//! PNG renderings of attention weights, reconstructions and pose estimates.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use vird_core::model::{batch_of_one, Model};
use vird_core::reconstruction::{align_satellite_descriptor, ReconWeights, Reconstructions};
use vird_core::geometry::snap_to_column;
use vird_core::{Pose, PoseGrid, Tape, Tensor};

use crate::data::Prepared;
use crate::error::{io_err, ExperimentError, Result};

/// Linear map of `values` onto `0..=255`, with the range it used. A
/// constant array maps to zeros.
pub fn normalize_u8(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let px = values
        .iter()
        .map(|v| if span > 0.0 { ((v - min) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    (px, min, max)
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: bool, data: &[u8], text: &[(&str, String)]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(if rgb { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    enc.set_depth(png::BitDepth::Eight);
    let err = |e| ExperimentError::Png(path.to_path_buf(), e);
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.clone()).map_err(err)?;
    }
    let mut w = enc.write_header().map_err(err)?;
    w.write_image_data(data).map_err(err)?;
    w.finish().map_err(err)
}

/// Interleaved 8-bit RGB of a `(3, H, W)` tensor in `[0, 1]`.
pub fn rgb_bytes(t: &Tensor) -> Vec<u8> {
    let (h, w) = (t.dim(1), t.dim(2));
    let mut out = Vec::with_capacity(3 * h * w);
    for v in 0..h {
        for u in 0..w {
            for c in 0..3 {
                out.push((t.at(&[c, v, u]).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Attention heatmap for shared-axis row `q`: the satellite weights, the
/// positional ground weights and the context-enhanced ground weights,
/// stacked top to bottom, each `H_K` rows by `W` azimuth columns.
pub fn attention_panels(a_s2p: &Tensor, a_g: &Tensor, a_enh: Option<&Tensor>, q: usize, width: usize) -> Vec<f64> {
    let hk = a_g.dim(1);
    let mut out = Vec::with_capacity(3 * hk * width);
    for k in 0..hk {
        out.extend(std::iter::repeat_n(a_s2p.at(&[q, k]), width));
    }
    for k in 0..hk {
        out.extend(std::iter::repeat_n(a_g.at(&[q, k]), width));
    }
    for k in 0..hk {
        for w in 0..width {
            out.push(match a_enh {
                Some(e) => e.at(&[0, q, k, w]),
                None => a_g.at(&[q, k]),
            });
        }
    }
    out
}

fn draw_arrow(img: &mut [u8], size: usize, from: (f64, f64), dir: (f64, f64), len: f64, color: [u8; 3]) {
    let mut put = |u: f64, v: f64| {
        let (u, v) = (u.round(), v.round());
        if u >= 0.0 && v >= 0.0 && (u as usize) < size && (v as usize) < size {
            let i = 3 * (v as usize * size + u as usize);
            img[i..i + 3].copy_from_slice(&color);
        }
    };
    let steps = (len * 2.0).ceil() as usize;
    for s in 0..=steps {
        let t = len * s as f64 / steps as f64;
        put(from.0 + t * dir.0, from.1 + t * dir.1);
    }
    // head: two short strokes back from the tip
    let tip = (from.0 + len * dir.0, from.1 + len * dir.1);
    for side in [-1.0, 1.0] {
        let (c, s) = (0.5f64.cos(), side * 0.5f64.sin());
        let back = (-(dir.0 * c - dir.1 * s), -(dir.0 * s + dir.1 * c));
        for k in 0..=(len / 3.0).ceil() as usize {
            put(tip.0 + k as f64 * back.0, tip.1 + k as f64 * back.1);
        }
    }
    for du in -1..=1 {
        for dv in -1..=1 {
            put(from.0 + du as f64, from.1 + dv as f64);
        }
    }
}

/// Satellite image scaled by `scale` with the search region outlined and
/// arrows for each `(pose, colour)`.
pub fn pose_overlay(model: &Model, sat: &Tensor, poses: &[(Pose, [u8; 3])], scale: usize) -> (Vec<u8>, usize) {
    let a = sat.dim(1);
    let size = a * scale;
    let base = rgb_bytes(sat);
    let mut img = vec![0u8; 3 * size * size];
    for v in 0..size {
        for u in 0..size {
            let src = 3 * ((v / scale) * a + u / scale);
            let dst = 3 * (v * size + u);
            img[dst..dst + 3].copy_from_slice(&base[src..src + 3]);
        }
    }
    let frame = &model.sat_frame;
    let half = model.config.search_extent / 2.0;
    let to_px = |x: f64, y: f64| {
        let (u, v) = frame.world_to_pixel(x, y);
        ((u + 0.5) * scale as f64 - 0.5, (v + 0.5) * scale as f64 - 0.5)
    };
    let corners = [(-half, -half), (half, -half), (half, half), (-half, half), (-half, -half)];
    for w in corners.windows(2) {
        let (p, q) = (to_px(w[0].0, w[0].1), to_px(w[1].0, w[1].1));
        let len = (q.0 - p.0).hypot(q.1 - p.1);
        draw_arrow(&mut img, size, p, ((q.0 - p.0) / len, (q.1 - p.1) / len), len, [255, 220, 0]);
    }
    for (pose, color) in poses {
        let from = to_px(pose.x(), pose.y());
        // clockwise yaw: +theta turns east towards south, i.e. down the image
        let dir = (pose.theta().cos(), pose.theta().sin());
        draw_arrow(&mut img, size, from, dir, 6.0 * scale as f64, *color);
    }
    (img, size)
}

/// Shared-axis rows shown by default: first, middle and last.
pub fn default_rows(h_q: usize) -> Vec<usize> {
    let mut rows = vec![0, h_q / 2, h_q.saturating_sub(1)];
    rows.dedup();
    rows
}

/// Writes `<id>_attn_<row>.png` (when the model has attention),
/// `<id>_recon_<i2j>.png` for the four decoders and `<id>_pose.png`.
pub fn emit_visualizations(
    model: &Model,
    sample: &Prepared,
    grid: &PoseGrid,
    refine: bool,
    rows: &[usize],
    outdir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(outdir).map_err(io_err(outdir))?;
    let mut written = Vec::new();
    let tape = Tape::inference();
    let p = model.store.bind(&tape, false);
    let ground = model.ground(&tape, &p, tape.constant(batch_of_one(&sample.grd)?))?;
    let d_g = ground.descriptor;
    let feats = model.satellite_features(&p, tape.constant(batch_of_one(&sample.sat)?))?;
    let fs = feats.shape();
    let sat = model.satellite_descriptors(&tape, &p, feats.reshape(&fs[1..]), &[(sample.pose.x(), sample.pose.y())])?;

    if let (Some(ga), Some(sa)) = (&ground.attention, &sat.attention) {
        let a_g = ga.positional.value();
        let a_s = sa.positional.value();
        let enh = ga.enhanced.map(|e| e.value());
        let width = model.ground_cols();
        for &q in rows {
            if q >= model.cepa.h_q {
                return Err(ExperimentError::Config(format!(
                    "attention row {q} outside the {}-row shared axis",
                    model.cepa.h_q
                )));
            }
            let values = attention_panels(&a_s, &a_g, enh.as_deref(), q, width);
            let (px, min, max) = normalize_u8(&values);
            let path = outdir.join(format!("{}_attn_{q}.png", sample.id));
            write_png(&path, width, values.len() / width, false, &px, &[("min", format!("{min:e}")), ("max", format!("{max:e}"))])?;
            written.push(path);
        }
    }

    let theta = snap_to_column(sample.pose.theta(), model.sat_cols());
    let d_s = align_satellite_descriptor(sat.descriptor, theta, model.ground_cols(), model.block())?;
    let all = ReconWeights { alpha1: 1.0, alpha2: 1.0 };
    let rec = Reconstructions::decode(&p, &model.decoders, d_g, d_s, &all)?;
    for (name, out, target) in [
        ("g2g", rec.g2g, &sample.grd),
        ("s2s", rec.s2s, &sample.sat_polar),
        ("g2s", rec.g2s, &sample.sat_polar),
        ("s2g", rec.s2g, &sample.grd),
    ] {
        let out = out.expect("all decoders enabled").value();
        let img = Tensor::stack(&[target.clone(), out.index0(0)])?;
        let (h, w) = (target.dim(1), target.dim(2));
        let stacked = img.reshape(&[2, 3, h, w])?;
        let mut bytes = rgb_bytes(&stacked.index0(0));
        bytes.extend(rgb_bytes(&stacked.index0(1)));
        let path = outdir.join(format!("{}_recon_{name}.png", sample.id));
        write_png(&path, w, 2 * h, true, &bytes, &[])?;
        written.push(path);
    }

    let inf = model.infer(&sample.sat, &sample.grd, grid, refine)?;
    let (img, size) = pose_overlay(model, &sample.sat, &[(sample.pose, [0, 255, 0]), (inf.refined, [255, 0, 0])], 4);
    let path = outdir.join(format!("{}_pose.png", sample.id));
    write_png(
        &path,
        size,
        size,
        true,
        &img,
        &[
            ("gt", format!("{:.4} {:.4} {:.4}", sample.pose.x(), sample.pose.y(), sample.pose.theta())),
            ("pred", format!("{:.4} {:.4} {:.4}", inf.refined.x(), inf.refined.y(), inf.refined.theta())),
        ],
    )?;
    written.push(path);
    Ok(written)
}
