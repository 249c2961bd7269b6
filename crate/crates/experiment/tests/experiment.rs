use std::fs;
use std::io::BufReader;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vird_core::model::Model;
use vird_core::{Pose, Tape};
use vird_experiment::checkpoint::{load_checkpoint, read_manifest, save_checkpoint, BLOB_FILE};
use vird_experiment::eval::{evaluate, lateral_longitudinal, write_report, PER_SAMPLE_FILE, REPORT_FILE};
use vird_experiment::train::LOSS_LOG;
use vird_experiment::viz::{attention_panels, default_rows, emit_visualizations, normalize_u8};
use vird_experiment::{prepare, total_loss, train_prepared, ExperimentError, GridSettings, Prepared, TrainConfig};
use vird_synth::{generate_dataset, GenParams};

fn samples(seed: u64, n: usize, model: &Model) -> Vec<Prepared> {
    let ds = generate_dataset(seed, n, &GenParams::default()).unwrap();
    prepare(model, &ds).unwrap()
}

fn loss_of(cfg: &TrainConfig, model: &Model, batch: &[Prepared]) -> vird_experiment::LossValues {
    let tape = Tape::new();
    let p = model.store.bind(&tape, true);
    let grid = model.pose_grid(cfg.train_grid.side, cfg.train_grid.n_theta).unwrap();
    let refs: Vec<&Prepared> = batch.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    total_loss(model, &tape, &p, &refs, &grid, cfg, &mut rng).unwrap().values()
}

#[test]
fn loss_components_compose_additively() {
    let cfg = TrainConfig::default();
    let mut model = Model::new(&cfg.model_config(), 3).unwrap();
    // a non-zero regression output
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.name(id).starts_with("reg.head.1") {
            let t = model.store.get_mut(id);
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * ((i % 7) as f64 - 3.0));
        }
    }
    let batch = samples(4, 3, &model);
    let full = loss_of(&cfg, &model, &batch);
    assert!(full.total >= 0.0 && full.recon >= 0.0 && full.matching >= 0.0 && full.regression > 0.0);
    assert!((full.recon + full.matching + full.regression - full.total).abs() <= 1e-6);
    assert!((cfg.loss.alpha1 * full.origin + cfg.loss.alpha2 * full.cross - full.recon).abs() <= 1e-6);

    let with = |names: &[&str]| {
        let mut c = cfg.clone();
        for n in names {
            c.ablate.disable(n).unwrap();
        }
        loss_of(&c, &model, &batch)
    };
    let no_reg = with(&["regression"]);
    assert_eq!(no_reg.regression, 0.0);
    assert!((full.total - full.regression - no_reg.total).abs() <= 1e-6);
    let no_origin = with(&["recon-origin"]);
    assert!((full.total - cfg.loss.alpha1 * full.origin - no_origin.total).abs() <= 1e-6);
    let no_cross = with(&["recon-cross"]);
    assert!((full.total - cfg.loss.alpha2 * full.cross - no_cross.total).abs() <= 1e-6);
    let only_match = with(&["regression", "recon-origin", "recon-cross"]);
    assert_eq!(only_match.total, only_match.matching);
    assert_eq!((only_match.recon, only_match.regression), (0.0, 0.0));
    assert!((only_match.matching - full.matching).abs() <= 1e-9);
}

#[test]
fn every_ablation_combination_runs() {
    let base = TrainConfig::default();
    let names = ["cepa", "ce", "recon-origin", "recon-cross", "regression"];
    let data = samples(5, 1, &Model::new(&base.model_config(), 0).unwrap());
    for mask in 0..32u32 {
        let mut cfg = base.clone();
        for (i, n) in names.iter().enumerate() {
            if mask & (1 << i) != 0 {
                cfg.ablate.disable(n).unwrap();
            }
        }
        let model = Model::new(&cfg.model_config(), 0).unwrap();
        let v = loss_of(&cfg, &model, &data);
        assert!(v.is_finite() && v.total >= 0.0, "mask {mask:05b}: {v:?}");
    }
}

#[test]
fn zero_epochs_writes_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let model = Model::new(&cfg.model_config(), cfg.seed).unwrap();
    let data = samples(1, 2, &model);
    let out = train_prepared(&cfg, model.clone(), &data, dir.path()).unwrap();
    assert!(out.history.is_empty());
    let log = fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap();
    assert_eq!(log, "epoch,step,L_total,L_recon,L_match,L_reg\n");
    let (loaded, manifest) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(manifest.epoch, 0);
    assert_eq!(loaded.store.values(), model.store.values());
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig {
        epochs: 1,
        seed: 4,
        ..Default::default()
    };
    let model = Model::new(&cfg.model_config(), cfg.seed).unwrap();
    let data = samples(2, 6, &model);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let out = pool.install(|| train_prepared(&cfg, model.clone(), &data, dir.path()).unwrap());
        let log = fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap();
        (out.model.store.values().to_vec(), log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(la.lines().count(), 1 + 2);
    assert_ne!(a, model.store.values());
}

#[test]
fn training_loss_falls_within_five_epochs() {
    let cfg = TrainConfig {
        epochs: 6,
        ..Default::default()
    };
    let model = Model::new(&cfg.model_config(), cfg.seed).unwrap();
    let data = samples(6, 32, &model);
    let dir = tempfile::tempdir().unwrap();
    let out = train_prepared(&cfg, model, &data, dir.path()).unwrap();
    let means = out.epoch_means(|v| v.total);
    assert!(means[5] < means[0], "{means:?}");
    assert_eq!(read_manifest(dir.path()).unwrap().epoch, 6);
}

#[test]
fn divergence_keeps_the_last_checkpoint() {
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        ..Default::default()
    };
    let model = Model::new(&cfg.model_config(), cfg.seed).unwrap();
    let mut data = samples(7, 2, &model);
    data[1].grd.data_mut()[5] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    match train_prepared(&cfg, model.clone(), &data, dir.path()) {
        Err(ExperimentError::Diverged { epoch: 0, step: 0, .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history.len())),
    }
    let (loaded, manifest) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(manifest.epoch, 0);
    assert_eq!(loaded.store.values(), model.store.values());
}

#[test]
fn checkpoint_round_trip_reproduces_the_report() {
    let cfg = TrainConfig::default();
    let mut model = Model::new(&cfg.model_config(), 9).unwrap();
    // make the regression head active
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.name(id).starts_with("reg.head.1") {
            model.store.get_mut(id).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.02 * ((i % 5) as f64 - 2.0));
        }
    }
    let data = samples(8, 4, &model);
    let grid = GridSettings { side: 4, n_theta: 8 };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let before = model.store.values().to_vec();
    let (a, _) = pool.install(|| evaluate(&model, &data, grid, true).unwrap());
    assert_eq!(model.store.values(), before.as_slice());

    let dir = tempfile::tempdir().unwrap();
    let mut cfg9 = cfg.clone();
    cfg9.seed = 9;
    save_checkpoint(&model, &cfg9, 3, dir.path()).unwrap();
    let (loaded, manifest) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(manifest.epoch, 3);
    let (b, _) = pool.install(|| evaluate(&loaded, &data, grid, true).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.runtime.candidates_per_sample, 4 * 4 * 8);
    assert!(a.per_sample.iter().any(|r| r.pred != r.coarse));

    // identical reports on disk
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (_, t) = evaluate(&loaded, &data, grid, true).unwrap();
    write_report(&a, &t, d1.path()).unwrap();
    write_report(&b, &t, d2.path()).unwrap();
    assert_eq!(
        fs::read(d1.path().join(REPORT_FILE)).unwrap(),
        fs::read(d2.path().join(REPORT_FILE)).unwrap()
    );
    let csv = fs::read_to_string(d1.path().join(PER_SAMPLE_FILE)).unwrap();
    assert!(csv.starts_with("id,gt_x_m,gt_y_m,gt_theta_deg,pred_x_m"));
    assert_eq!(csv.lines().count(), 5);

    // a truncated blob is refused
    let blob = dir.path().join(BLOB_FILE);
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}

#[test]
fn report_bounds_and_degenerate_grid() {
    let cfg = TrainConfig::default();
    let model = Model::new(&cfg.model_config(), 1).unwrap();
    let data = samples(10, 3, &model);
    let (r, _) = evaluate(&model, &data, GridSettings { side: 1, n_theta: 1 }, false).unwrap();
    for s in &r.per_sample {
        assert!((0.0..=180.0).contains(&s.errors.orientation_deg));
        assert_eq!(s.pred, s.coarse);
        assert_eq!((s.pred.x(), s.pred.y(), s.pred.theta()), (0.0, 0.0, -std::f64::consts::PI));
    }
    let a = r.summary;
    for v in [a.lateral_r1m, a.lateral_r5m, a.longitudinal_r1m, a.longitudinal_r5m, a.orientation_r1deg, a.orientation_r5deg] {
        assert!((0.0..=100.0).contains(&v));
    }
    assert!(evaluate(&model, &data, GridSettings { side: 0, n_theta: 4 }, false).is_err());
    assert!(evaluate(&model, &data, GridSettings { side: 2, n_theta: 0 }, false).is_err());
}

proptest! {
    #[test]
    fn heading_frame_matches_rotation_oracle(
        gx in -8.0..8.0f64, gy in -8.0..8.0f64, t in -3.14..3.14f64,
        px in -8.0..8.0f64, py in -8.0..8.0f64,
    ) {
        let gt = Pose::new(gx, gy, t);
        let (lat, lon) = lateral_longitudinal(&Pose::new(px, py, 0.0), &gt);
        // rotate the world error by the counter-clockwise heading angle -t
        let phi = -t;
        let (ex, ey) = (px - gx, py - gy);
        let r = [[phi.cos(), phi.sin()], [-phi.sin(), phi.cos()]];
        let along = r[0][0] * ex + r[0][1] * ey;
        let across = r[1][0] * ex + r[1][1] * ey;
        prop_assert!((lon - along).abs() < 1e-9);
        prop_assert!((lat - across).abs() < 1e-9);
        prop_assert!((lat.hypot(lon) - ex.hypot(ey)).abs() < 1e-9);
    }
}

fn png_gray(path: &std::path::Path) -> (Vec<u8>, Vec<(String, String)>, (u32, u32)) {
    let dec = png::Decoder::new(BufReader::new(fs::File::open(path).unwrap()));
    let mut reader = dec.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    let text = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|c| (c.keyword.clone(), c.text.clone()))
        .collect();
    (buf, text, (info.width, info.height))
}

#[test]
fn visualizations_have_fixed_names_and_exact_heatmaps() {
    let cfg = TrainConfig::default();
    let model = Model::new(&cfg.model_config(), 2).unwrap();
    let sample = samples(12, 1, &model).remove(0);
    let grid = model.pose_grid(3, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let rows = default_rows(model.cepa.h_q);
    assert_eq!(rows, vec![0, 8, 15]);
    let files = emit_visualizations(&model, &sample, &grid, true, &rows, dir.path()).unwrap();
    let id = &sample.id;
    let mut expect: Vec<String> = rows.iter().map(|r| format!("{id}_attn_{r}.png")).collect();
    expect.extend(["g2g", "s2s", "g2s", "s2g"].map(|k| format!("{id}_recon_{k}.png")));
    expect.push(format!("{id}_pose.png"));
    let names: Vec<String> = files.iter().map(|f| f.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, expect);
    for n in &expect {
        assert!(dir.path().join(n).exists());
    }

    // raw weights recomputed independently of the plotting code
    let tape = Tape::inference();
    let p = model.store.bind(&tape, false);
    let a_s = model.cepa.satellite_weights(&tape, &p).unwrap().value();
    let a_g = model.cepa.ground_weights(&tape, &p).unwrap().value();
    let grd = tape.constant(vird_core::model::batch_of_one(&sample.grd).unwrap());
    let f_g = model.ground_backbone.extract(&p, grd, model.ground_pad).unwrap();
    let enh = model.cepa.context_enhance(&p, tape.constant((*a_g).clone()), f_g).unwrap().value();
    let (hk, w) = (model.cepa.h_k, model.ground_cols());
    for &q in &rows {
        let (px, text, (width, height)) = png_gray(&dir.path().join(format!("{id}_attn_{q}.png")));
        assert_eq!((width as usize, height as usize), (w, 3 * hk));
        let mut raw = Vec::new();
        for k in 0..hk {
            raw.extend((0..w).map(|_| a_s.at(&[q, k])));
        }
        for k in 0..hk {
            raw.extend((0..w).map(|_| a_g.at(&[q, k])));
        }
        for k in 0..hk {
            raw.extend((0..w).map(|c| enh.at(&[0, q, k, c])));
        }
        assert_eq!(raw, attention_panels(&a_s, &a_g, Some(&enh), q, w));
        let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let oracle: Vec<u8> = raw.iter().map(|v| ((v - min) / (max - min) * 255.0).round() as u8).collect();
        assert_eq!(px, oracle);
        assert_eq!(normalize_u8(&raw).0, oracle);
        let get = |k: &str| text.iter().find(|(key, _)| key == k).unwrap().1.parse::<f64>().unwrap();
        assert_eq!((get("min"), get("max")), (min, max));
    }
}

#[test]
fn unwritable_outdir_is_an_error() {
    let cfg = TrainConfig::default();
    let model = Model::new(&cfg.model_config(), 2).unwrap();
    let sample = samples(12, 1, &model).remove(0);
    let grid = model.pose_grid(2, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    fs::write(&file, b"x").unwrap();
    assert!(emit_visualizations(&model, &sample, &grid, false, &[0], &file).is_err());
}
