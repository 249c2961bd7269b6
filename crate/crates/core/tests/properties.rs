use std::f64::consts::TAU;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vird_core::cepa::{sinusoidal_pe, vertical_transform_shared, Cepa, CepaConfig};
use vird_core::encoder::VerticalEncoder;
use vird_core::geometry::{polar_transform, Interpolation};
use vird_core::model::{Model, ModelConfig};
use vird_core::nn::ParamStore;
use vird_core::posesearch::{coarse_match, infonce_loss, similarity_volume, SimilarityVolume};
use vird_core::{ImageFrame, PadMode, PolarConfig, Tape, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Rolls the last axis so that `out[.., j] = t[.., (j + k) % w]`.
fn roll_last(t: &Tensor, k: usize) -> Tensor {
    let w = *t.shape().last().unwrap();
    Tensor::new(
        t.shape(),
        t.data()
            .chunks(w)
            .flat_map(|row| (0..w).map(move |j| row[(j + k) % w]))
            .collect(),
    )
    .unwrap()
}

/// Rotates a `(C, N, N)` raster by 90 degrees counter-clockwise (north up)
/// about pixel `(N/2, N/2)`; pixels rotated in from outside are zero.
fn rotate_ccw(img: &Tensor) -> Tensor {
    let (c, n) = (img.dim(0), img.dim(1));
    let ctr = (n / 2) as i64;
    let mut out = Tensor::zeros(img.shape());
    for ch in 0..c {
        for v in 0..n {
            for u in 0..n {
                let (su, sv) = (2 * ctr - v as i64, u as i64);
                if (0..n as i64).contains(&su) && (0..n as i64).contains(&sv) {
                    out.set(&[ch, v, u], img.at(&[ch, sv as usize, su as usize]));
                }
            }
        }
    }
    out
}

fn cepa_fixture(seed: u64, c: usize, h: usize) -> (ParamStore, Cepa) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cepa = Cepa::new(&mut store, &mut rng, &CepaConfig::default(), c, h, PadMode::Circular).unwrap();
    (store, cepa)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_rows_sum_to_one_and_two(seed in 0u64..1000) {
        let (store, cepa) = cepa_fixture(seed, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
        let tape = Tape::inference();
        let p = store.bind(&tape, false);
        let a_s = cepa.satellite_weights(&tape, &p).unwrap().value();
        for row in a_s.data().chunks(6) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
        let f = tape.constant(random(&[2, 3, 6, 5], &mut rng));
        let g = cepa.ground(&tape, &p, f).unwrap();
        let e = g.enhanced.unwrap().value();
        for b in 0..2 {
            for q in 0..6 {
                for w in 0..5 {
                    let s: f64 = (0..6).map(|k| e.at(&[b, q, k, w])).sum();
                    prop_assert!((s - 2.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn positional_weights_ignore_content(seed in 0u64..1000) {
        let (store, cepa) = cepa_fixture(seed, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::inference();
        let p = store.bind(&tape, false);
        let f1 = tape.constant(random(&[1, 2, 4, 6], &mut rng));
        let f2 = tape.constant(random(&[1, 2, 4, 6], &mut rng));
        let a = cepa.ground(&tape, &p, f1).unwrap().positional.value();
        let b = cepa.ground(&tape, &p, f2).unwrap().positional.value();
        prop_assert_eq!(a.data(), b.data());
        let s1 = cepa.satellite(&tape, &p, f1).unwrap().positional.value();
        let s2 = cepa.satellite(&tape, &p, f2).unwrap().positional.value();
        prop_assert_eq!(s1.data(), s2.data());
    }

    #[test]
    fn vertical_transform_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f1, f2) = (random(&[2, 3, 4, 5], &mut rng), random(&[2, 3, 4, 5], &mut rng));
        let w = random(&[6, 4], &mut rng);
        let tape = Tape::inference();
        let t = |f: Tensor| vertical_transform_shared(tape.constant(f), tape.constant(w.clone())).unwrap().value();
        let mixed = t(f1.zip_map(&f2, |x, y| a * x + b * y));
        let (t1, t2) = (t(f1), t(f2));
        for i in 0..mixed.numel() {
            let expect = a * t1.data()[i] + b * t2.data()[i];
            prop_assert!((mixed.data()[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn satellite_transform_commutes_with_column_shift(seed in 0u64..1000, k in 0usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random(&[2, 3, 4, 7], &mut rng);
        let w = random(&[5, 4], &mut rng);
        let tape = Tape::inference();
        let t = |f: Tensor| vertical_transform_shared(tape.constant(f), tape.constant(w.clone())).unwrap().value();
        prop_assert_eq!(&*t(roll_last(&f, k)), &roll_last(&t(f), k));
    }

    #[test]
    fn column_shift_rotates_descriptor_blocks(seed in 0u64..1000, k in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ve = VerticalEncoder::new(&mut store, &mut rng, "v", 3, 4, 8, 2);
        let f = random(&[1, 3, 4, 6], &mut rng);
        let tape = Tape::inference();
        let p = store.bind(&tape, false);
        let d = ve.encode(&p, tape.constant(f.clone())).unwrap().value();
        let ds = ve.encode(&p, tape.constant(roll_last(&f, k))).unwrap().value();
        let expect: Vec<f64> = (0..12).map(|i| d.data()[(i + 2 * k) % 12]).collect();
        prop_assert_eq!(ds.data(), &expect[..]);
    }

    #[test]
    fn polar_map_rotates_with_the_raster(seed in 0u64..1000, turns in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame = ImageFrame::new(0.5, 64, 64).unwrap();
        let img = random(&[2, 64, 64], &mut rng);
        let mut rotated = img.clone();
        for _ in 0..turns {
            rotated = rotate_ccw(&rotated);
        }
        let (lo, hi) = img.min_max();
        for interp in [Interpolation::Nearest, Interpolation::Bilinear] {
            let cfg = PolarConfig::new(0.0, 8.0, 16, 64, TAU).unwrap().with_interpolation(interp);
            let a = polar_transform(&img, (32.0, 32.0), &cfg, &frame).unwrap();
            let b = polar_transform(&rotated, (32.0, 32.0), &cfg, &frame).unwrap();
            let expect = roll_last(&a, 16 * turns);
            let err = b.zip_map(&expect, |x, y| (x - y).abs()).max_abs();
            match interp {
                Interpolation::Nearest => prop_assert_eq!(err, 0.0),
                Interpolation::Bilinear => prop_assert!(err <= 1e-2 * (hi - lo), "err {}", err),
            }
        }
    }

    #[test]
    fn infonce_decreases_as_the_positive_rises(seed in 0u64..1000, bump in 1e-3f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random(&[9], &mut rng);
        let mut s2 = s.clone();
        s2.data_mut()[4] += bump;
        let tape = Tape::inference();
        let l1 = infonce_loss(tape.constant(s), 4, 0.05).unwrap().item();
        let l2 = infonce_loss(tape.constant(s2), 4, 0.05).unwrap().item();
        prop_assert!(l2 < l1);
    }

    #[test]
    fn coarse_match_ignores_monotone_rescaling(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame = ImageFrame::new(0.5, 64, 64).unwrap();
        let cfg = PolarConfig::new(0.0, 8.0, 4, 16, TAU).unwrap();
        let grid = vird_core::geometry::make_pose_grid(16.0, 3, 4, &frame, &cfg).unwrap();
        let scores: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vol = SimilarityVolume { scores: scores.clone(), side: 3, n_theta: 4 };
        let squashed = SimilarityVolume { scores: scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect(), ..vol.clone() };
        prop_assert_eq!(coarse_match(&vol, &grid).unwrap(), coarse_match(&squashed, &grid).unwrap());
    }
}

#[test]
fn sinusoidal_entries_are_bounded() {
    let pe = sinusoidal_pe(100, 64).unwrap();
    assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn satellite_path_is_azimuth_equivariant_end_to_end() {
    let model = Model::new(&ModelConfig::default(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let polar = random(&[1, 16, 16, 64], &mut rng);
    let tape = Tape::inference();
    let p = model.store.bind(&tape, false);
    let encode = |f: Tensor| {
        let f = tape.constant(f);
        let t = model.cepa.satellite(&tape, &p, f).unwrap().transformed;
        model.vde_s.encode(&p, t).unwrap().value()
    };
    let base = encode(polar.clone());
    for k in [1, 5, 32, 63] {
        let shifted = encode(roll_last(&polar, k));
        let expect: Vec<f64> = (0..base.numel()).map(|i| base.data()[(i + 8 * k) % base.numel()]).collect();
        assert_eq!(shifted.data(), &expect[..], "shift {k}");
    }
}

#[test]
fn panorama_feature_map_shifts_with_the_panorama() {
    let model = Model::new(&ModelConfig::default(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pano = random(&[1, 3, 32, 128], &mut rng);
    let tape = Tape::inference();
    let p = model.store.bind(&tape, false);
    let feats = |x: Tensor| model.ground(&tape, &p, tape.constant(x)).unwrap();
    let a = feats(pano.clone());
    let b = feats(roll_last(&pano, 2 * 3));
    assert_eq!(b.features.value().data(), roll_last(&a.features.value(), 3).data());
    let (da, db) = (a.descriptor.value(), b.descriptor.value());
    let n = da.numel();
    let expect: Vec<f64> = (0..n).map(|i| da.data()[(i + 8 * 3) % n]).collect();
    assert_eq!(db.data(), &expect[..]);
}

#[test]
fn rotating_the_panorama_moves_the_best_yaw() {
    let model = Model::new(&ModelConfig::default(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sat = random(&[3, 64, 64], &mut rng);
    let pano = random(&[3, 32, 128], &mut rng);
    let grid = model.pose_grid(3, 64).unwrap();
    let d_s = model.grid_descriptors(&sat, &grid).unwrap();
    let d_g = model.ground_descriptor(&pano).unwrap();
    let v0 = similarity_volume(&d_g, &d_s, &grid, model.block()).unwrap();
    let (i0, _) = coarse_match(&v0, &grid).unwrap();
    let (p0, k0) = grid.split_index(i0);
    for k in [1, 7, 40] {
        // a yaw change of 2*pi*k/64 shifts the 128-column panorama by 2k
        let d_g = model.ground_descriptor(&roll_last(&pano, 2 * k)).unwrap();
        let v = similarity_volume(&d_g, &d_s, &grid, model.block()).unwrap();
        let (i, _) = coarse_match(&v, &grid).unwrap();
        assert_eq!(grid.split_index(i), (p0, (k0 + k) % 64), "yaw step {k}");
    }
}

/// Naive same-padded 3x3 convolution of `(Cin, H, W)` with OIHW weights,
/// zero-padded vertically and wrapped horizontally.
fn conv3x3_oracle(x: &[Vec<Vec<f64>>], w: &Tensor, b: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let (cout, cin) = (w.dim(0), w.dim(1));
    let (h, wd) = (x[0].len(), x[0][0].len());
    let mut out = vec![vec![vec![0.0; wd]; h]; cout];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..wd {
                let mut s = b.data()[o];
                for i in 0..cin {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let yy = y as i64 + dy as i64 - 1;
                            if yy < 0 || yy >= h as i64 {
                                continue;
                            }
                            let xs = (xx as i64 + dx as i64 - 1).rem_euclid(wd as i64) as usize;
                            s += w.at(&[o, i, dy, dx]) * x[i][yy as usize][xs];
                        }
                    }
                }
                out[o][y][xx] = s;
            }
        }
    }
    out
}

#[test]
fn context_enhancement_matches_literal_walkthrough() {
    let (c, hk, w) = (2, 3, 4);
    let (store, cepa) = cepa_fixture(17, c, hk);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let f = random(&[1, c, hk, w], &mut rng);
    let tape = Tape::inference();
    let p = store.bind(&tape, false);
    let a = cepa.ground_weights(&tape, &p).unwrap();
    let got = cepa.context_enhance(&p, a, tape.constant(f.clone())).unwrap().value();
    let a = a.value();
    let hq = a.dim(0);
    let (w1, b1) = (store.get(cepa.phi_in.weight), store.get(cepa.phi_in.bias));
    let (w2, b2) = (store.get(cepa.phi_out.weight), store.get(cepa.phi_out.bias));
    for q in 0..hq {
        // concatenate [A_g row broadcast over width ; F_g] on the channel axis
        let mut x = vec![vec![vec![0.0; w]; hk]; c + 1];
        for k in 0..hk {
            for col in 0..w {
                x[0][k][col] = a.at(&[q, k]);
                for ch in 0..c {
                    x[ch + 1][k][col] = f.at(&[0, ch, k, col]);
                }
            }
        }
        let mut hidden = conv3x3_oracle(&x, w1, b1);
        hidden.iter_mut().flatten().flatten().for_each(|v| *v = v.max(0.0));
        let logits = &conv3x3_oracle(&hidden, w2, b2)[0];
        for col in 0..w {
            let z: f64 = (0..hk).map(|k| logits[k][col].exp()).sum();
            for k in 0..hk {
                let expect = logits[k][col].exp() / z + a.at(&[q, k]);
                let diff = (got.at(&[0, q, k, col]) - expect).abs();
                assert!(diff < 1e-12, "q={q} k={k} w={col}: {diff}");
            }
        }
    }
}
