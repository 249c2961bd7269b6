use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vird_core::geometry::make_pose_grid;
use vird_core::posesearch::{coarse_match, similarity_volume};
use vird_core::{ImageFrame, PolarConfig, Pose, Tensor};

/// Scores by explicit loops: for each position and yaw, read the shifted
/// columns, normalize both vectors and take the dot product.
fn naive_scores(d_g: &[f64], sat: &[Vec<f64>], thetas: &[f64], block: usize) -> Vec<f64> {
    let w_g = d_g.len() / block;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let ng = norm(d_g);
    let mut out = Vec::new();
    for row in sat {
        let w_s = row.len() / block;
        for &t in thetas {
            let shift = ((t / TAU * w_s as f64).round() as i64).rem_euclid(w_s as i64) as usize;
            let start = (w_s - w_g) / 2;
            let mut crop = Vec::with_capacity(d_g.len());
            for j in 0..w_g {
                let col = (start + shift + j) % w_s;
                for d in 0..block {
                    crop.push(row[col * block + d]);
                }
            }
            let nc = norm(&crop);
            let mut s = 0.0;
            for i in 0..crop.len() {
                s += (d_g[i] / ng) * (crop[i] / nc);
            }
            out.push(s);
        }
    }
    out
}

#[test]
fn volume_and_argmax_match_the_naive_loops_bitwise() {
    let frame = ImageFrame::new(0.5, 64, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..100 {
        let side = rng.random_range(1..=10);
        let w_s = [16usize, 32, 64][trial % 3];
        let n_theta = [1usize, 2, 4, 8, 16][rng.random_range(0..5)];
        let w_g = rng.random_range(1..=w_s);
        let block = rng.random_range(1..=4);
        let cfg = PolarConfig::new(0.0, 8.0, 4, w_s, TAU).unwrap();
        let grid = make_pose_grid(16.0, side, n_theta, &frame, &cfg).unwrap();
        assert_eq!(grid.n_theta(), n_theta);
        let d_g: Vec<f64> = (0..w_g * block).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sat: Vec<Vec<f64>> = (0..side * side)
            .map(|_| (0..w_s * block).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let flat = Tensor::new(&[side * side, w_s * block], sat.concat()).unwrap();
        let vol = similarity_volume(&d_g, &flat, &grid, block).unwrap();
        let naive = naive_scores(&d_g, &sat, &grid.thetas, block);
        assert_eq!(vol.scores, naive, "trial {trial}");

        let mut best = 0;
        for (i, s) in naive.iter().enumerate() {
            if *s > naive[best] {
                best = i;
            }
        }
        let (p, k) = (best / n_theta, best % n_theta);
        let expect = Pose::new(grid.coords[p / side], grid.coords[p % side], grid.thetas[k]);
        assert_eq!(coarse_match(&vol, &grid).unwrap(), (best, expect), "trial {trial}");
        assert!(grid.thetas.iter().all(|t| (-PI..PI).contains(t)));
    }
}
