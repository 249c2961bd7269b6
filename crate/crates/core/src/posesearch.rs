//! Candidate scoring, contrastive matching loss, coarse selection and
//! residual regression.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, PadMode, Tape, Var};
use crate::encoder::column_indices;
use crate::error::{CoreError, Result};
use crate::geometry::{shift_crop_columns, snap_to_column, wrap_angle, Pose, PoseGrid};
use crate::nn::{Bound, Conv2d, Mlp, ParamStore};
use crate::tensor::Tensor;

/// Scores in flat candidate order (position major, yaw minor).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityVolume {
    pub scores: Vec<f64>,
    pub side: usize,
    pub n_theta: usize,
}

impl SimilarityVolume {
    pub fn get(&self, ix: usize, iy: usize, k: usize) -> f64 {
        self.scores[(ix * self.side + iy) * self.n_theta + k]
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Index of the largest score, the lowest index among ties.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &s) in self.scores.iter().enumerate() {
            if best.is_none_or(|b| s > self.scores[b]) {
                best = Some(i);
            }
        }
        best
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Cosine similarity of `d_g` (`K_g`) against every shift-crop of every
/// satellite descriptor `(G*G, K_s)`. Positions are scored in parallel;
/// each score is a sequential sum so the result does not depend on the
/// number of workers.
pub fn similarity_volume(
    d_g: &[f64],
    sat: &Tensor,
    grid: &PoseGrid,
    block: usize,
) -> Result<SimilarityVolume> {
    if sat.ndim() != 2 || sat.dim(0) != grid.n_positions() {
        return Err(CoreError::Shape(format!(
            "{} grid positions but satellite descriptors {:?}",
            grid.n_positions(),
            sat.shape()
        )));
    }
    let k_s = sat.dim(1);
    if block == 0 || d_g.len() % block != 0 || k_s % block != 0 || d_g.len() > k_s {
        return Err(CoreError::Shape(format!(
            "descriptor lengths {} and {k_s} do not fit {block}-blocks",
            d_g.len()
        )));
    }
    let (w_g, w_s) = (d_g.len() / block, k_s / block);
    let crops: Vec<Vec<usize>> = grid
        .thetas
        .iter()
        .map(|&t| shift_crop_columns(w_s, w_g, t).map(|c| column_indices(&c, block)))
        .collect::<Result<_>>()?;
    let g = normalized(d_g);
    let per_position: Vec<Vec<f64>> = sat
        .data()
        .par_chunks(k_s)
        .map(|row| {
            crops
                .iter()
                .map(|idx| {
                    let cand: Vec<f64> = idx.iter().map(|&i| row[i]).collect();
                    dot(&g, &normalized(&cand))
                })
                .collect()
        })
        .collect();
    Ok(SimilarityVolume {
        scores: per_position.concat(),
        side: grid.side(),
        n_theta: grid.n_theta(),
    })
}

/// Differentiable scores of one ground descriptor `(K_g)` against
/// `(P, K_s)` satellite descriptors for every yaw, flat `(P * N_theta)`.
pub fn similarity_scores<'t>(d_g: Var<'t>, sat: Var<'t>, thetas: &[f64], block: usize) -> Result<Var<'t>> {
    let (sg, ss) = (d_g.shape(), sat.shape());
    if sg.len() != 1 || ss.len() != 2 || block == 0 || sg[0] % block != 0 || ss[1] % block != 0 {
        return Err(CoreError::Shape(format!(
            "similarity: ground {sg:?}, satellite {ss:?}, block {block}"
        )));
    }
    let (p, k_s, k_g) = (ss[0], ss[1], sg[0]);
    let mut idx = Vec::with_capacity(p * thetas.len() * k_g);
    let crops: Vec<Vec<usize>> = thetas
        .iter()
        .map(|&t| shift_crop_columns(k_s / block, k_g / block, t).map(|c| column_indices(&c, block)))
        .collect::<Result<_>>()?;
    for pi in 0..p {
        for c in &crops {
            idx.extend(c.iter().map(|&i| pi * k_s + i));
        }
    }
    let cands = sat
        .gather(Rc::new(idx), &[p * thetas.len(), k_g])
        .l2_normalize_rows();
    let g = d_g.reshape(&[1, k_g]).l2_normalize_rows().reshape(&[k_g, 1]);
    Ok(cands.matmul(g).reshape(&[p * thetas.len()]))
}

/// `-log(exp(s*/tau) / sum_n exp(s_n/tau))` over all candidates.
pub fn infonce_loss<'t>(scores: Var<'t>, gt: usize, tau: f64) -> Result<Var<'t>> {
    let s = scores.shape();
    if s.len() != 1 {
        return Err(CoreError::Shape(format!("scores must be 1-D, got {s:?}")));
    }
    if gt >= s[0] {
        return Err(CoreError::IndexOutOfRange { index: gt, len: s[0] });
    }
    if !(tau > 0.0) {
        return Err(CoreError::Config(format!("temperature must be > 0, got {tau}")));
    }
    let logits = scores.scale(1.0 / tau);
    Ok(logits.logsumexp().sub(logits.narrow(0, gt, 1).sum()))
}

/// Candidate with the highest score (lowest flat index among ties).
pub fn coarse_match(vol: &SimilarityVolume, grid: &PoseGrid) -> Result<(usize, Pose)> {
    if vol.len() != grid.len() {
        return Err(CoreError::Shape(format!(
            "volume of {} scores for a grid of {}",
            vol.len(),
            grid.len()
        )));
    }
    let best = vol.argmax().ok_or(CoreError::EmptyVolume)?;
    Ok((best, grid.candidate(best)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    pub dx_max: f64,
    pub dy_max: f64,
    /// Radians.
    pub dtheta_max: f64,
    pub n_r: usize,
    pub conv_widths: Vec<usize>,
    pub hidden: usize,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            dx_max: 1.0,
            dy_max: 1.0,
            dtheta_max: 3.6f64.to_radians(),
            n_r: 4,
            conv_widths: vec![32, 64],
            hidden: 64,
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [self.dx_max, self.dy_max, self.dtheta_max];
        if ranges.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(CoreError::Config(format!("regression ranges must be > 0, got {ranges:?}")));
        }
        if self.n_r == 0 || self.conv_widths.is_empty() || self.hidden == 0 {
            return Err(CoreError::Config("n_r, conv widths and hidden width must be >= 1".into()));
        }
        Ok(())
    }

    pub fn ranges(&self) -> [f64; 3] {
        [self.dx_max, self.dy_max, self.dtheta_max]
    }
}

/// Predicts `(dx, dy, dtheta)` from the difference of two aligned
/// descriptors and the coarse pose.
#[derive(Clone, Debug)]
pub struct Regressor {
    pub convs: Vec<Conv2d>,
    pub head: Mlp,
    pub block: usize,
    pub columns: usize,
    pub ranges: [f64; 3],
    /// Positions are divided by this before entering the head.
    pub half_extent: f64,
}

impl Regressor {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &RegressionConfig,
        block: usize,
        columns: usize,
        half_extent: f64,
        horizontal: PadMode,
    ) -> Result<Self> {
        cfg.validate()?;
        let spec = ConvSpec::same(1).with_horizontal(horizontal);
        let mut cin = block;
        let mut convs = Vec::new();
        for (i, &w) in cfg.conv_widths.iter().enumerate() {
            convs.push(Conv2d::new(store, rng, &format!("reg.conv{i}"), cin, w, (1, 3), spec));
            cin = w;
        }
        let head = Mlp::new(store, rng, "reg.head", &[cin * columns + 4, cfg.hidden, 3]);
        head.last().zero(store);
        Ok(Self {
            convs,
            head,
            block,
            columns,
            ranges: cfg.ranges(),
            half_extent,
        })
    }

    /// `d_g` and `d_s` are `(N, W_g * C_d)`; one pose per row. Returns
    /// `(N, 3)` residuals bounded by the configured ranges.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        d_g: Var<'t>,
        d_s: Var<'t>,
        poses: &[Pose],
    ) -> Result<Var<'t>> {
        let k = self.block * self.columns;
        let (sg, ss) = (d_g.shape(), d_s.shape());
        if sg.len() != 2 || sg[1] != k || ss != sg || poses.len() != sg[0] {
            return Err(CoreError::Shape(format!(
                "regression expects two (N, {k}) descriptors and N poses, got {sg:?}, {ss:?}, {}",
                poses.len()
            )));
        }
        let n = sg[0];
        let diff = d_g.l2_normalize_rows().sub(d_s.l2_normalize_rows());
        let mut x = diff
            .reshape(&[n, self.columns, self.block])
            .permute(&[0, 2, 1])
            .reshape(&[n, self.block, 1, self.columns]);
        for conv in &self.convs {
            x = conv.forward(p, x).relu();
        }
        let width = x.shape()[1] * self.columns;
        let pose_feats = Tensor::from_fn(&[n, 4], |i| {
            let pose = &poses[i / 4];
            match i % 4 {
                0 => pose.x() / self.half_extent,
                1 => pose.y() / self.half_extent,
                2 => pose.theta().cos(),
                _ => pose.theta().sin(),
            }
        });
        let feats = Var::concat(&[x.reshape(&[n, width]), tape.constant(pose_feats)], 1);
        let scale = tape.constant(Tensor::from_fn(&[n, 3], |i| self.ranges[i % 3]));
        Ok(self.head.forward(p, feats).tanh().mul(scale))
    }
}

/// `beta * (|dx - dx*| + |dy - dy*| + |dtheta - dtheta*|)`, averaged over
/// rows of `(N, 3)`.
pub fn regression_loss<'t>(pred: Var<'t>, target: &Tensor, beta: f64) -> Result<Var<'t>> {
    let s = pred.shape();
    if s.len() != 2 || s[1] != 3 || target.shape() != s.as_slice() {
        return Err(CoreError::Shape(format!(
            "regression loss: prediction {s:?}, target {:?}",
            target.shape()
        )));
    }
    let t = pred.tape().constant(target.clone());
    Ok(pred.sub(t).abs().sum().scale(beta / s[0] as f64))
}

/// A perturbed coarse pose and the residual that leads back to the truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualSample {
    pub pose: Pose,
    pub residual: [f64; 3],
}

/// Draws `n_r` poses uniformly from the box around `p_star`, with yaws
/// snapped to whole columns of a `cols`-wide azimuth map.
pub fn sample_training_residual_poses(
    p_star: &Pose,
    cfg: &RegressionConfig,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<ResidualSample> {
    let mut draw = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    (0..cfg.n_r)
        .map(|_| {
            let (dx, dy, dt) = (draw(cfg.dx_max), draw(cfg.dy_max), draw(cfg.dtheta_max));
            let pose = Pose::new(
                p_star.x() + dx,
                p_star.y() + dy,
                snap_to_column(p_star.theta() + dt, cols),
            );
            ResidualSample {
                pose,
                residual: [
                    p_star.x() - pose.x(),
                    p_star.y() - pose.y(),
                    wrap_angle(p_star.theta() - pose.theta()),
                ],
            }
        })
        .collect()
}
