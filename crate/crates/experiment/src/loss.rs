//! The training objective: reconstruction, matching and regression terms.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vird_core::geometry::snap_to_column;
use vird_core::model::Model;
use vird_core::nn::Bound;
use vird_core::posesearch::{infonce_loss, regression_loss, sample_training_residual_poses, similarity_scores};
use vird_core::reconstruction::{align_satellite_descriptor, recon_loss, Reconstructions};
use vird_core::{PoseGrid, Tape, Tensor, Var};

use crate::config::TrainConfig;
use crate::data::Prepared;
use crate::error::{ExperimentError, Result};

pub struct LossTerms<'t> {
    pub total: Var<'t>,
    /// `alpha1 * origin + alpha2 * cross`.
    pub recon: Var<'t>,
    pub matching: Var<'t>,
    pub regression: Var<'t>,
    /// Unweighted original-view term.
    pub origin: Var<'t>,
    /// Unweighted cross-view term.
    pub cross: Var<'t>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub recon: f64,
    pub matching: f64,
    pub regression: f64,
    pub origin: f64,
    pub cross: f64,
}

impl LossTerms<'_> {
    pub fn values(&self) -> LossValues {
        LossValues {
            total: self.total.item(),
            recon: self.recon.item(),
            matching: self.matching.item(),
            regression: self.regression.item(),
            origin: self.origin.item(),
            cross: self.cross.item(),
        }
    }
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        [self.total, self.recon, self.matching, self.regression, self.origin, self.cross]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Loss of one batch. Matching uses `grid` with the truth snapped to its
/// nearest candidate; `rng` draws the perturbed poses for the regression
/// term.
pub fn total_loss<'t>(
    model: &Model,
    tape: &'t Tape,
    p: &Bound<'t>,
    batch: &[&Prepared],
    grid: &PoseGrid,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossTerms<'t>> {
    if batch.is_empty() {
        return Err(ExperimentError::Config("empty batch".into()));
    }
    let b = batch.len();
    let block = model.block();
    let (crop, sat_cols) = (model.ground_cols(), model.sat_cols());
    let weights = cfg.recon_weights();
    let beta = cfg.regression_weight();
    let zero = || tape.constant(Tensor::scalar(0.0));

    let panos = tape.constant(Tensor::stack(&batch.iter().map(|s| s.grd.clone()).collect::<Vec<_>>())?);
    let d_g = model.ground(tape, p, panos)?.descriptor;
    let k_g = d_g.shape()[1];
    let sats = tape.constant(Tensor::stack(&batch.iter().map(|s| s.sat.clone()).collect::<Vec<_>>())?);
    let feats = model.satellite_features(p, sats)?;
    let fs = feats.shape();

    let grid_positions = grid.positions();
    let n_pos = grid_positions.len();
    let mut matching = Vec::with_capacity(b);
    let mut aligned_star = Vec::with_capacity(b);
    let mut regression = Vec::with_capacity(b);
    for (i, s) in batch.iter().enumerate() {
        let residuals = if beta > 0.0 {
            sample_training_residual_poses(&s.pose, &model.config.regression, sat_cols, rng)
        } else {
            Vec::new()
        };
        let mut positions = grid_positions.clone();
        positions.push((s.pose.x(), s.pose.y()));
        positions.extend(residuals.iter().map(|r| (r.pose.x(), r.pose.y())));
        let feat = feats.narrow(0, i, 1).reshape(&fs[1..]);
        let desc = model.satellite_descriptors(tape, p, feat, &positions)?.descriptor;
        let g = d_g.narrow(0, i, 1);

        let scores = similarity_scores(g.reshape(&[k_g]), desc.narrow(0, 0, n_pos), &grid.thetas, block)?;
        matching.push(infonce_loss(scores, grid.nearest(&s.pose), cfg.loss.tau)?);

        let theta = snap_to_column(s.pose.theta(), sat_cols);
        aligned_star.push(align_satellite_descriptor(desc.narrow(0, n_pos, 1), theta, crop, block)?);

        if !residuals.is_empty() {
            let rows = residuals
                .iter()
                .enumerate()
                .map(|(r, res)| align_satellite_descriptor(desc.narrow(0, n_pos + 1 + r, 1), res.pose.theta(), crop, block))
                .collect::<vird_core::Result<Vec<_>>>()?;
            let d_s = Var::concat(&rows, 0);
            let d_gr = Var::concat(&vec![g; residuals.len()], 0);
            let poses: Vec<_> = residuals.iter().map(|r| r.pose).collect();
            let pred = model.regressor.forward(tape, p, d_gr, d_s, &poses)?;
            let target = Tensor::from_fn(&[residuals.len(), 3], |k| residuals[k / 3].residual[k % 3]);
            regression.push(regression_loss(pred, &target, beta)?);
        }
    }
    let mean = |terms: Vec<Var<'t>>| -> Var<'t> {
        if terms.is_empty() {
            return zero();
        }
        let n = terms.len() as f64;
        terms.into_iter().reduce(|a, b| a.add(b)).expect("non-empty").scale(1.0 / n)
    };
    let matching = mean(matching);
    let regression = mean(regression);

    let (recon, origin, cross) = if weights.alpha1 > 0.0 || weights.alpha2 > 0.0 {
        let d_s = Var::concat(&aligned_star, 0);
        let rec = Reconstructions::decode(p, &model.decoders, d_g, d_s, &weights)?;
        let i_s = tape.constant(Tensor::stack(&batch.iter().map(|s| s.sat_polar.clone()).collect::<Vec<_>>())?);
        let l = recon_loss(panos, i_s, &rec, &weights)?;
        (l.total, l.origin, l.cross)
    } else {
        (zero(), zero(), zero())
    };
    let total = recon.add(matching).add(regression);
    Ok(LossTerms {
        total,
        recon,
        matching,
        regression,
        origin,
        cross,
    })
}
