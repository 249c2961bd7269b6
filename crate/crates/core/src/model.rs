//! The full network: feature extraction, polar resampling, attention,
//! descriptors, decoders and the regression head.

use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{PadMode, Tape, Var};
use crate::cepa::{Cepa, CepaConfig, GroundAttention, SatelliteAttention};
use crate::encoder::{horizontal_padding, Backbone, EncoderConfig, VerticalEncoder, View};
use crate::error::{CoreError, Result};
use crate::geometry::{
    make_pose_grid, polar_transform_var, ImageFrame, Interpolation, PolarConfig, Pose, PoseGrid,
};
use crate::nn::{Bound, ParamStore};
use crate::posesearch::{coarse_match, similarity_volume, RegressionConfig, Regressor, SimilarityVolume};
use crate::reconstruction::{align_satellite_descriptor, Decoders, ImageShape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub sat_size: usize,
    /// Metres per satellite pixel.
    pub sat_resolution: f64,
    pub pano_height: usize,
    pub pano_width: usize,
    pub hfov_deg: f64,
    pub r_min: f64,
    pub r_max: f64,
    /// Side of the square search region centred in the satellite image, metres.
    pub search_extent: f64,
    pub interpolation: Interpolation,
    pub encoder: EncoderConfig,
    pub cepa: CepaConfig,
    pub decoder_hidden: usize,
    pub regression: RegressionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sat_size: 64,
            sat_resolution: 0.5,
            pano_height: 32,
            pano_width: 128,
            hfov_deg: 360.0,
            r_min: 0.0,
            r_max: 8.0,
            search_extent: 16.0,
            interpolation: Interpolation::Bilinear,
            encoder: EncoderConfig::default(),
            cepa: CepaConfig::default(),
            decoder_hidden: 16,
            regression: RegressionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn hfov(&self) -> f64 {
        if (self.hfov_deg - 360.0).abs() < 1e-9 {
            TAU
        } else {
            self.hfov_deg.to_radians()
        }
    }

    pub fn sat_frame(&self) -> Result<ImageFrame> {
        ImageFrame::new(self.sat_resolution, self.sat_size, self.sat_size)
    }
}

/// Detached outputs of a single-pair pose search.
#[derive(Clone, Debug)]
pub struct Inference {
    pub coarse: Pose,
    pub coarse_index: usize,
    pub refined: Pose,
    pub score: f64,
    pub volume: SimilarityVolume,
}

pub struct GroundOutput<'t> {
    pub features: Var<'t>,
    pub attention: Option<GroundAttention<'t>>,
    /// `(B, K_g)`.
    pub descriptor: Var<'t>,
}

pub struct SatelliteOutput<'t> {
    /// `(P, C, H, W_s)`.
    pub polar: Var<'t>,
    pub attention: Option<SatelliteAttention<'t>>,
    /// `(P, K_s)`.
    pub descriptor: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ground_backbone: Backbone,
    pub sat_backbone: Backbone,
    pub cepa: Cepa,
    pub vde_g: VerticalEncoder,
    pub vde_s: VerticalEncoder,
    pub decoders: Decoders,
    pub regressor: Regressor,
    pub sat_frame: ImageFrame,
    pub feat_frame: ImageFrame,
    /// Polar sampling of satellite features.
    pub polar_feat: PolarConfig,
    /// Polar sampling of the satellite image (reconstruction targets).
    pub polar_img: PolarConfig,
    pub ground_pad: PadMode,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        config.regression.validate()?;
        let f = config.encoder.factor();
        let hfov = config.hfov();
        for (what, n) in [
            ("sat_size", config.sat_size),
            ("pano_height", config.pano_height),
            ("pano_width", config.pano_width),
        ] {
            if n == 0 || n % f != 0 {
                return Err(CoreError::Config(format!(
                    "{what}={n} is not a positive multiple of the downsampling factor {f}"
                )));
            }
        }
        let sat_frame = config.sat_frame()?;
        let feat_frame = sat_frame.downsampled(f)?;
        let (h, w_g) = (config.pano_height / f, config.pano_width / f);
        let polar_feat =
            PolarConfig::new(config.r_min, config.r_max, h, w_g, hfov)?.with_interpolation(config.interpolation);
        let polar_img = PolarConfig::new(config.r_min, config.r_max, config.pano_height, config.pano_width, hfov)?
            .with_interpolation(config.interpolation);
        if polar_img.cols != polar_feat.cols * f {
            return Err(CoreError::Config(format!(
                "field of view gives {} image columns but {} feature columns",
                polar_img.cols, polar_feat.cols
            )));
        }
        // the grid constructor carries the coverage and parity checks
        make_pose_grid(config.search_extent, 1, 1, &sat_frame, &polar_feat)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ground_backbone = Backbone::new(&mut store, &mut rng, "enc.g", &config.encoder)?;
        let sat_backbone = if config.encoder.share_weights {
            ground_backbone.clone()
        } else {
            Backbone::new(&mut store, &mut rng, "enc.s", &config.encoder)?
        };
        let c = config.encoder.channels();
        let ground_pad = horizontal_padding(View::Ground, hfov);
        let cepa = Cepa::new(&mut store, &mut rng, &config.cepa, c, h, ground_pad)?;
        let rows = if config.cepa.enabled { cepa.h_q } else { h };
        let (hidden, c_d) = (config.encoder.hidden(), config.encoder.descriptor_dim);
        let vde_g = VerticalEncoder::new(&mut store, &mut rng, "vde.g", c, rows, hidden, c_d);
        let vde_s = VerticalEncoder::new(&mut store, &mut rng, "vde.s", c, rows, hidden, c_d);
        let image = ImageShape {
            channels: config.encoder.in_channels,
            height: config.pano_height,
            width: config.pano_width,
        };
        let decoders = Decoders::new(
            &mut store,
            &mut rng,
            c_d,
            w_g,
            config.decoder_hidden,
            image,
            image,
            ground_pad,
        )?;
        let regressor = Regressor::new(
            &mut store,
            &mut rng,
            &config.regression,
            c_d,
            w_g,
            config.search_extent / 2.0,
            ground_pad,
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            ground_backbone,
            sat_backbone,
            cepa,
            vde_g,
            vde_s,
            decoders,
            regressor,
            sat_frame,
            feat_frame,
            polar_feat,
            polar_img,
            ground_pad,
        })
    }

    pub fn block(&self) -> usize {
        self.config.encoder.descriptor_dim
    }

    /// Ground descriptor width in columns.
    pub fn ground_cols(&self) -> usize {
        self.polar_feat.ground_cols
    }

    /// Satellite descriptor width in columns.
    pub fn sat_cols(&self) -> usize {
        self.polar_feat.cols
    }

    pub fn pose_grid(&self, side: usize, n_theta: usize) -> Result<PoseGrid> {
        make_pose_grid(self.config.search_extent, side, n_theta, &self.sat_frame, &self.polar_feat)
    }

    /// `(B, 3, H, W)` panoramas.
    pub fn ground<'t>(&self, tape: &'t Tape, p: &Bound<'t>, panos: Var<'t>) -> Result<GroundOutput<'t>> {
        let features = self.ground_backbone.extract(p, panos, self.ground_pad)?;
        let (attention, transformed) = if self.config.cepa.enabled {
            let a = self.cepa.ground(tape, p, features)?;
            let t = a.transformed;
            (Some(a), t)
        } else {
            (None, features)
        };
        let descriptor = self.vde_g.encode(p, transformed)?;
        Ok(GroundOutput {
            features,
            attention,
            descriptor,
        })
    }

    /// `(B, 3, A, A)` satellite images to `(B, C, A/f, A/f)` features.
    pub fn satellite_features<'t>(&self, p: &Bound<'t>, sats: Var<'t>) -> Result<Var<'t>> {
        self.sat_backbone.extract(p, sats, PadMode::Zero)
    }

    /// Descriptors of one `(C, a, a)` satellite feature map at `positions`
    /// (metres).
    pub fn satellite_descriptors<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        features: Var<'t>,
        positions: &[(f64, f64)],
    ) -> Result<SatelliteOutput<'t>> {
        let centers: Vec<(f64, f64)> = positions
            .iter()
            .map(|&(x, y)| self.feat_frame.world_to_pixel(x, y))
            .collect();
        let polar = polar_transform_var(features, &centers, &self.polar_feat, &self.feat_frame)?;
        let (attention, transformed) = if self.config.cepa.enabled {
            let a = self.cepa.satellite(tape, p, polar)?;
            let t = a.transformed;
            (Some(a), t)
        } else {
            (None, polar)
        };
        let descriptor = self.vde_s.encode(p, transformed)?;
        Ok(SatelliteOutput {
            polar,
            attention,
            descriptor,
        })
    }

    /// Satellite descriptors `(G*G, K_s)` over the grid positions, built in
    /// chunks to bound memory.
    pub fn grid_descriptors(&self, sat: &Tensor, grid: &PoseGrid) -> Result<Tensor> {
        let tape = Tape::inference();
        let p = self.store.bind(&tape, false);
        let sat4 = batch_of_one(sat)?;
        let feats = self.satellite_features(&p, tape.constant(sat4))?;
        let s = feats.shape();
        let feats = feats.reshape(&s[1..]);
        let positions = grid.positions();
        let mut rows = Vec::new();
        for chunk in positions.chunks(64) {
            let d = self.satellite_descriptors(&tape, &p, feats, chunk)?.descriptor;
            rows.extend_from_slice(d.value().data());
        }
        let k_s = self.block() * self.sat_cols();
        Tensor::new(&[positions.len(), k_s], rows)
    }

    pub fn ground_descriptor(&self, pano: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::inference();
        let p = self.store.bind(&tape, false);
        let d = self.ground(&tape, &p, tape.constant(batch_of_one(pano)?))?.descriptor;
        Ok(d.value().data().to_vec())
    }

    /// Exhaustive search over `grid`, optionally refined by the regression
    /// head.
    pub fn infer(&self, sat: &Tensor, pano: &Tensor, grid: &PoseGrid, refine: bool) -> Result<Inference> {
        let d_g = self.ground_descriptor(pano)?;
        let d_s = self.grid_descriptors(sat, grid)?;
        let volume = similarity_volume(&d_g, &d_s, grid, self.block())?;
        let (coarse_index, coarse) = coarse_match(&volume, grid)?;
        let score = volume.scores[coarse_index];
        let refined = if refine {
            let tape = Tape::inference();
            let p = self.store.bind(&tape, false);
            let (pos, _) = grid.split_index(coarse_index);
            let k_s = d_s.dim(1);
            let row = Tensor::new(&[1, k_s], d_s.data()[pos * k_s..(pos + 1) * k_s].to_vec())?;
            let aligned = align_satellite_descriptor(tape.constant(row), coarse.theta(), self.ground_cols(), self.block())?;
            let g = tape.constant(Tensor::new(&[1, d_g.len()], d_g)?);
            let delta = self.regressor.forward(&tape, &p, g, aligned, &[coarse])?.value();
            coarse.offset(delta.data()[0], delta.data()[1], delta.data()[2])
        } else {
            coarse
        };
        Ok(Inference {
            coarse,
            coarse_index,
            refined,
            score,
            volume,
        })
    }
}

/// `(C, H, W)` to `(1, C, H, W)`.
pub fn batch_of_one(t: &Tensor) -> Result<Tensor> {
    if t.ndim() != 3 {
        return Err(CoreError::Shape(format!("expected (C, H, W), got {:?}", t.shape())));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.reshape(&shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_dimensions() {
        let m = Model::new(&ModelConfig::default(), 0).unwrap();
        assert_eq!(m.ground_cols(), 64);
        assert_eq!(m.sat_cols(), 64);
        assert_eq!(m.polar_img.cols, 128);
        assert_eq!(m.feat_frame.width_px, 32);
        assert_eq!(m.cepa.h_k, 16);
        let tape = Tape::inference();
        let p = m.store.bind(&tape, false);
        let g = m.ground(&tape, &p, tape.constant(Tensor::zeros(&[2, 3, 32, 128]))).unwrap();
        assert_eq!(g.descriptor.shape(), vec![2, 64 * 8]);
        let f = m.satellite_features(&p, tape.constant(Tensor::zeros(&[1, 3, 64, 64]))).unwrap();
        let f = f.reshape(&[16, 32, 32]);
        let s = m.satellite_descriptors(&tape, &p, f, &[(0.0, 0.0), (3.0, -2.0)]).unwrap();
        assert_eq!(s.descriptor.shape(), vec![2, 64 * 8]);
    }

    #[test]
    fn rejects_oversized_search() {
        let cfg = ModelConfig {
            search_extent: 20.0,
            ..Default::default()
        };
        assert!(Model::new(&cfg, 0).is_err());
        let cfg = ModelConfig {
            pano_width: 130,
            ..Default::default()
        };
        assert!(Model::new(&cfg, 0).is_err());
    }
}
