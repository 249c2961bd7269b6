//! Decoders that rebuild each view from a descriptor, and the l1 loss over
//! the original-view and cross-view reconstructions.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, PadMode, Var};
use crate::encoder::select_columns;
use crate::error::{CoreError, Result};
use crate::geometry::shift_crop_columns;
use crate::nn::{Bound, Conv2d, Linear, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for ReconWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 10.0,
        }
    }
}

impl ReconWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 || !self.alpha1.is_finite() || !self.alpha2.is_finite() {
            return Err(CoreError::Config(format!(
                "reconstruction weights must be finite and >= 0, got {} and {}",
                self.alpha1, self.alpha2
            )));
        }
        Ok(())
    }
}

/// Shift-crops a `(N, W_s * C_d)` satellite descriptor by `theta` down to
/// `crop` columns.
pub fn align_satellite_descriptor<'t>(d: Var<'t>, theta: f64, crop: usize, block: usize) -> Result<Var<'t>> {
    let s = d.shape();
    if s.len() != 2 || block == 0 || s[1] % block != 0 {
        return Err(CoreError::Shape(format!(
            "descriptor {s:?} is not a whole number of {block}-blocks"
        )));
    }
    let cols = shift_crop_columns(s[1] / block, crop, theta)?;
    Ok(select_columns(d, &cols, block))
}

/// Target image geometry of a decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Descriptor `(N, W_in * C_d)` to image `(N, C, H, W)`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub expand: Linear,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub hidden: usize,
    pub block: usize,
    pub columns: usize,
    pub target: ImageShape,
    upsample: [(usize, usize); 2],
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        block: usize,
        columns: usize,
        hidden: usize,
        target: ImageShape,
        horizontal: PadMode,
    ) -> Result<Self> {
        if target.height % 4 != 0 || target.height == 0 {
            return Err(CoreError::Config(format!(
                "decoder target height {} must be a positive multiple of 4",
                target.height
            )));
        }
        if columns == 0 || target.width % columns != 0 {
            return Err(CoreError::Config(format!(
                "decoder target width {} is not a multiple of {columns} descriptor columns",
                target.width
            )));
        }
        let ratio = target.width / columns;
        let sx1 = (1..=ratio)
            .filter(|d| ratio % d == 0 && d * d >= ratio)
            .min()
            .unwrap_or(1);
        let spec = ConvSpec::same(1).with_horizontal(horizontal);
        Ok(Self {
            expand: Linear::new(store, rng, &format!("{name}.expand"), block, hidden * target.height / 4),
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), hidden, hidden, (3, 3), spec),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), hidden, target.channels, (3, 3), spec),
            hidden,
            block,
            columns,
            target,
            upsample: [(2, sx1), (2, ratio / sx1)],
        })
    }

    pub fn decode<'t>(&self, p: &Bound<'t>, d: Var<'t>) -> Result<Var<'t>> {
        let s = d.shape();
        if s.len() != 2 || s[1] != self.block * self.columns {
            return Err(CoreError::Shape(format!(
                "decoder expects (N, {}), got {s:?}",
                self.block * self.columns
            )));
        }
        let (n, w, h4) = (s[0], self.columns, self.target.height / 4);
        let x = self
            .expand
            .forward(p, d.reshape(&[n * w, self.block]))
            .relu()
            .reshape(&[n, w, self.hidden, h4])
            .permute(&[0, 2, 3, 1]);
        let [(a, b), (c, e)] = self.upsample;
        let x = self.conv1.forward(p, x.upsample_nearest(a, b)).relu();
        Ok(self.conv2.forward(p, x.upsample_nearest(c, e)))
    }
}

/// The four decoders, indexed by source and target view.
#[derive(Clone, Debug)]
pub struct Decoders {
    pub g2g: Decoder,
    pub s2s: Decoder,
    pub g2s: Decoder,
    pub s2g: Decoder,
}

impl Decoders {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        block: usize,
        columns: usize,
        hidden: usize,
        ground: ImageShape,
        satellite: ImageShape,
        horizontal: PadMode,
    ) -> Result<Self> {
        let mut make = |name: &str, target| {
            Decoder::new(store, rng, name, block, columns, hidden, target, horizontal)
        };
        Ok(Self {
            g2g: make("dec.g2g", ground)?,
            s2s: make("dec.s2s", satellite)?,
            g2s: make("dec.g2s", satellite)?,
            s2g: make("dec.s2g", ground)?,
        })
    }
}

pub struct Reconstructions<'t> {
    pub g2g: Option<Var<'t>>,
    pub s2s: Option<Var<'t>>,
    pub g2s: Option<Var<'t>>,
    pub s2g: Option<Var<'t>>,
}

impl<'t> Reconstructions<'t> {
    /// Decodes the terms with non-zero weight.
    pub fn decode(
        p: &Bound<'t>,
        decoders: &Decoders,
        d_g: Var<'t>,
        d_s: Var<'t>,
        w: &ReconWeights,
    ) -> Result<Self> {
        let origin = w.alpha1 > 0.0;
        let cross = w.alpha2 > 0.0;
        Ok(Self {
            g2g: origin.then(|| decoders.g2g.decode(p, d_g)).transpose()?,
            s2s: origin.then(|| decoders.s2s.decode(p, d_s)).transpose()?,
            g2s: cross.then(|| decoders.g2s.decode(p, d_g)).transpose()?,
            s2g: cross.then(|| decoders.s2g.decode(p, d_s)).transpose()?,
        })
    }
}

pub struct ReconLoss<'t> {
    pub origin: Var<'t>,
    pub cross: Var<'t>,
    pub total: Var<'t>,
}

/// Mean absolute difference.
pub fn l1<'t>(target: Var<'t>, recon: Var<'t>) -> Result<Var<'t>> {
    if target.shape() != recon.shape() {
        return Err(CoreError::Shape(format!(
            "reconstruction {:?} does not match target {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    Ok(target.sub(recon).abs().mean())
}

/// `alpha1 * L_origin + alpha2 * L_cross`. Missing reconstructions add zero.
pub fn recon_loss<'t>(
    i_g: Var<'t>,
    i_s: Var<'t>,
    rec: &Reconstructions<'t>,
    w: &ReconWeights,
) -> Result<ReconLoss<'t>> {
    w.validate()?;
    let tape = i_g.tape();
    let term = |target: Var<'t>, r: Option<Var<'t>>| -> Result<Var<'t>> {
        match r {
            Some(r) => l1(target, r),
            None => Ok(tape.constant(crate::tensor::Tensor::scalar(0.0))),
        }
    };
    let origin = term(i_g, rec.g2g)?.add(term(i_s, rec.s2s)?);
    let cross = term(i_g, rec.s2g)?.add(term(i_s, rec.g2s)?);
    let total = origin.scale(w.alpha1).add(cross.scale(w.alpha2));
    Ok(ReconLoss { origin, cross, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn scalar_img<'t>(tape: &'t Tape, v: f64) -> Var<'t> {
        tape.constant(Tensor::full(&[1, 1, 1, 1], v))
    }

    #[test]
    fn scalar_images() {
        let tape = Tape::inference();
        let (ig, is) = (scalar_img(&tape, 0.2), scalar_img(&tape, 0.6));
        let r = Reconstructions {
            g2g: Some(scalar_img(&tape, 0.5)),
            s2s: Some(scalar_img(&tape, 0.5)),
            g2s: Some(scalar_img(&tape, 0.5)),
            s2g: Some(scalar_img(&tape, 0.5)),
        };
        let l = recon_loss(ig, is, &r, &ReconWeights::default()).unwrap();
        let (origin, cross) = ((0.2f64 - 0.5).abs() + (0.6f64 - 0.5).abs(), (0.2f64 - 0.5).abs() + (0.6f64 - 0.5).abs());
        assert_abs_diff_eq!(l.origin.item(), origin, epsilon = 1e-15);
        assert_abs_diff_eq!(l.cross.item(), cross, epsilon = 1e-15);
        assert_abs_diff_eq!(l.total.item(), origin + 10.0 * cross, epsilon = 1e-14);
        let zero = recon_loss(ig, is, &r, &ReconWeights { alpha1: 0.0, alpha2: 0.0 }).unwrap();
        assert_eq!(zero.total.item(), 0.0);
        let exact = Reconstructions {
            g2g: Some(ig),
            s2s: Some(is),
            g2s: Some(is),
            s2g: Some(ig),
        };
        let l = recon_loss(ig, is, &exact, &ReconWeights::default()).unwrap();
        assert_eq!((l.origin.item(), l.cross.item(), l.total.item()), (0.0, 0.0, 0.0));
        assert!(ReconWeights { alpha1: -1.0, alpha2: 0.0 }.validate().is_err());
        let bad = Reconstructions {
            g2g: Some(tape.constant(Tensor::zeros(&[1, 1, 2, 1]))),
            s2s: None,
            g2s: None,
            s2g: None,
        };
        assert!(recon_loss(ig, is, &bad, &ReconWeights::default()).is_err());
    }

    #[test]
    fn decoder_output_shape_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let target = ImageShape {
            channels: 3,
            height: 8,
            width: 12,
        };
        let dec = Decoder::new(&mut store, &mut rng, "d", 2, 3, 4, target, PadMode::Circular).unwrap();
        store.get_mut(dec.conv2.weight).data_mut().fill(0.0);
        store.get_mut(dec.conv2.bias).data_mut().copy_from_slice(&[0.1, 0.2, 0.3]);
        let tape = Tape::inference();
        let p = store.bind(&tape, false);
        let out = dec.decode(&p, tape.constant(Tensor::zeros(&[2, 6]))).unwrap().value();
        assert_eq!(out.shape(), &[2, 3, 8, 12]);
        for n in 0..2 {
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..12 {
                        assert_eq!(out.at(&[n, c, y, x]), [0.1, 0.2, 0.3][c]);
                    }
                }
            }
        }
        assert!(dec.decode(&p, tape.constant(Tensor::zeros(&[2, 5]))).is_err());
        assert!(Decoder::new(&mut store, &mut rng, "e", 2, 5, 4, target, PadMode::Zero).is_err());
    }

    #[test]
    fn align_examples() {
        let tape = Tape::inference();
        // W_s = 8, W_g = 4, C_d = 2; entry value = column * 10 + channel
        let d = tape.constant(Tensor::from_fn(&[1, 16], |i| ((i / 2) * 10 + i % 2) as f64));
        let at_pi = align_satellite_descriptor(d, std::f64::consts::PI, 4, 2).unwrap().value();
        let cols = shift_crop_columns(8, 4, std::f64::consts::PI).unwrap();
        let expect: Vec<f64> = cols.iter().flat_map(|&c| [(c * 10) as f64, (c * 10 + 1) as f64]).collect();
        assert_eq!(at_pi.data(), &expect[..]);
        assert_eq!(at_pi.data(), &[60.0, 61.0, 70.0, 71.0, 0.0, 1.0, 10.0, 11.0]);
        let zero = align_satellite_descriptor(d, 0.0, 4, 2).unwrap().value();
        assert_eq!(zero.data(), &[20.0, 21.0, 30.0, 31.0, 40.0, 41.0, 50.0, 51.0]);
        let full = align_satellite_descriptor(d, std::f64::consts::TAU, 4, 2).unwrap().value();
        assert_eq!(zero.data(), full.data());
        assert!(align_satellite_descriptor(d, 0.1, 4, 2).is_err());
    }
}
