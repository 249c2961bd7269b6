//! Convolutional feature extractor and vertical directional encoding.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, PadMode, Var};
use crate::error::{CoreError, Result};
use crate::nn::{Bound, Conv2d, Mlp, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Ground,
    Satellite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output width of each stage; the last one is `C`.
    pub widths: Vec<usize>,
    /// Stride of each stage.
    pub strides: Vec<usize>,
    /// Use one set of weights for both views.
    pub share_weights: bool,
    /// Descriptor values per azimuth column.
    pub descriptor_dim: usize,
    /// Hidden width of the per-column MLP; `None` means `4 * descriptor_dim`.
    pub descriptor_hidden: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 16],
            strides: vec![2, 1, 1],
            share_weights: false,
            descriptor_dim: 8,
            descriptor_hidden: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(CoreError::Config(format!(
                "encoder needs one stride per stage, got {} widths and {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.in_channels == 0 || self.widths.contains(&0) || self.strides.contains(&0) {
            return Err(CoreError::Config("encoder widths and strides must be >= 1".into()));
        }
        if self.descriptor_dim == 0 {
            return Err(CoreError::Config("descriptor_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Total downsampling factor `f`.
    pub fn factor(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn hidden(&self) -> usize {
        self.descriptor_hidden.unwrap_or(4 * self.descriptor_dim)
    }
}

/// Horizontal padding for a view: panoramas that wrap all the way round are
/// padded circularly.
pub fn horizontal_padding(view: View, hfov: f64) -> PadMode {
    match view {
        View::Ground if (hfov - std::f64::consts::TAU).abs() < 1e-9 => PadMode::Circular,
        _ => PadMode::Zero,
    }
}

/// Stack of 3x3 convolutions with ReLU between stages.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<Conv2d>,
    pub factor: usize,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut cin = cfg.in_channels;
        let mut stages = Vec::new();
        for (i, (&w, &s)) in cfg.widths.iter().zip(&cfg.strides).enumerate() {
            stages.push(Conv2d::new(
                store,
                rng,
                &format!("{name}.{i}"),
                cin,
                w,
                (3, 3),
                ConvSpec::same(s),
            ));
            cin = w;
        }
        Ok(Self {
            stages,
            factor: cfg.factor(),
        })
    }

    /// `(B, C_img, H, W)` images to `(B, C, H/f, W/f)` features.
    pub fn extract<'t>(&self, p: &Bound<'t>, images: Var<'t>, horizontal: PadMode) -> Result<Var<'t>> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(CoreError::Shape(format!("expected (B, C, H, W) images, got {s:?}")));
        }
        if s[2] % self.factor != 0 || s[3] % self.factor != 0 {
            return Err(CoreError::Shape(format!(
                "image size {}x{} is not divisible by the downsampling factor {}",
                s[2], s[3], self.factor
            )));
        }
        let last = self.stages.len() - 1;
        let mut x = images;
        for (i, conv) in self.stages.iter().enumerate() {
            let spec = conv.spec.with_horizontal(horizontal);
            x = x.conv2d(p.var(conv.weight), Some(p.var(conv.bias)), spec);
            if i < last {
                x = x.relu();
            }
        }
        Ok(x)
    }
}

/// Shared per-column MLP compressing `(C, H)` columns to `C_d` values.
#[derive(Clone, Debug)]
pub struct VerticalEncoder {
    pub mlp: Mlp,
    pub channels: usize,
    pub height: usize,
    pub descriptor_dim: usize,
}

impl VerticalEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        height: usize,
        hidden: usize,
        descriptor_dim: usize,
    ) -> Self {
        Self {
            mlp: Mlp::new(store, rng, name, &[channels * height, hidden, descriptor_dim]),
            channels,
            height,
            descriptor_dim,
        }
    }

    /// `(N, C, H, W)` to `(N, W * C_d)`, column `w` occupying entries
    /// `w * C_d .. (w + 1) * C_d`.
    pub fn encode<'t>(&self, p: &Bound<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let s = features.shape();
        if s.len() != 4 || s[1] != self.channels || s[2] != self.height {
            return Err(CoreError::Shape(format!(
                "vertical encoding expects (N, {}, {}, W), got {s:?}",
                self.channels, self.height
            )));
        }
        let (n, w) = (s[0], s[3]);
        let columns = features
            .permute(&[0, 3, 1, 2])
            .reshape(&[n * w, self.channels * self.height]);
        Ok(self
            .mlp
            .forward(p, columns)
            .reshape(&[n, w * self.descriptor_dim]))
    }
}

/// A detached descriptor with its column layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
    pub block: usize,
    pub view: View,
}

impl Descriptor {
    pub fn new(values: Vec<f64>, block: usize, view: View) -> Result<Self> {
        if block == 0 || values.len() % block != 0 {
            return Err(CoreError::Shape(format!(
                "descriptor of length {} is not a whole number of {block}-blocks",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Invalid("descriptor has non-finite entries".into()));
        }
        Ok(Self { values, block, view })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn columns(&self) -> usize {
        self.values.len() / self.block
    }

    /// Row `row` of an `(N, K)` tensor.
    pub fn from_row(t: &Tensor, row: usize, block: usize, view: View) -> Result<Self> {
        if t.ndim() != 2 || row >= t.dim(0) {
            return Err(CoreError::Shape(format!("no row {row} in {:?}", t.shape())));
        }
        let k = t.dim(1);
        Self::new(t.data()[row * k..(row + 1) * k].to_vec(), block, view)
    }
}

/// Entry indices selecting descriptor columns `cols` (in order) out of a
/// block layout with `block` values per column.
pub fn column_indices(cols: &[usize], block: usize) -> Vec<usize> {
    cols.iter()
        .flat_map(|&c| c * block..(c + 1) * block)
        .collect()
}

/// Gathers descriptor columns `cols` from every row of `(N, K)`.
pub fn select_columns<'t>(d: Var<'t>, cols: &[usize], block: usize) -> Var<'t> {
    let s = d.shape();
    let (n, k) = (s[0], s[1]);
    let per_row = column_indices(cols, block);
    let idx: Vec<usize> = (0..n)
        .flat_map(|r| per_row.iter().map(move |&i| r * k + i))
        .collect();
    d.gather(Rc::new(idx), &[n, per_row.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;

    #[test]
    fn default_shapes() {
        let cfg = EncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &mut rng, "g", &cfg).unwrap();
        let tape = Tape::inference();
        let p = store.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 32, 128]));
        assert_eq!(bb.extract(&p, x, PadMode::Circular).unwrap().shape(), vec![1, 16, 16, 64]);
        let odd = tape.constant(Tensor::zeros(&[1, 3, 33, 128]));
        assert!(bb.extract(&p, odd, PadMode::Zero).is_err());
    }

    #[test]
    fn deeper_factor_shapes() {
        let cfg = EncoderConfig {
            strides: vec![2, 2, 2],
            ..Default::default()
        };
        assert_eq!(cfg.factor(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &mut rng, "g", &cfg).unwrap();
        let tape = Tape::inference();
        let p = store.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 32, 128]));
        assert_eq!(bb.extract(&p, x, PadMode::Circular).unwrap().shape(), vec![1, 16, 4, 16]);
    }

    #[test]
    fn hand_set_column_mlp() {
        // C = 2, H_Q = 2, C_d = 1, hidden 4 with identity-like weights
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let ve = VerticalEncoder::new(&mut store, &mut rng, "v", 2, 2, 4, 1);
        let (l0, l1) = (&ve.mlp.layers[0], &ve.mlp.layers[1]);
        let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        store.get_mut(l0.weight).data_mut().copy_from_slice(&eye);
        store.get_mut(l0.bias).data_mut().fill(0.0);
        store.get_mut(l1.weight).data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        store.get_mut(l1.bias).data_mut()[0] = 0.5;
        let tape = Tape::inference();
        let p = store.bind(&tape, false);
        // f[c, h, w]
        let f = Tensor::new(&[1, 2, 2, 2], vec![1.0, -1.0, 2.0, 3.0, 0.5, 4.0, -2.0, 1.0]).unwrap();
        let d = ve.encode(&p, tape.constant(f.clone())).unwrap().value();
        for w in 0..2 {
            let col = [f.at(&[0, 0, 0, w]), f.at(&[0, 0, 1, w]), f.at(&[0, 1, 0, w]), f.at(&[0, 1, 1, w])];
            let expect: f64 = col
                .iter()
                .zip([1.0, 2.0, 3.0, 4.0])
                .map(|(v, wt)| v.max(0.0) * wt)
                .sum::<f64>()
                + 0.5;
            assert_eq!(d.at(&[0, w]), expect);
        }
    }

    #[test]
    fn single_column_descriptor_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ve = VerticalEncoder::new(&mut store, &mut rng, "v", 3, 2, 5, 7);
        let tape = Tape::inference();
        let p = store.bind(&tape, false);
        let d = ve.encode(&p, tape.constant(Tensor::zeros(&[2, 3, 2, 1]))).unwrap();
        assert_eq!(d.shape(), vec![2, 7]);
        assert!(ve.encode(&p, tape.constant(Tensor::zeros(&[2, 3, 3, 1]))).is_err());
    }

    #[test]
    fn descriptor_validation() {
        assert!(Descriptor::new(vec![0.0; 6], 4, View::Ground).is_err());
        assert!(Descriptor::new(vec![f64::NAN; 4], 4, View::Ground).is_err());
        let d = Descriptor::new(vec![0.0; 8], 4, View::Satellite).unwrap();
        assert_eq!(d.columns(), 2);
        assert_eq!(column_indices(&[1, 0], 2), vec![2, 3, 0, 1]);
    }
}
