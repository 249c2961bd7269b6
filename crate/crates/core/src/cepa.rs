//! Context-enhanced positional attention.
//!
//! Both views are projected onto a shared virtual vertical axis of `H_Q`
//! rows. For each view, attention from the shared-axis encodings (queries)
//! to that view's row encodings (keys) gives an `H_Q x H_K` weight matrix
//! that depends only on position. The ground weights are then refined per
//! azimuth column from the ground features: a small convolution stack looks
//! at the weights stacked with the features, its output is softmaxed over the
//! key rows and added back onto the positional weights. The resulting
//! weights remap every column of the feature maps onto the shared axis.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, PadMode, Tape, Var};
use crate::error::{CoreError, Result};
use crate::nn::{init_uniform, Bound, Conv2d, Linear, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeKind {
    /// Fixed sinusoidal table.
    #[default]
    Sinusoidal,
    /// Fixed sinusoidal table passed through a trainable `tanh(x W + b)`.
    SinusoidalLearnable,
    /// Free trainable table.
    Learnable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CepaConfig {
    /// Positional encoding width.
    pub d_p: usize,
    /// Query/key width.
    pub d_k: usize,
    /// Height of the shared axis; `None` uses the feature height.
    pub h_q: Option<usize>,
    pub pe_kind: PeKind,
    /// Hidden width of the context-enhancement convolutions.
    pub phi_hidden: usize,
    /// Apply attention at all. When off, features pass through unchanged.
    pub enabled: bool,
    /// Refine the ground weights with ground context.
    pub context_enhancement: bool,
}

impl Default for CepaConfig {
    fn default() -> Self {
        Self {
            d_p: 64,
            d_k: 32,
            h_q: None,
            pe_kind: PeKind::Sinusoidal,
            phi_hidden: 16,
            enabled: true,
            context_enhancement: true,
        }
    }
}

/// `pe[i, 2j] = sin(i / 10000^(2j/d_p))`, `pe[i, 2j+1] = cos(...)`.
pub fn sinusoidal_pe(length: usize, d_p: usize) -> Result<Tensor> {
    if d_p < 2 || d_p % 2 != 0 {
        return Err(CoreError::Config(format!(
            "positional encoding width must be even and >= 2, got {d_p}"
        )));
    }
    let mut pe = Tensor::zeros(&[length, d_p]);
    for i in 0..length {
        for j in 0..d_p / 2 {
            let angle = i as f64 / 10000f64.powf(2.0 * j as f64 / d_p as f64);
            pe.set(&[i, 2 * j], angle.sin());
            pe.set(&[i, 2 * j + 1], angle.cos());
        }
    }
    Ok(pe)
}

#[derive(Clone, Debug)]
enum Encoding {
    Fixed(Tensor),
    Projected { table: Tensor, proj: Linear },
    Free(ParamId),
}

impl Encoding {
    fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: PeKind,
        length: usize,
        d_p: usize,
    ) -> Result<Self> {
        let table = sinusoidal_pe(length, d_p)?;
        Ok(match kind {
            PeKind::Sinusoidal => Encoding::Fixed(table),
            PeKind::SinusoidalLearnable => Encoding::Projected {
                table,
                proj: Linear::new(store, rng, name, d_p, d_p),
            },
            PeKind::Learnable => {
                Encoding::Free(store.add(name, init_uniform(rng, &[length, d_p], 1)))
            }
        })
    }

    fn get<'t>(&self, tape: &'t Tape, p: &Bound<'t>) -> Var<'t> {
        match self {
            Encoding::Fixed(t) => tape.constant(t.clone()),
            Encoding::Projected { table, proj } => {
                proj.forward(p, tape.constant(table.clone())).tanh()
            }
            Encoding::Free(id) => p.var(*id),
        }
    }
}

/// Softmax over keys of `(P_a W_q)(P_v W_k)^T / sqrt(d_k)`.
pub fn positional_attention<'t>(
    p_a: Var<'t>,
    p_v: Var<'t>,
    w_q: Var<'t>,
    w_k: Var<'t>,
) -> Result<Var<'t>> {
    let (sa, sv, sq, sk) = (p_a.shape(), p_v.shape(), w_q.shape(), w_k.shape());
    if sa.len() != 2 || sv.len() != 2 || sa[1] != sq[0] || sv[1] != sk[0] || sq[1] != sk[1] {
        return Err(CoreError::Shape(format!(
            "positional attention: P_a {sa:?}, P_v {sv:?}, W_q {sq:?}, W_k {sk:?}"
        )));
    }
    let d_k = sq[1] as f64;
    let q = p_a.matmul(w_q);
    let k = p_v.matmul(w_k);
    Ok(q.matmul(k.permute(&[1, 0])).scale(1.0 / d_k.sqrt()).softmax(1))
}

/// Applies `(H_Q, H_K)` weights shared by every column:
/// `out[n, c, q, w] = sum_k a[q, k] * f[n, c, k, w]`.
pub fn vertical_transform_shared<'t>(features: Var<'t>, weights: Var<'t>) -> Result<Var<'t>> {
    let (f, a) = (features.value(), weights.value());
    if f.ndim() != 4 || a.ndim() != 2 || a.dim(1) != f.dim(2) {
        return Err(CoreError::Shape(format!(
            "vertical transform: features {:?}, weights {:?}",
            f.shape(),
            a.shape()
        )));
    }
    let (n, c, hk, w) = (f.dim(0), f.dim(1), f.dim(2), f.dim(3));
    let hq = a.dim(0);
    let mut out = vec![0.0; n * c * hq * w];
    for (src, dst) in f.data().chunks(hk * w).zip(out.chunks_mut(hq * w)) {
        gemm(hq, hk, w, 1.0, a.data(), false, src, false, 0.0, dst);
    }
    Ok(features.tape().op(
        Tensor::from_parts(vec![n, c, hq, w], out),
        &[features, weights],
        move |g, mask| {
            let mut df = mask[0].then(|| vec![0.0; n * c * hk * w]);
            let mut da = mask[1].then(|| vec![0.0; hq * hk]);
            for (i, go) in g.data().chunks(hq * w).enumerate() {
                if let Some(df) = df.as_mut() {
                    gemm(hk, hq, w, 1.0, a.data(), true, go, false, 0.0, &mut df[i * hk * w..(i + 1) * hk * w]);
                }
                if let Some(da) = da.as_mut() {
                    let fi = &f.data()[i * hk * w..(i + 1) * hk * w];
                    gemm(hq, w, hk, 1.0, go, false, fi, true, 1.0, da);
                }
            }
            vec![
                df.map(|d| Tensor::from_parts(vec![n, c, hk, w], d)),
                da.map(|d| Tensor::from_parts(vec![hq, hk], d)),
            ]
        },
    ))
}

/// Applies per-column weights `(B, H_Q, H_K, W)`:
/// `out[b, c, q, w] = sum_k a[b, q, k, w] * f[b, c, k, w]`.
pub fn vertical_transform_per_column<'t>(features: Var<'t>, weights: Var<'t>) -> Result<Var<'t>> {
    let (f, a) = (features.value(), weights.value());
    if f.ndim() != 4
        || a.ndim() != 4
        || a.dim(0) != f.dim(0)
        || a.dim(2) != f.dim(2)
        || a.dim(3) != f.dim(3)
    {
        return Err(CoreError::Shape(format!(
            "vertical transform: features {:?}, weights {:?}",
            f.shape(),
            a.shape()
        )));
    }
    let (b, c, hk, w) = (f.dim(0), f.dim(1), f.dim(2), f.dim(3));
    let hq = a.dim(1);
    let (fd, ad) = (f.data(), a.data());
    let fi = move |bi: usize, ci: usize, k: usize| ((bi * c + ci) * hk + k) * w;
    let ai = move |bi: usize, q: usize, k: usize| ((bi * hq + q) * hk + k) * w;
    let oi = move |bi: usize, ci: usize, q: usize| ((bi * c + ci) * hq + q) * w;
    let mut out = vec![0.0; b * c * hq * w];
    for bi in 0..b {
        for ci in 0..c {
            for q in 0..hq {
                let o = &mut out[oi(bi, ci, q)..oi(bi, ci, q) + w];
                for k in 0..hk {
                    let (fr, ar) = (&fd[fi(bi, ci, k)..][..w], &ad[ai(bi, q, k)..][..w]);
                    for ((ov, fv), av) in o.iter_mut().zip(fr).zip(ar) {
                        *ov += av * fv;
                    }
                }
            }
        }
    }
    Ok(features.tape().op(
        Tensor::from_parts(vec![b, c, hq, w], out),
        &[features, weights],
        move |g, mask| {
            let (fd, ad, gd) = (f.data(), a.data(), g.data());
            let mut df = mask[0].then(|| vec![0.0; fd.len()]);
            let mut da = mask[1].then(|| vec![0.0; ad.len()]);
            for bi in 0..b {
                for ci in 0..c {
                    for q in 0..hq {
                        let gr = &gd[oi(bi, ci, q)..][..w];
                        for k in 0..hk {
                            if let Some(df) = df.as_mut() {
                                let ar = &ad[ai(bi, q, k)..][..w];
                                for ((d, gv), av) in df[fi(bi, ci, k)..][..w].iter_mut().zip(gr).zip(ar) {
                                    *d += gv * av;
                                }
                            }
                            if let Some(da) = da.as_mut() {
                                let fr = &fd[fi(bi, ci, k)..][..w];
                                for ((d, gv), fv) in da[ai(bi, q, k)..][..w].iter_mut().zip(gr).zip(fr) {
                                    *d += gv * fv;
                                }
                            }
                        }
                    }
                }
            }
            vec![
                df.map(|d| Tensor::from_parts(f.shape().to_vec(), d)),
                da.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
            ]
        },
    ))
}

/// Flat indices broadcasting `src` of shape `(n, rest)` along new axes so
/// that output element `(i, j, r)` of shape `(outer, inner, rest)` reads
/// `src[pick(i, j), r]`.
fn broadcast_rows(
    outer: usize,
    inner: usize,
    rest: usize,
    pick: impl Fn(usize, usize) -> usize,
) -> Rc<Vec<usize>> {
    let mut idx = Vec::with_capacity(outer * inner * rest);
    for i in 0..outer {
        for j in 0..inner {
            let base = pick(i, j) * rest;
            idx.extend(base..base + rest);
        }
    }
    Rc::new(idx)
}

/// Trainable state of the attention block.
#[derive(Clone, Debug)]
pub struct Cepa {
    pub config: CepaConfig,
    pub h_q: usize,
    pub h_k: usize,
    pub channels: usize,
    p_a: Encoding,
    p_g: Encoding,
    p_s2p: Encoding,
    pub w_q_g: ParamId,
    pub w_k_g: ParamId,
    pub w_q_s2p: ParamId,
    pub w_k_s2p: ParamId,
    /// First context convolution over `[A_g ; F_g]` (`C + 1` input channels).
    pub phi_in: Conv2d,
    pub phi_out: Conv2d,
}

/// Everything the ground path produces, kept for inspection.
pub struct GroundAttention<'t> {
    /// Positional weights `(H_Q, H_K)`.
    pub positional: Var<'t>,
    /// Context-enhanced weights `(B, H_Q, H_K, W)` when enabled.
    pub enhanced: Option<Var<'t>>,
    /// `(B, C, H_Q, W)`.
    pub transformed: Var<'t>,
}

pub struct SatelliteAttention<'t> {
    pub positional: Var<'t>,
    pub transformed: Var<'t>,
}

impl Cepa {
    /// `horizontal` is the padding used by the context convolutions along
    /// the azimuth axis of the ground features.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        config: &CepaConfig,
        channels: usize,
        height: usize,
        horizontal: PadMode,
    ) -> Result<Self> {
        let h_q = config.h_q.unwrap_or(height);
        if h_q == 0 || height == 0 || channels == 0 || config.d_k == 0 {
            return Err(CoreError::Config("attention sizes must be positive".into()));
        }
        let d_p = config.d_p;
        let p_a = Encoding::build(store, rng, "cepa.p_a", config.pe_kind, h_q, d_p)?;
        let p_g = Encoding::build(store, rng, "cepa.p_g", config.pe_kind, height, d_p)?;
        let p_s2p = Encoding::build(store, rng, "cepa.p_s2p", config.pe_kind, height, d_p)?;
        let mut proj = |name: &str| store.add(name, init_uniform(rng, &[d_p, config.d_k], d_p));
        let w_q_g = proj("cepa.w_q_g");
        let w_k_g = proj("cepa.w_k_g");
        let w_q_s2p = proj("cepa.w_q_s2p");
        let w_k_s2p = proj("cepa.w_k_s2p");
        let spec = ConvSpec::same(1).with_horizontal(horizontal);
        let phi_in = Conv2d::new(store, rng, "cepa.phi.0", channels + 1, config.phi_hidden, (3, 3), spec);
        let phi_out = Conv2d::new(store, rng, "cepa.phi.1", config.phi_hidden, 1, (3, 3), spec);
        Ok(Self {
            config: config.clone(),
            h_q,
            h_k: height,
            channels,
            p_a,
            p_g,
            p_s2p,
            w_q_g,
            w_k_g,
            w_q_s2p,
            w_k_s2p,
            phi_in,
            phi_out,
        })
    }

    /// `(P_a, P_g, P_s2p)`.
    pub fn encodings<'t>(&self, tape: &'t Tape, p: &Bound<'t>) -> (Var<'t>, Var<'t>, Var<'t>) {
        (
            self.p_a.get(tape, p),
            self.p_g.get(tape, p),
            self.p_s2p.get(tape, p),
        )
    }

    pub fn ground_weights<'t>(&self, tape: &'t Tape, p: &Bound<'t>) -> Result<Var<'t>> {
        let (p_a, p_g, _) = self.encodings(tape, p);
        positional_attention(p_a, p_g, p.var(self.w_q_g), p.var(self.w_k_g))
    }

    pub fn satellite_weights<'t>(&self, tape: &'t Tape, p: &Bound<'t>) -> Result<Var<'t>> {
        let (p_a, _, p_s2p) = self.encodings(tape, p);
        positional_attention(p_a, p_s2p, p.var(self.w_q_s2p), p.var(self.w_k_s2p))
    }

    /// Refines `(H_Q, H_K)` ground weights with `(B, C, H_K, W)` ground
    /// features into `(B, H_Q, H_K, W)`; every `(b, q, w)` slice sums to 2.
    ///
    /// The first context convolution acts on the concatenation
    /// `[A_g ; F_g]`. Convolution is linear in its input channels, so it is
    /// evaluated as the weight-channel part applied to each broadcast `A_g`
    /// row plus the feature part applied once per batch element.
    pub fn context_enhance<'t>(
        &self,
        p: &Bound<'t>,
        a_g: Var<'t>,
        f_g: Var<'t>,
    ) -> Result<Var<'t>> {
        let (sa, sf) = (a_g.shape(), f_g.shape());
        if sf.len() != 4 || sf[1] != self.channels || sa.len() != 2 || sa[1] != sf[2] {
            return Err(CoreError::Shape(format!(
                "context enhancement: weights {sa:?}, features {sf:?}, expected {} channels",
                self.channels
            )));
        }
        let (b, hk, w) = (sf[0], sf[2], sf[3]);
        let hq = sa[0];
        let hidden = self.config.phi_hidden;
        // A_g broadcast over width: (H_Q, 1, H_K, W)
        let a_map = a_g.gather(
            broadcast_rows(hq * hk, w, 1, |qk, _| qk),
            &[hq, 1, hk, w],
        );
        let weight = p.var(self.phi_in.weight);
        let w_attn = weight.narrow(1, 0, 1);
        let w_feat = weight.narrow(1, 1, self.channels);
        let from_attn = a_map.conv2d(w_attn, None, self.phi_in.spec); // (H_Q, hidden, H_K, W)
        let from_feat = f_g.conv2d(w_feat, Some(p.var(self.phi_in.bias)), self.phi_in.spec); // (B, hidden, H_K, W)
        let plane = hidden * hk * w;
        let attn_b = from_attn.gather(broadcast_rows(b, hq, plane, |_, q| q), &[b * hq, hidden, hk, w]);
        let feat_b = from_feat.gather(broadcast_rows(b, hq, plane, |bi, _| bi), &[b * hq, hidden, hk, w]);
        let hidden_act = attn_b.add(feat_b).relu();
        let logits = self.phi_out.forward(p, hidden_act).reshape(&[b, hq, hk, w]);
        let residual = logits.softmax(2);
        let base = a_map.gather(broadcast_rows(b, hq * hk * w, 1, |_, j| j), &[b, hq, hk, w]);
        Ok(residual.add(base))
    }

    /// Ground path: `(B, C, H_K, W)` -> `(B, C, H_Q, W)`.
    pub fn ground<'t>(&self, tape: &'t Tape, p: &Bound<'t>, f_g: Var<'t>) -> Result<GroundAttention<'t>> {
        let positional = self.ground_weights(tape, p)?;
        if self.config.context_enhancement {
            let enhanced = self.context_enhance(p, positional, f_g)?;
            let transformed = vertical_transform_per_column(f_g, enhanced)?;
            Ok(GroundAttention {
                positional,
                enhanced: Some(enhanced),
                transformed,
            })
        } else {
            let transformed = vertical_transform_shared(f_g, positional)?;
            Ok(GroundAttention {
                positional,
                enhanced: None,
                transformed,
            })
        }
    }

    /// Satellite path: `(P, C, H_K, W_s)` -> `(P, C, H_Q, W_s)`.
    pub fn satellite<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        f_s2p: Var<'t>,
    ) -> Result<SatelliteAttention<'t>> {
        let positional = self.satellite_weights(tape, p)?;
        let transformed = vertical_transform_shared(f_s2p, positional)?;
        Ok(SatelliteAttention {
            positional,
            transformed,
        })
    }
}
