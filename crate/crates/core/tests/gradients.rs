use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vird_core::cepa::{Cepa, CepaConfig, PeKind};
use vird_core::encoder::VerticalEncoder;
use vird_core::geometry::polar_transform_var;
use vird_core::gradcheck::{check, GradCheck};
use vird_core::nn::{Bound, ParamStore};
use vird_core::posesearch::{infonce_loss, regression_loss, similarity_scores, RegressionConfig, Regressor};
use vird_core::reconstruction::{Decoder, ImageShape};
use vird_core::{ImageFrame, PadMode, PolarConfig, Pose, Tape, Tensor, Var};

const LIMIT: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn assert_ok(name: &str, r: GradCheck) {
    assert!(r.checked > 0);
    assert!(r.max_rel_err < LIMIT, "{name}: {r:?}");
}

/// Checks a scalar function of every parameter in `store` plus `extra`
/// inputs, which are passed after the parameters.
fn check_with_params<F>(store: &ParamStore, extra: &[Tensor], f: F) -> GradCheck
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>, &[Var<'t>]) -> Var<'t>,
{
    let n = store.len();
    let mut inputs = store.values().to_vec();
    inputs.extend_from_slice(extra);
    check(&inputs, 1e-6, 40, |tape, vars| {
        let p = Bound::from_vars(vars[..n].to_vec());
        f(tape, &p, &vars[n..])
    })
}

/// Weighted sum with fixed pseudo-random weights, so every output entry
/// reaches the loss with a distinct factor.
fn probe<'t>(tape: &'t Tape, x: Var<'t>, seed: u64) -> Var<'t> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    x.mul(tape.constant(random(&x.shape(), &mut rng))).sum()
}

#[test]
fn cepa_block() {
    for kind in [PeKind::Sinusoidal, PeKind::SinusoidalLearnable, PeKind::Learnable] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = CepaConfig {
            d_p: 4,
            d_k: 3,
            h_q: Some(2),
            pe_kind: kind,
            phi_hidden: 3,
            ..Default::default()
        };
        let cepa = Cepa::new(&mut store, &mut rng, &cfg, 2, 3, PadMode::Circular).unwrap();
        let f_g = random(&[1, 2, 3, 4], &mut rng);
        let f_s = random(&[2, 2, 3, 4], &mut rng);
        let r = check_with_params(&store, &[f_g, f_s], |tape, p, x| {
            let g = cepa.ground(tape, p, x[0]).unwrap().transformed;
            let s = cepa.satellite(tape, p, x[1]).unwrap().transformed;
            probe(tape, g, 2).add(probe(tape, s, 3))
        });
        assert_ok("cepa", r);
    }
}

#[test]
fn cepa_without_context() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let cfg = CepaConfig {
        d_p: 4,
        d_k: 2,
        context_enhancement: false,
        ..Default::default()
    };
    let cepa = Cepa::new(&mut store, &mut rng, &cfg, 2, 3, PadMode::Zero).unwrap();
    let f_g = random(&[2, 2, 3, 3], &mut rng);
    let r = check_with_params(&store, &[f_g], |tape, p, x| {
        probe(tape, cepa.ground(tape, p, x[0]).unwrap().transformed, 5)
    });
    assert_ok("cepa without context", r);
}

#[test]
fn polar_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let frame = ImageFrame::new(1.0, 9, 9).unwrap();
    let cfg = PolarConfig::new(0.5, 3.7, 4, 6, TAU).unwrap();
    let sat = random(&[2, 9, 9], &mut rng);
    let r = check(&[sat], 1e-6, 200, |tape, x| {
        let out = polar_transform_var(x[0], &[(4.3, 3.9), (5.1, 4.6)], &cfg, &frame).unwrap();
        probe(tape, out, 7)
    });
    assert_ok("polar", r);
}

#[test]
fn vertical_encoding() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let ve = VerticalEncoder::new(&mut store, &mut rng, "v", 2, 3, 5, 2);
    let f = random(&[2, 2, 3, 4], &mut rng);
    let r = check_with_params(&store, &[f], |tape, p, x| probe(tape, ve.encode(p, x[0]).unwrap(), 9));
    assert_ok("vertical encoding", r);
}

#[test]
fn decoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let target = ImageShape {
        channels: 2,
        height: 4,
        width: 6,
    };
    let dec = Decoder::new(&mut store, &mut rng, "d", 2, 3, 3, target, PadMode::Circular).unwrap();
    let d = random(&[1, 6], &mut rng);
    let r = check_with_params(&store, &[d], |_, p, x| dec.decode(p, x[0]).unwrap().mean());
    assert_ok("decoder mean", r);
    let r = check_with_params(&store, &[random(&[2, 6], &mut rng)], |tape, p, x| {
        probe(tape, dec.decode(p, x[0]).unwrap(), 11)
    });
    assert_ok("decoder", r);
}

#[test]
fn infonce_through_similarity() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d_g = random(&[8], &mut rng);
    let d_s = random(&[3, 8], &mut rng);
    let thetas: Vec<f64> = (0..4).map(|k| -std::f64::consts::PI + TAU * k as f64 / 4.0).collect();
    let r = check(&[d_g, d_s], 1e-6, 40, |_, x| {
        let s = similarity_scores(x[0], x[1], &thetas, 2).unwrap();
        infonce_loss(s, 5, 0.05).unwrap()
    });
    assert_ok("infonce", r);
}

#[test]
fn regression_head_and_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let cfg = RegressionConfig {
        conv_widths: vec![3, 2],
        hidden: 4,
        ..Default::default()
    };
    let reg = Regressor::new(&mut store, &mut rng, &cfg, 2, 4, 8.0, PadMode::Circular).unwrap();
    // the zero-initialised head would hide every upstream gradient
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).starts_with("reg.head.1") {
            *store.get_mut(id) = random(store.get(id).shape(), &mut rng);
        }
    }
    let poses = [Pose::new(1.0, -3.0, 0.4), Pose::new(-2.0, 0.5, 2.9)];
    // targets far outside the tanh range keep |pred - target| away from its kink
    let target = Tensor::new(&[2, 3], vec![9.0, -9.0, 1.0, -9.0, 9.0, -1.0]).unwrap();
    let r = check_with_params(
        &store,
        &[random(&[2, 8], &mut rng), random(&[2, 8], &mut rng)],
        |tape, p, x| {
            let out = reg.forward(tape, p, x[0], x[1], &poses).unwrap();
            regression_loss(out, &target, 5.0).unwrap()
        },
    );
    assert_ok("regression", r);
    let r = check(&[Tensor::new(&[1, 3], vec![0.3, -0.2, 0.05]).unwrap()], 1e-6, 10, |_, x| {
        regression_loss(x[0], &Tensor::new(&[1, 3], vec![-0.1, 0.4, 0.0]).unwrap(), 5.0).unwrap()
    });
    assert_ok("regression loss", r);
}
