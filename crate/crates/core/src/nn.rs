//! Parameter storage, basic layers and the Adam optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvSpec, Gradients, Tape, Var};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces every value with the one of the same name in `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(CoreError::Config(format!(
                "parameter set mismatch: expected {} tensors, found {}",
                self.names.len(),
                other.names.len()
            )));
        }
        for (i, (mine, theirs)) in self.values.iter_mut().zip(&other.values).enumerate() {
            if mine.shape() != theirs.shape() {
                return Err(CoreError::Shape(format!(
                    "parameter {}: {:?} vs {:?}",
                    self.names[i],
                    mine.shape(),
                    theirs.shape()
                )));
            }
            *mine = theirs.clone();
        }
        Ok(())
    }

    /// Records every parameter on `tape`, as differentiable leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters recorded on a tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Uses `vars` as the parameters, in store order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradient per parameter, zeros where the loss does not depend on it.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&v.shape()))
            })
            .collect()
    }
}

/// Uniform initialisation in `±1/sqrt(fan_in)`.
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, &[fan_out, fan_in], fan_in),
        );
        let bias = store.add(format!("{name}.bias"), init_uniform(rng, &[fan_out], fan_in));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.linear(p.var(self.weight), Some(p.var(self.bias)))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

/// Fully connected layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, mut x: Var<'t>) -> Var<'t> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(p, x);
            if i < last {
                x = x.relu();
            }
        }
        x
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        spec: ConvSpec,
    ) -> Self {
        let fan_in = cin * kernel.0 * kernel.1;
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, &[cout, cin, kernel.0, kernel.1], fan_in),
        );
        let bias = store.add(format!("{name}.bias"), init_uniform(rng, &[cout], fan_in));
        Self { weight, bias, spec }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.conv2d(p.var(self.weight), Some(p.var(self.bias)), self.spec)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

/// Adaptive-moment gradient descent.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.values.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.values.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in store
            .values
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
