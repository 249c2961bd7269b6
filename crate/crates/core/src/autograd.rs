//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every recorded value that needs
//! one. Operations that are specific to a model component (the polar
//! resampler, the vertical feature transform) are built on
//! [`Tape::op`] next to the code that defines them.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{gemm, split_axis, Tensor};

/// Maps the gradient of an op's output to gradients of its parents. The
/// mask says which parents actually need one; entries for the others may be
/// `None`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward closures.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: self.grad_enabled,
        });
        Var { tape: self, id }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var { tape: self, id }
    }

    /// Records an operation. `backward` receives the output gradient and a
    /// mask of which parents require gradients.
    pub fn op<'t, F>(&'t self, value: Tensor, parents: &[Var<'t>], backward: F) -> Var<'t>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| p.requires_grad());
        let id = self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let root_value = &nodes[root.id].value;
        assert_eq!(root_value.numel(), 1, "backward() needs a scalar root");
        grads[root.id] = Some(Tensor::full(root_value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), &needed) in node.parents.iter().zip(parent_grads).zip(&mask) {
                let (Some(g), true) = (g, needed) else {
                    continue;
                };
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // keep leaf grads, drop intermediate ones
            if node.parents.is_empty() {
                grads[id] = Some(grad);
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Padding behaviour along one spatial axis of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    Zero,
    Circular,
}

/// Geometry of a "same"-padded 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub pad_vertical: PadMode,
    pub pad_horizontal: PadMode,
}

impl ConvSpec {
    pub fn same(stride: usize) -> Self {
        Self {
            stride: (stride, stride),
            pad_vertical: PadMode::Zero,
            pad_horizontal: PadMode::Zero,
        }
    }

    pub fn with_horizontal(mut self, mode: PadMode) -> Self {
        self.pad_horizontal = mode;
        self
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    // ---- elementwise ----

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape
            .op(out, &[*self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape.op(out, &[*self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.op(out, &[*self, other], move |g, mask| {
            vec![
                mask[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                mask[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
            ]
        })
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.tape.op(out, &[*self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.tape.op(out, &[*self], |g, _| vec![Some(g.clone())])
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v.max(0.0));
        self.tape.op(out, &[*self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }))]
        })
    }

    pub fn tanh(&self) -> Var<'t> {
        let y = Rc::new(self.value().map(f64::tanh));
        let y2 = y.clone();
        self.tape.op((*y).clone(), &[*self], move |g, _| {
            vec![Some(g.zip_map(&y2, |gv, yv| gv * (1.0 - yv * yv)))]
        })
    }

    pub fn exp(&self) -> Var<'t> {
        let y = Rc::new(self.value().map(f64::exp));
        let y2 = y.clone();
        self.tape.op((*y).clone(), &[*self], move |g, _| {
            vec![Some(g.zip_map(&y2, |gv, yv| gv * yv))]
        })
    }

    pub fn ln(&self) -> Var<'t> {
        let x = self.value();
        let out = x.map(f64::ln);
        self.tape.op(out, &[*self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| gv / xv))]
        })
    }

    /// Elementwise absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&self) -> Var<'t> {
        let x = self.value();
        let out = x.map(f64::abs);
        self.tape.op(out, &[*self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| gv * sign(xv)))]
        })
    }

    // ---- reductions ----

    pub fn sum(&self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.tape
            .op(out, &[*self], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `log(sum(exp(x)))` over all elements, computed stably.
    pub fn logsumexp(&self) -> Var<'t> {
        let x = self.value();
        let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = x.data().iter().map(|v| (v - m).exp()).sum();
        let lse = m + s.ln();
        self.tape.op(Tensor::scalar(lse), &[*self], move |g, _| {
            let gv = g.item();
            vec![Some(x.map(|v| gv * (v - lse).exp()))]
        })
    }

    // ---- shape ----

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = x.reshape(shape).expect("reshape: element count");
        self.tape
            .op(out, &[*self], move |g, _| vec![Some(g.reshape(&old).unwrap())])
    }

    /// `out[i] = self[indices[i]]` over flat offsets, producing `shape`.
    /// Covers permutations, crops, cyclic shifts and broadcasts; the
    /// backward pass scatter-adds.
    pub fn gather(&self, indices: Rc<Vec<usize>>, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let n: usize = shape.iter().product();
        assert_eq!(indices.len(), n, "gather: index count vs shape");
        let src = x.data();
        let data: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        let in_shape = x.shape().to_vec();
        self.tape
            .op(Tensor::from_parts(shape.to_vec(), data), &[*self], move |g, _| {
                let mut dx = Tensor::zeros(&in_shape);
                let d = dx.data_mut();
                for (&i, &gv) in indices.iter().zip(g.data()) {
                    d[i] += gv;
                }
                vec![Some(dx)]
            })
    }

    /// Reorders axes; `axes[i]` names the input axis that becomes output axis `i`.
    pub fn permute(&self, axes: &[usize]) -> Var<'t> {
        let shape = self.shape();
        let (indices, out_shape) = permute_indices(&shape, axes);
        self.gather(Rc::new(indices), &out_shape)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let shape = self.shape();
        let (outer, size, inner) = split_axis(&shape, axis);
        assert!(start + len <= size, "narrow out of range");
        let mut indices = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for l in start..start + len {
                let base = (o * size + l) * inner;
                indices.extend(base..base + inner);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.gather(Rc::new(indices), &out_shape)
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        for v in &values {
            assert_eq!(v.ndim(), base.len(), "concat: rank");
            for (ax, (&a, &b)) in v.shape().iter().zip(&base).enumerate() {
                assert!(ax == axis || a == b, "concat: shape mismatch on axis {ax}");
            }
        }
        let lens: Vec<usize> = values.iter().map(|v| v.dim(axis)).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        tape.op(Tensor::from_parts(out_shape, data), parts, move |g, mask| {
            let gd = g.data();
            let mut outs: Vec<Vec<f64>> = shapes
                .iter()
                .map(|s| Vec::with_capacity(s.iter().product()))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (out, &l) in outs.iter_mut().zip(&lens) {
                    out.extend_from_slice(&gd[off..off + l * inner]);
                    off += l * inner;
                }
            }
            outs.into_iter()
                .zip(&shapes)
                .zip(mask)
                .map(|((d, s), &m)| m.then(|| Tensor::from_parts(s.clone(), d)))
                .collect()
        })
    }

    // ---- linear algebra ----

    /// `(m, k) @ (k, n)`.
    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert!(a.ndim() == 2 && b.ndim() == 2, "matmul needs matrices");
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        assert_eq!(k, b.dim(0), "matmul inner dimension");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, a.data(), false, b.data(), false, 0.0, &mut out);
        self.tape.op(
            Tensor::from_parts(vec![m, n], out),
            &[*self, other],
            move |g, mask| {
                let da = mask[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), false, b.data(), true, 0.0, &mut d);
                    Tensor::from_parts(vec![m, k], d)
                });
                let db = mask[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, a.data(), true, g.data(), false, 0.0, &mut d);
                    Tensor::from_parts(vec![k, n], d)
                });
                vec![da, db]
            },
        )
    }

    /// `x @ w^T + b` with `x: (n, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&self, weight: Var<'t>, bias: Option<Var<'t>>) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        let (n, fan_in) = (x.dim(0), x.dim(1));
        let fan_out = w.dim(0);
        assert_eq!(w.dim(1), fan_in, "linear: weight fan-in");
        let mut out = vec![0.0; n * fan_out];
        if let Some(b) = &bias {
            let bv = b.value();
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(n, fan_in, fan_out, 1.0, x.data(), false, w.data(), true, 1.0, &mut out);
        let mut parents = vec![*self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.tape.op(
            Tensor::from_parts(vec![n, fan_out], out),
            &parents,
            move |g, mask| {
                let dx = mask[0].then(|| {
                    let mut d = vec![0.0; n * fan_in];
                    gemm(n, fan_out, fan_in, 1.0, g.data(), false, w.data(), false, 0.0, &mut d);
                    Tensor::from_parts(vec![n, fan_in], d)
                });
                let dw = mask[1].then(|| {
                    let mut d = vec![0.0; fan_out * fan_in];
                    gemm(fan_out, n, fan_in, 1.0, g.data(), true, x.data(), false, 0.0, &mut d);
                    Tensor::from_parts(vec![fan_out, fan_in], d)
                });
                let mut grads = vec![dx, dw];
                if mask.len() == 3 {
                    grads.push(mask[2].then(|| {
                        let mut d = vec![0.0; fan_out];
                        for row in g.data().chunks(fan_out) {
                            for (acc, v) in d.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        Tensor::from_parts(vec![fan_out], d)
                    }));
                }
                grads
            },
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Var<'t> {
        let x = self.value();
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut y = vec![0.0; x.numel()];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| xd[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for l in 0..len {
                    let e = (xd[at(l)] - m).exp();
                    y[at(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    y[at(l)] /= s;
                }
            }
        }
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let y2 = y.clone();
        self.tape.op((*y).clone(), &[*self], move |g, _| {
            let (yd, gd) = (y2.data(), g.data());
            let mut dx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| yd[at(l)] * gd[at(l)]).sum();
                    for l in 0..len {
                        dx[at(l)] = yd[at(l)] * (gd[at(l)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(y2.shape().to_vec(), dx))]
        })
    }

    /// Scales every row of a `(rows, k)` matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&self) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "l2_normalize_rows needs a matrix");
        let k = x.dim(1);
        let norms: Vec<f64> = x
            .data()
            .chunks(k)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
            .collect();
        let mut y = x.data().to_vec();
        for (row, &nrm) in y.chunks_mut(k).zip(&norms) {
            for v in row {
                *v /= nrm;
            }
        }
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let y2 = y.clone();
        self.tape.op((*y).clone(), &[*self], move |g, _| {
            let mut dx = vec![0.0; y2.numel()];
            for (((dr, yr), gr), &nrm) in dx
                .chunks_mut(k)
                .zip(y2.data().chunks(k))
                .zip(g.data().chunks(k))
                .zip(&norms)
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = (gv - yv * dot) / nrm;
                }
            }
            vec![Some(Tensor::from_parts(y2.shape().to_vec(), dx))]
        })
    }

    // ---- convolution ----

    /// Same-padded 2-D convolution of `(N, C_in, H, W)` with a
    /// `(C_out, C_in, kh, kw)` kernel of odd size.
    pub fn conv2d(&self, weight: Var<'t>, bias: Option<Var<'t>>, spec: ConvSpec) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        assert_eq!(x.ndim(), 4, "conv2d input must be NCHW");
        assert_eq!(w.ndim(), 4, "conv2d kernel must be OIHW");
        let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (cout, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        assert_eq!(w.dim(1), cin, "conv2d channel mismatch");
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d kernel must be odd");
        let table = Rc::new(ConvTable::new(h, wd, kh, kw, spec));
        let (ho, wo) = (table.out_h, table.out_w);
        let hw_in = h * wd;
        let hw_out = ho * wo;
        let kk = cin * kh * kw;
        let mut out = vec![0.0; n * cout * hw_out];
        let mut cols = vec![0.0; kk * hw_out];
        let bias_val = bias.map(|b| b.value());
        for b in 0..n {
            table.im2col(&x.data()[b * cin * hw_in..(b + 1) * cin * hw_in], cin, &mut cols);
            let o = &mut out[b * cout * hw_out..(b + 1) * cout * hw_out];
            if let Some(bv) = &bias_val {
                for (co, chunk) in o.chunks_mut(hw_out).enumerate() {
                    chunk.fill(bv.data()[co]);
                }
            }
            gemm(cout, kk, hw_out, 1.0, w.data(), false, &cols, false, 1.0, o);
        }
        let mut parents = vec![*self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let in_shape = x.shape().to_vec();
        let w_shape = w.shape().to_vec();
        self.tape.op(
            Tensor::from_parts(vec![n, cout, ho, wo], out),
            &parents,
            move |g, mask| {
                let gd = g.data();
                let mut dx = mask[0].then(|| vec![0.0; n * cin * hw_in]);
                let mut dw = mask[1].then(|| vec![0.0; cout * kk]);
                let mut cols = vec![0.0; kk * hw_out];
                let mut dcols = vec![0.0; kk * hw_out];
                for b in 0..n {
                    let go = &gd[b * cout * hw_out..(b + 1) * cout * hw_out];
                    if let Some(dw) = dw.as_mut() {
                        table.im2col(&x.data()[b * cin * hw_in..(b + 1) * cin * hw_in], cin, &mut cols);
                        gemm(cout, hw_out, kk, 1.0, go, false, &cols, true, 1.0, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(kk, cout, hw_out, 1.0, w.data(), true, go, false, 0.0, &mut dcols);
                        table.col2im(&dcols, cin, &mut dx[b * cin * hw_in..(b + 1) * cin * hw_in]);
                    }
                }
                let mut grads = vec![
                    dx.map(|d| Tensor::from_parts(in_shape.clone(), d)),
                    dw.map(|d| Tensor::from_parts(w_shape.clone(), d)),
                ];
                if mask.len() == 3 {
                    grads.push(mask[2].then(|| {
                        let mut db = vec![0.0; cout];
                        for b in 0..n {
                            for (co, acc) in db.iter_mut().enumerate() {
                                let s = (b * cout + co) * hw_out;
                                *acc += gd[s..s + hw_out].iter().sum::<f64>();
                            }
                        }
                        Tensor::from_parts(vec![cout], db)
                    }));
                }
                grads
            },
        )
    }

    /// Nearest-neighbour upsampling of `(N, C, H, W)` by integer factors.
    pub fn upsample_nearest(&self, sy: usize, sx: usize) -> Var<'t> {
        let shape = self.shape();
        assert_eq!(shape.len(), 4, "upsample needs NCHW");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (ho, wo) = (h * sy, w * sx);
        let mut indices = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            for y in 0..ho {
                for x in 0..wo {
                    indices.push((plane * h + y / sy) * w + x / sx);
                }
            }
        }
        self.gather(Rc::new(indices), &[n, c, ho, wo])
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Flat gather indices implementing an axis permutation.
pub fn permute_indices(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    assert_eq!(shape.len(), axes.len(), "permute rank");
    let nd = shape.len();
    let mut strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut indices = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    for _ in 0..n {
        indices.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (indices, out_shape)
}

/// Precomputed source offsets for im2col over one `H x W` plane.
struct ConvTable {
    out_h: usize,
    out_w: usize,
    plane: usize,
    kk: usize,
    /// `kh*kw*out_h*out_w` offsets into the input plane, `usize::MAX` for padding.
    src: Vec<usize>,
}

impl ConvTable {
    fn new(h: usize, w: usize, kh: usize, kw: usize, spec: ConvSpec) -> Self {
        let (sy, sx) = spec.stride;
        let (ph, pw) = (kh / 2, kw / 2);
        let out_h = (h + 2 * ph - kh) / sy + 1;
        let out_w = (w + 2 * pw - kw) / sx + 1;
        let resolve = |i: isize, len: usize, mode: PadMode| -> Option<usize> {
            if i >= 0 && (i as usize) < len {
                Some(i as usize)
            } else {
                match mode {
                    PadMode::Zero => None,
                    PadMode::Circular => Some(i.rem_euclid(len as isize) as usize),
                }
            }
        };
        let mut src = Vec::with_capacity(kh * kw * out_h * out_w);
        for ki in 0..kh {
            for kj in 0..kw {
                for oy in 0..out_h {
                    let iy = resolve((oy * sy + ki) as isize - ph as isize, h, spec.pad_vertical);
                    for ox in 0..out_w {
                        let ix = resolve((ox * sx + kj) as isize - pw as isize, w, spec.pad_horizontal);
                        src.push(match (iy, ix) {
                            (Some(y), Some(x)) => y * w + x,
                            _ => usize::MAX,
                        });
                    }
                }
            }
        }
        Self {
            out_h,
            out_w,
            plane: h * w,
            kk: kh * kw,
            src,
        }
    }

    fn im2col(&self, x: &[f64], cin: usize, cols: &mut [f64]) {
        let hw_out = self.out_h * self.out_w;
        for c in 0..cin {
            let plane = &x[c * self.plane..(c + 1) * self.plane];
            let rows = &mut cols[c * self.kk * hw_out..(c + 1) * self.kk * hw_out];
            for (dst, &s) in rows.iter_mut().zip(&self.src) {
                *dst = if s == usize::MAX { 0.0 } else { plane[s] };
            }
        }
    }

    fn col2im(&self, cols: &[f64], cin: usize, dx: &mut [f64]) {
        let hw_out = self.out_h * self.out_w;
        for c in 0..cin {
            let plane = &mut dx[c * self.plane..(c + 1) * self.plane];
            let rows = &cols[c * self.kk * hw_out..(c + 1) * self.kk * hw_out];
            for (&v, &s) in rows.iter().zip(&self.src) {
                if s != usize::MAX {
                    plane[s] += v;
                }
            }
        }
    }
}
