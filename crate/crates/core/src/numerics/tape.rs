//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every operation is evaluated eagerly when it is pushed; its result and
//! whatever the adjoint needs are kept on the tape. [`Tape::backward`] walks
//! the record in reverse and returns adjoints for every node that depends on
//! a leaf registered with `requires_grad`.

use super::kernels::{self, BnLayout, Nchw};
use super::tensor::{gemm, Scalar, Tensor, Trans};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv3x3 { x: Var, w: Var, b: Var },
    MaxPool2(Var),
    Upsample2(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Frozen running statistics; `None` normalizes with batch moments.
        frozen: Option<(Vec<f64>, Vec<f64>)>,
        eps: f64,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    /// `x [n, in] * w [in, out] + b [out]`
    Linear { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var, tb: Trans },
    AddRow { x: Var, v: Var },
    SubRow { x: Var, v: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Sum(Var),
    ItemL2(Var),
    WeightedSum { x: Var, weights: Vec<f64> },
    Reshape { x: Var, shape: Vec<usize> },
    ToRows(Var),
    FromRows { x: Var, dims: [usize; 4] },
}

#[derive(Clone, Debug)]
enum Saved<T> {
    Nothing,
    Argmax(Vec<u32>),
    Norm {
        xhat: Vec<T>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    needs_grad: bool,
    saved: Saved<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn nchw(shape: &[usize], what: &str) -> Result<Nchw> {
    Nchw::from_shape(shape)
        .ok_or_else(|| Error::shape(format!("{what} expects an NCHW tensor, got {shape:?}")))
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Batch mean and biased variance used by a train-mode batchnorm node.
    pub fn batch_moments(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match (&self.nodes[v.0].op, &self.nodes[v.0].saved) {
            (Op::BatchNorm { frozen: None, .. }, Saved::Norm { mean, var, .. }) => {
                Some((mean, var))
            }
            _ => None,
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: requires_grad,
            saved: Saved::Nothing,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs(op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Conv3x3 { x, w, b } | Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::AddRow { x, v } | Op::SubRow { x, v } => vec![*x, *v],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MaxPool2(x)
            | Op::Upsample2(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Square(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::Sum(x)
            | Op::ItemL2(x)
            | Op::ToRows(x)
            | Op::WeightedSum { x, .. }
            | Op::Reshape { x, .. }
            | Op::FromRows { x, .. } => vec![*x],
        }
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(Error::Usage("tape already consumed by backward".into()));
        }
        for v in Self::inputs(&op) {
            if v.0 >= self.nodes.len() {
                return Err(Error::Usage(format!("unknown tape variable {}", v.0)));
            }
        }
        let (value, saved) = self.compute(&op)?;
        value.check_finite(&format!("{op:?}"))?;
        let needs_grad = Self::inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn compute(&self, op: &Op) -> Result<(Tensor<T>, Saved<T>)> {
        let plain = |t: Tensor<T>| Ok((t, Saved::Nothing));
        match op {
            Op::Leaf => Err(Error::Usage("leaves are not recomputed".into())),
            Op::Conv3x3 { x, w, b } => {
                let (xv, wv, bv) = (self.val(*x), self.val(*w), self.val(*b));
                let d = nchw(xv.shape(), "conv3x3")?;
                let ws = wv.shape();
                if ws.len() != 4 || ws[1] != d.c || ws[2] != 3 || ws[3] != 3 {
                    return Err(Error::shape(format!(
                        "conv3x3 kernel {ws:?} does not fit input with {} channels",
                        d.c
                    )));
                }
                let o = ws[0];
                if bv.shape() != [o] {
                    return Err(Error::shape(format!(
                        "conv3x3 bias {:?} does not match {o} output channels",
                        bv.shape()
                    )));
                }
                let out = kernels::conv3x3_forward(xv.data(), d, wv.data(), bv.data(), o);
                plain(Tensor::new(vec![d.n, o, d.h, d.w], out)?)
            }
            Op::MaxPool2(x) => {
                let xv = self.val(*x);
                let d = nchw(xv.shape(), "maxpool2x2")?;
                if d.h % 2 != 0 || d.w % 2 != 0 || d.h < 2 || d.w < 2 {
                    return Err(Error::shape(format!(
                        "maxpool2x2 needs even spatial extents, got {}x{}",
                        d.h, d.w
                    )));
                }
                let (out, arg) = kernels::maxpool2_forward(xv.data(), d);
                Ok((
                    Tensor::new(vec![d.n, d.c, d.h / 2, d.w / 2], out)?,
                    Saved::Argmax(arg),
                ))
            }
            Op::Upsample2(x) => {
                let xv = self.val(*x);
                let d = nchw(xv.shape(), "bilinear_up2")?;
                let out = kernels::bilinear_forward(xv.data(), d, d.h * 2, d.w * 2);
                plain(Tensor::new(vec![d.n, d.c, d.h * 2, d.w * 2], out)?)
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                frozen,
                eps,
            } => {
                let xv = self.val(*x);
                let l = BnLayout::from_shape(xv.shape()).ok_or_else(|| {
                    Error::shape(format!(
                        "batchnorm expects rank 2 or 4, got {:?}",
                        xv.shape()
                    ))
                })?;
                let (gv, bv) = (self.val(*gamma), self.val(*beta));
                if gv.shape() != [l.channels] || bv.shape() != [l.channels] {
                    return Err(Error::shape(format!(
                        "batchnorm affine parameters {:?}/{:?} do not match {} channels",
                        gv.shape(),
                        bv.shape(),
                        l.channels
                    )));
                }
                let (mean, var) = match frozen {
                    Some((m, v)) => {
                        if m.len() != l.channels || v.len() != l.channels {
                            return Err(Error::shape("batchnorm running statistics length"));
                        }
                        (m.clone(), v.clone())
                    }
                    None => kernels::channel_moments(xv.data(), l),
                };
                let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                let (y, xhat) =
                    kernels::batchnorm_apply(xv.data(), l, &mean, &inv_std, gv.data(), bv.data());
                Ok((
                    Tensor::new(xv.shape().to_vec(), y)?,
                    Saved::Norm {
                        xhat,
                        inv_std,
                        mean,
                        var,
                    },
                ))
            }
            Op::Relu(x) => plain(self.val(*x).map(|v| v.max(T::zero()))),
            Op::Sigmoid(x) => plain(self.val(*x).map(sigmoid)),
            Op::Exp(x) => plain(self.val(*x).map(|v| v.exp())),
            Op::Square(x) => plain(self.val(*x).map(|v| v * v)),
            Op::Linear { x, w, b } => {
                let (xv, wv, bv) = (self.val(*x), self.val(*w), self.val(*b));
                let out = xv.matmul(Trans::No, wv, Trans::No)?;
                if bv.shape() != [out.shape()[1]] {
                    return Err(Error::shape(format!(
                        "linear bias {:?} does not match {} outputs",
                        bv.shape(),
                        out.shape()[1]
                    )));
                }
                plain(add_row(out, bv))
            }
            Op::MatMul { a, b, tb } => plain(self.val(*a).matmul(Trans::No, self.val(*b), *tb)?),
            Op::AddRow { x, v } | Op::SubRow { x, v } => {
                let (xv, vv) = (self.val(*x), self.val(*v));
                if xv.rank() != 2 || vv.len() != xv.shape()[1] {
                    return Err(Error::shape(format!(
                        "row broadcast of {:?} over {:?}",
                        vv.shape(),
                        xv.shape()
                    )));
                }
                if matches!(op, Op::AddRow { .. }) {
                    plain(add_row(xv.clone(), vv))
                } else {
                    plain(add_row(xv.clone(), &vv.map(|t| -t)))
                }
            }
            Op::Add(a, b) => plain(self.val(*a).zip_map(self.val(*b), |p, q| p + q)?),
            Op::Sub(a, b) => plain(self.val(*a).zip_map(self.val(*b), |p, q| p - q)?),
            Op::Mul(a, b) => plain(self.val(*a).zip_map(self.val(*b), |p, q| p * q)?),
            Op::Scale(x, c) => {
                let c = T::of(*c);
                plain(self.val(*x).map(|v| v * c))
            }
            Op::AddScalar(x, c) => {
                let c = T::of(*c);
                plain(self.val(*x).map(|v| v + c))
            }
            Op::Sum(x) => plain(Tensor::scalar(self.val(*x).sum())),
            Op::ItemL2(x) => {
                let xv = self.val(*x);
                let n = xv.dim0();
                let norms = (0..n)
                    .map(|i| xv.item(i).iter().map(|&v| v * v).sum::<T>().sqrt())
                    .collect();
                plain(Tensor::new(vec![n], norms)?)
            }
            Op::WeightedSum { x, weights } => {
                let xv = self.val(*x);
                if xv.len() != weights.len() {
                    return Err(Error::shape(format!(
                        "weighted sum of {} values with {} weights",
                        xv.len(),
                        weights.len()
                    )));
                }
                let s = xv
                    .data()
                    .iter()
                    .zip(weights)
                    .map(|(&v, &w)| v * T::of(w))
                    .sum();
                plain(Tensor::scalar(s))
            }
            Op::Reshape { x, shape } => plain(self.val(*x).clone().reshape(shape)?),
            Op::ToRows(x) => {
                let xv = self.val(*x);
                let d = nchw(xv.shape(), "to_rows")?;
                plain(Tensor::new(
                    vec![d.n * d.plane(), d.c],
                    channels_to_rows(xv.data(), d),
                )?)
            }
            Op::FromRows { x, dims } => {
                let xv = self.val(*x);
                let d = Nchw::from_shape(dims).expect("rank 4");
                if xv.shape() != [d.n * d.plane(), d.c] {
                    return Err(Error::shape(format!(
                        "from_rows: {:?} cannot fold into {dims:?}",
                        xv.shape()
                    )));
                }
                plain(Tensor::new(dims.to_vec(), rows_to_channels(xv.data(), d))?)
            }
        }
    }

    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.push(Op::Conv3x3 { x, w, b })
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        self.push(Op::MaxPool2(x))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Upsample2(x))
    }

    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            frozen: None,
            eps,
        })
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    ) -> Result<Var> {
        self.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            frozen: Some((mean, var)),
            eps,
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Square(x))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.push(Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var, tb: Trans) -> Result<Var> {
        self.push(Op::MatMul { a, b, tb })
    }

    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.push(Op::AddRow { x, v })
    }

    pub fn sub_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.push(Op::SubRow { x, v })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::AddScalar(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.val(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Per-item Euclidean norm over all non-leading axes; output `[n]`.
    pub fn item_l2(&mut self, x: Var) -> Result<Var> {
        self.push(Op::ItemL2(x))
    }

    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        self.push(Op::WeightedSum { x, weights })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape {
            x,
            shape: shape.to_vec(),
        })
    }

    /// `(n, c, h, w)` to `(n*h*w, c)`: one row per spatial position.
    pub fn to_rows(&mut self, x: Var) -> Result<Var> {
        self.push(Op::ToRows(x))
    }

    pub fn from_rows(&mut self, x: Var, dims: [usize; 4]) -> Result<Var> {
        self.push(Op::FromRows { x, dims })
    }

    /// Re-evaluate every recorded operation from the stored leaves.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut replayed = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
            consumed: false,
        };
        for node in &self.nodes {
            match node.op {
                Op::Leaf => {
                    replayed.leaf(node.value.clone(), node.needs_grad);
                }
                ref op => {
                    replayed.push(op.clone())?;
                }
            }
        }
        Ok(replayed.nodes.into_iter().map(|n| n.value).collect())
    }

    /// Reverse sweep seeded with `seed` at `output`.
    ///
    /// The tape is consumed: further pushes or sweeps are usage errors.
    pub fn backward(&mut self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Usage("tape already consumed by backward".into()));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "output variable {} is not on this tape",
                output.0
            )));
        }
        self.nodes[output.0]
            .value
            .expect_same_shape(&seed, "backward seed")?;
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (v, dv) in self.adjoint(node, &g)? {
                accumulate(&mut grads[v.0], dv);
            }
            // keep the adjoint of interior nodes available to callers
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn adjoint(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3x3 { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let d = nchw(xv.shape(), "conv3x3")?;
                let o = wv.shape()[0];
                let want_params = self.wants(*w) || self.wants(*b);
                let cg = kernels::conv3x3_backward(
                    xv.data(),
                    d,
                    wv.data(),
                    o,
                    g.data(),
                    self.wants(*x),
                    want_params,
                );
                if let Some(dx) = cg.dx {
                    out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
                }
                if let (Some(dw), Some(db)) = (cg.dweight, cg.dbias) {
                    out.push((*w, Tensor::new(wv.shape().to_vec(), dw)?));
                    out.push((*b, Tensor::new(vec![o], db)?));
                }
            }
            Op::MaxPool2(x) => {
                let Saved::Argmax(arg) = &node.saved else {
                    unreachable!()
                };
                let xv = self.val(*x);
                let dx = kernels::maxpool2_backward(arg, xv.len(), g.data());
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            Op::Upsample2(x) => {
                let xv = self.val(*x);
                let d = nchw(xv.shape(), "bilinear_up2")?;
                let dx = kernels::bilinear_backward(g.data(), d, d.h * 2, d.w * 2);
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                frozen,
                ..
            } => {
                let Saved::Norm { xhat, inv_std, .. } = &node.saved else {
                    unreachable!()
                };
                let xv = self.val(*x);
                let l = BnLayout::from_shape(xv.shape()).expect("checked on forward");
                let bg = kernels::batchnorm_backward(
                    g.data(),
                    xhat,
                    l,
                    inv_std,
                    self.val(*gamma).data(),
                    frozen.is_none(),
                );
                out.push((*x, Tensor::new(xv.shape().to_vec(), bg.dx)?));
                out.push((*gamma, Tensor::new(vec![l.channels], bg.dgamma)?));
                out.push((*beta, Tensor::new(vec![l.channels], bg.dbeta)?));
            }
            Op::Relu(x) => {
                let dx = g.zip_map(y, |gv, yv| if yv > T::zero() { gv } else { T::zero() })?;
                out.push((*x, dx));
            }
            Op::Sigmoid(x) => {
                out.push((*x, g.zip_map(y, |gv, s| gv * s * (T::one() - s))?));
            }
            Op::Exp(x) => out.push((*x, g.zip_map(y, |gv, e| gv * e)?)),
            Op::Square(x) => {
                let two = T::of(2.0);
                out.push((*x, g.zip_map(self.val(*x), |gv, xv| two * gv * xv)?));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                if self.wants(*x) {
                    out.push((*x, g.matmul(Trans::No, wv, Trans::Yes)?));
                }
                if self.wants(*w) || self.wants(*b) {
                    out.push((*w, xv.matmul(Trans::Yes, g, Trans::No)?));
                    out.push((*b, column_sums(g)));
                }
            }
            Op::MatMul { a, b, tb } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    let flip = if *tb == Trans::No { Trans::Yes } else { Trans::No };
                    out.push((*a, g.matmul(Trans::No, bv, flip)?));
                }
                if self.wants(*b) {
                    let db = match tb {
                        Trans::No => av.matmul(Trans::Yes, g, Trans::No)?,
                        Trans::Yes => g.matmul(Trans::Yes, av, Trans::No)?,
                    };
                    out.push((*b, db));
                }
            }
            Op::AddRow { x, v } | Op::SubRow { x, v } => {
                out.push((*x, g.clone()));
                if self.wants(*v) {
                    let s = column_sums(g);
                    let s = if matches!(node.op, Op::SubRow { .. }) {
                        s.map(|t| -t)
                    } else {
                        s
                    };
                    out.push((*v, s.reshape(self.val(*v).shape())?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|t| -t)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                out.push((*a, g.zip_map(bv, |gv, q| gv * q)?));
                out.push((*b, g.zip_map(av, |gv, p| gv * p)?));
            }
            Op::Scale(x, c) => {
                let c = T::of(*c);
                out.push((*x, g.map(|t| t * c)));
            }
            Op::AddScalar(x, _) => out.push((*x, g.clone())),
            Op::Sum(x) => {
                let gv = g.data()[0];
                out.push((*x, Tensor::full(self.val(*x).shape(), gv)));
            }
            Op::ItemL2(x) => {
                let xv = self.val(*x);
                let per = xv.item_len();
                let mut dx = vec![T::zero(); xv.len()];
                for i in 0..xv.dim0() {
                    let norm = y.data()[i];
                    if norm > T::zero() {
                        let s = g.data()[i] / norm;
                        for (d, &v) in dx[i * per..(i + 1) * per].iter_mut().zip(xv.item(i)) {
                            *d = s * v;
                        }
                    }
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            Op::WeightedSum { x, weights } => {
                let gv = g.data()[0];
                let xv = self.val(*x);
                let dx = weights.iter().map(|&w| gv * T::of(w)).collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            Op::Reshape { x, .. } => {
                out.push((*x, g.clone().reshape(self.val(*x).shape())?));
            }
            Op::ToRows(x) => {
                let xv = self.val(*x);
                let d = nchw(xv.shape(), "to_rows")?;
                out.push((*x, Tensor::new(d.dims().to_vec(), rows_to_channels(g.data(), d))?));
            }
            Op::FromRows { x, dims } => {
                let d = Nchw::from_shape(dims).expect("rank 4");
                out.push((
                    *x,
                    Tensor::new(self.val(*x).shape().to_vec(), channels_to_rows(g.data(), d))?,
                ));
            }
        }
        out.retain(|(v, _)| self.wants(*v));
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, dv: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &d) in acc.data_mut().iter_mut().zip(dv.data()) {
                *a += d;
            }
        }
        None => *slot = Some(dv),
    }
}

fn add_row<T: Scalar>(mut x: Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
    let cols = v.len();
    for row in x.data_mut().chunks_mut(cols) {
        for (a, &b) in row.iter_mut().zip(v.data()) {
            *a += b;
        }
    }
    x
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let cols = g.shape()[1];
    let mut s = vec![T::zero(); cols];
    for row in g.data().chunks(cols) {
        for (a, &b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    Tensor::new(vec![cols], s).expect("non-empty")
}

pub(crate) fn channels_to_rows<T: Scalar>(x: &[T], d: Nchw) -> Vec<T> {
    let hw = d.plane();
    let mut out = vec![T::zero(); x.len()];
    for n in 0..d.n {
        for c in 0..d.c {
            for p in 0..hw {
                out[(n * hw + p) * d.c + c] = x[(n * d.c + c) * hw + p];
            }
        }
    }
    out
}

pub(crate) fn rows_to_channels<T: Scalar>(rows: &[T], d: Nchw) -> Vec<T> {
    let hw = d.plane();
    let mut out = vec![T::zero(); rows.len()];
    for n in 0..d.n {
        for c in 0..d.c {
            for p in 0..hw {
                out[(n * d.c + c) * hw + p] = rows[(n * hw + p) * d.c + c];
            }
        }
    }
    out
}

/// Convenience: gemm into a fresh buffer, used by gradient checks.
#[allow(dead_code)]
pub(crate) fn matmul_raw<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm(m, k, n, a, Trans::No, b, Trans::No, &mut c, false);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn gradient_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]), true);
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let p = tape.leaf(t(&[2], &[5.0, 5.0]), true);
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss, Tensor::scalar(1.0)).unwrap();
        assert!(g.get(p).is_none_or(|d| d.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn consumed_tape_is_a_usage_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[1.0]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s, Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            tape.backward(s, Tensor::scalar(1.0)),
            Err(Error::Usage(_))
        ));
        assert!(matches!(tape.relu(x), Err(Error::Usage(_))));
    }

    #[test]
    fn seed_shape_must_match_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(
            tape.backward(x, Tensor::scalar(1.0)),
            Err(Error::Shape(_)) | Err(Error::Usage(_))
        ));
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[1000.0]), false);
        assert!(matches!(tape.exp(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn rows_round_trip() {
        let d = Nchw {
            n: 2,
            c: 3,
            h: 2,
            w: 2,
        };
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let rows = channels_to_rows(&x, d);
        // row 0 = item 0, position 0, channels 0..3
        assert_eq!(&rows[0..3], &[0.0, 4.0, 8.0]);
        assert_eq!(rows_to_channels(&rows, d), x);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[0.1, -0.4, 0.3, 0.9]), true);
        let u = tape.upsample2(x).unwrap();
        let s = tape.sigmoid(u).unwrap();
        let p = tape.maxpool2(s).unwrap();
        let n = tape.item_l2(p).unwrap();
        let _ = tape.sum(n).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, r) in replayed.iter().enumerate() {
            assert_eq!(r, tape.value(Var(i)));
        }
    }
}
