use super::kernels::{self, ConvGeom, Padding};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub mode: Padding,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions {
            stride: 1,
            padding: 0,
            mode: Padding::Zero,
        }
    }
}

impl Conv2dOptions {
    /// Stride 1 with `k / 2` padding, preserving spatial size for odd kernels.
    pub fn same(k: usize, mode: Padding) -> Self {
        Conv2dOptions {
            stride: 1,
            padding: k / 2,
            mode,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: T,
    },
    Sum {
        x: Var,
    },
    MaskedMse {
        pred: Var,
        target: Vec<T>,
        mask: Vec<bool>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records forward operations for one graph evaluation.
///
/// A tape supports exactly one [`backward`](Tape::backward); a second call
/// fails with [`Error::StaleTape`]. A tape created with [`Tape::no_grad`]
/// never tracks gradients.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
    mse_parts: Vec<(usize, f64, usize)>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
            mse_parts: Vec::new(),
        }
    }

    /// A tape for evaluation only: parameters are recorded as constants.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
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

    /// Sum of squared errors and masked-in count of a [`Tape::mse_loss`] node,
    /// accumulated in `f64`.
    pub fn mse_parts(&self, v: Var) -> Option<(f64, usize)> {
        self.mse_parts
            .iter()
            .find(|(idx, _, _)| *idx == v.0)
            .map(|&(_, sse, n)| (sse, n))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOptions) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).dims4()?;
        let [cout, wcin, kh, kw] = self.value(w).dims4()?;
        if wcin != cin {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d: bias shape {:?}, expected [{cout}]",
                    self.shape(b)
                )));
            }
        }
        if opts.stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (hp, wp) = (h + 2 * opts.padding, wd + 2 * opts.padding);
        if hp < kh || wp < kw {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}"
            )));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride: opts.stride,
            pad: opts.padding,
            mode: opts.mode,
            hout: (hp - kh) / opts.stride + 1,
            wout: (wp - kw) / opts.stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::new(vec![n, cout, geom.hout, geom.wout], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, needs))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        if k == 0 || dims[2] < k || dims[3] < k {
            return Err(Error::ShapeMismatch(format!(
                "maxpool2d: window {k} does not fit input {:?}",
                dims
            )));
        }
        let (out, argmax) = kernels::maxpool_forward(dims, k, self.value(x).data());
        let value = Tensor::new(vec![dims[0], dims[1], dims[2] / k, dims[3] / k], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, needs))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let out = kernels::upsample_forward(dims, factor, self.value(x).data());
        let value = Tensor::new(vec![dims[0], dims[1], dims[2] * factor, dims[3] * factor], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Upsample { x, factor }, needs))
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let [n, _, h, w] = self.value(first).dims4()?;
        let mut channels = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "concat: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            channels += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * channels * hw);
        for s in 0..n {
            for &p in parts {
                let pc = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[s * pc * hw..(s + 1) * pc * hw]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::new(vec![n, channels, h, w], out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * scale + shift).collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        let needs = self.needs(x);
        self.push(value, Op::Affine { x, scale }, needs)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = 0.0f64;
        for v in self.value(x).data() {
            acc += v.as_f64();
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(T::from_f64(acc)), Op::Sum { x }, needs)
    }

    /// Mean squared error over entries where `mask` is true.
    pub fn mse_loss(&mut self, pred: Var, target: &[T], mask: &[bool]) -> Result<Var> {
        let p = self.value(pred).data();
        if target.len() != p.len() || mask.len() != p.len() {
            return Err(Error::ShapeMismatch(format!(
                "mse_loss: pred {} values, target {}, mask {}",
                p.len(),
                target.len(),
                mask.len()
            )));
        }
        let mut sse = 0.0f64;
        let mut count = 0usize;
        for ((&pv, &tv), &m) in p.iter().zip(target).zip(mask) {
            if m {
                let d = pv.as_f64() - tv.as_f64();
                sse += d * d;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let needs = self.needs(pred);
        let loss = sse / count as f64;
        let v = self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::MaskedMse {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            needs,
        );
        self.mse_parts.push((v.0, sse, count));
        Ok(v)
    }

    /// Reverse pass from a scalar root. Consumes the tape's recorded graph.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        let root_node = &self.nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        if !root_node.value.data()[0].is_finite() {
            return Err(Error::NonFinite(format!(
                "loss value {:?}",
                root_node.value.data()[0]
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, delta: Vec<T>| accumulate(&mut grads, nodes, v, delta);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, geom } => {
                    let need = (
                        nodes[x.0].needs_grad,
                        nodes[w.0].needs_grad,
                        b.is_some_and(|b| nodes[b.0].needs_grad),
                    );
                    let cg = kernels::conv2d_backward(
                        geom,
                        nodes[x.0].value.data(),
                        nodes[w.0].value.data(),
                        &g,
                        need,
                    );
                    if let Some(dx) = cg.dx {
                        acc(*x, dx);
                    }
                    if let Some(dw) = cg.dw {
                        acc(*w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, cg.db) {
                        acc(*b, db);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
                    for (&idx, &gv) in argmax.iter().zip(&g) {
                        dx[idx] += gv;
                    }
                    acc(*x, dx);
                }
                Op::Upsample { x, factor } => {
                    let dims = nodes[x.0].value.dims4()?;
                    acc(*x, kernels::upsample_backward(dims, *factor, &g));
                }
                Op::Concat { parts } => {
                    let [n, c, h, w] = node.value.dims4()?;
                    let hw = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = nodes[p.0].value.shape()[1];
                        if nodes[p.0].needs_grad {
                            let mut dp = Vec::with_capacity(n * pc * hw);
                            for s in 0..n {
                                let start = (s * c + offset) * hw;
                                dp.extend_from_slice(&g[start..start + pc * hw]);
                            }
                            acc(p, dp);
                        }
                        offset += pc;
                    }
                }
                Op::Relu { x } => {
                    let xin = nodes[x.0].value.data();
                    let dx = g
                        .iter()
                        .zip(xin)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    acc(*x, dx);
                }
                Op::Add { a, b } => {
                    if nodes[a.0].needs_grad {
                        acc(*a, g.clone());
                    }
                    acc(*b, g);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if nodes[a.0].needs_grad {
                        acc(*a, g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect());
                    }
                    if nodes[b.0].needs_grad {
                        acc(*b, g.iter().zip(av).map(|(&gv, &x)| gv * x).collect());
                    }
                }
                Op::Affine { x, scale } => {
                    acc(*x, g.iter().map(|&gv| gv * *scale).collect());
                }
                Op::Sum { x } => {
                    acc(*x, vec![g[0]; nodes[x.0].value.numel()]);
                }
                Op::MaskedMse {
                    pred,
                    target,
                    mask,
                    count,
                } => {
                    let coeff = g[0].as_f64() * 2.0 / *count as f64;
                    let p = nodes[pred.0].value.data();
                    let dp = p
                        .iter()
                        .zip(target)
                        .zip(mask)
                        .map(|((&pv, &tv), &m)| {
                            if m {
                                T::from_f64(coeff * (pv.as_f64() - tv.as_f64()))
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    acc(*pred, dp);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, delta: Vec<T>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
