//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value and enough
//! context to apply its backward rule. Nodes are created in topological
//! order, so [`Tape::backward`] is a single reverse sweep.

use crate::scalar::Scalar;

use super::{NnError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Affine {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    ChannelScale {
        x: Var,
        w: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst {
        x: Var,
        c: Tensor<T>,
    },
    AddConst(Var),
    Scale {
        x: Var,
        s: T,
    },
    Sum(Var),
    SelectChannels {
        x: Var,
        start: usize,
        step: usize,
    },
    Stack(Vec<Var>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::MaxPool2 { .. } => "max_pool2x2",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::Affine { .. } => "affine",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::ChannelScale { .. } => "channel_scale",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulConst { .. } => "mul_const",
            Op::AddConst(_) => "add_const",
            Op::Scale { .. } => "scale",
            Op::Sum(_) => "sum",
            Op::SelectChannels { .. } => "select_channels",
            Op::Stack(_) => "stack",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Single-threaded recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn chw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize), NnError> {
    match shape {
        &[c, h, w] => Ok((c, h, w)),
        _ => Err(NnError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "expected rank-3 [channels, height, width]".into(),
        }),
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize), NnError> {
    if axis >= shape.len() {
        return Err(NnError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn conv_out(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    (size + 2 * padding).checked_sub(k).map(|v| v / stride + 1)
}

/// Range of output positions `o` with `0 <= o*stride + k - padding < size`.
fn valid_range(out: usize, size: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
    // o*stride + k - padding <= size - 1
    let hi = if size + padding > k {
        ((size + padding - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var, NnError> {
        if !value.all_finite() {
            return Err(NnError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, NnError> {
        self.push(value, Op::Constant)
    }

    /// Records a parameter leaf; its gradient lands in the store on backward.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var, NnError> {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// 2-D cross-correlation of a `[c_in, h, w]` input with a
    /// `[c_out, c_in, kh, kw]` kernel, zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var, NnError> {
        let (cin, h, w) = chw(self.shape(input), "conv2d")?;
        let kshape = self.shape(kernel).to_vec();
        let (cout, kcin, kh, kw) = match kshape[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(NnError::InvalidShape {
                    op: "conv2d",
                    shape: kshape,
                    reason: "kernel must be [c_out, c_in, kh, kw]".into(),
                })
            }
        };
        if kcin != cin || stride == 0 {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(input).to_vec(),
                rhs: kshape,
            });
        }
        let (Some(ho), Some(wo)) = (conv_out(h, kh, stride, padding), conv_out(w, kw, stride, padding)) else {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(input).to_vec(),
                rhs: kshape,
            });
        };
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![T::zero(); cout * ho * wo];
        for co in 0..cout {
            let out_c = &mut out[co * ho * wo..(co + 1) * ho * wo];
            for ci in 0..cin {
                let x_c = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ho, h, ky, stride, padding);
                    for kx in 0..kw {
                        let wt = k[((co * cin + ci) * kh + ky) * kw + kx];
                        let (ox_lo, ox_hi) = valid_range(wo, w, kx, stride, padding);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let x_row = &x_c[iy * w..(iy + 1) * w];
                            let o_row = &mut out_c[oy * wo..(oy + 1) * wo];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - padding;
                                let xs = &x_row[ix0..ix0 + (ox_hi - ox_lo)];
                                for (o, &xv) in o_row[ox_lo..ox_hi].iter_mut().zip(xs) {
                                    *o += wt * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    o_row[ox] += wt * x_row[ox * stride + kx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![cout, ho, wo], out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        )
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var, NnError> {
        let (c, h, w) = chw(self.shape(x), "add_channel_bias")?;
        if self.shape(bias) != [c] {
            return Err(NnError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for (ch, chunk) in value.data_mut().chunks_mut(h * w).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[ch]);
        }
        self.push(value, Op::AddChannelBias { x, bias })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var, NnError> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(value, Op::LeakyRelu { x, slope })
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    /// Ties resolve to the first element in row-major window order.
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var, NnError> {
        let (c, h, w) = chw(self.shape(x), "max_pool2x2")?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(NnError::InvalidShape {
                op: "max_pool2x2",
                shape: self.shape(x).to_vec(),
                reason: "spatial size below 2".into(),
            });
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let cands = [
                        base + (2 * oy) * w + 2 * ox,
                        base + (2 * oy) * w + 2 * ox + 1,
                        base + (2 * oy + 1) * w + 2 * ox,
                        base + (2 * oy + 1) * w + 2 * ox + 1,
                    ];
                    let mut best = cands[0];
                    for &i in &cands[1..] {
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], out)?;
        self.push(value, Op::MaxPool2 { x, argmax })
    }

    /// `[c, h, w] -> [c]`, first maximum in scan order wins ties.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let (c, h, w) = chw(self.shape(x), "global_max_pool")?;
        if h * w == 0 {
            return Err(NnError::InvalidShape {
                op: "global_max_pool",
                shape: self.shape(x).to_vec(),
                reason: "empty spatial extent".into(),
            });
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c);
        let mut argmax = Vec::with_capacity(c);
        for ch in 0..c {
            let base = ch * h * w;
            let mut best = base;
            for i in base + 1..base + h * w {
                if xd[i] > xd[best] {
                    best = i;
                }
            }
            out.push(xd[best]);
            argmax.push(best);
        }
        let value = Tensor::new(vec![c], out)?;
        self.push(value, Op::GlobalMaxPool { x, argmax })
    }

    /// `W x + b` for `x: [n]`, `W: [out, n]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, NnError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        let (n_out, n_in) = match (&xs[..], &ws[..], &bs[..]) {
            (&[n], &[o, i], &[b]) if n == i && b == o => (o, i),
            _ => {
                return Err(NnError::ShapeMismatch {
                    op: "affine",
                    lhs: xs,
                    rhs: ws,
                })
            }
        };
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        let out = (0..n_out)
            .map(|o| {
                wd[o * n_in..(o + 1) * n_in]
                    .iter()
                    .zip(xd)
                    .fold(bd[o], |acc, (&a, &b)| acc + a * b)
            })
            .collect();
        let value = Tensor::new(vec![n_out], out)?;
        self.push(value, Op::Affine { x, weight, bias })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NnError> {
        let value = softmax_forward(self.value(x), axis, false)?;
        self.push(value, Op::Softmax { x, axis })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, NnError> {
        let value = softmax_forward(self.value(x), axis, true)?;
        self.push(value, Op::LogSoftmax { x, axis })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NnError> {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NnError> {
        let value = self.value(x).map(T::exp);
        self.push(value, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, NnError> {
        let value = self.value(x).map(T::ln);
        self.push(value, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, NnError> {
        let value = self.value(x).map(T::sqrt);
        self.push(value, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, NnError> {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x))
    }

    /// Multiplies channel `c` of a `[c, h, w]` map by `w[c]`.
    pub fn channel_scale(&mut self, x: Var, w: Var) -> Result<Var, NnError> {
        let (c, h, wd) = chw(self.shape(x), "channel_scale")?;
        if self.shape(w) != [c] {
            return Err(NnError::ShapeMismatch {
                op: "channel_scale",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let coeffs = self.value(w).data().to_vec();
        let mut value = self.value(x).clone();
        for (ch, chunk) in value.data_mut().chunks_mut(h * wd).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= coeffs[ch]);
        }
        self.push(value, Op::ChannelScale { x, w })
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var, NnError> {
        self.same_shape(op.name(), a, b)?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Element-wise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var, NnError> {
        if self.shape(x) != c.shape() {
            return Err(NnError::ShapeMismatch {
                op: "mul_const",
                lhs: self.shape(x).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let value = Tensor::new(c.shape().to_vec(), data)?;
        self.push(value, Op::MulConst { x, c })
    }

    /// Element-wise sum with a constant tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var, NnError> {
        if self.shape(x) != c.shape() {
            return Err(NnError::ShapeMismatch {
                op: "add_const",
                lhs: self.shape(x).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let value = Tensor::new(c.shape().to_vec(), data)?;
        self.push(value, Op::AddConst(x))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var, NnError> {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale { x, s })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var, NnError> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    /// Picks channels `start, start + step, ...` (`count` of them) from a
    /// `[c, h, w]` map.
    pub fn select_channels(&mut self, x: Var, start: usize, step: usize, count: usize) -> Result<Var, NnError> {
        let (c, h, w) = chw(self.shape(x), "select_channels")?;
        if count == 0 || step == 0 || start + (count - 1) * step >= c {
            return Err(NnError::InvalidShape {
                op: "select_channels",
                shape: self.shape(x).to_vec(),
                reason: format!("cannot take {count} channels from {start} by {step}"),
            });
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(count * h * w);
        for j in 0..count {
            let ch = start + j * step;
            out.extend_from_slice(&xd[ch * h * w..(ch + 1) * h * w]);
        }
        let value = Tensor::new(vec![count, h, w], out)?;
        self.push(value, Op::SelectChannels { x, start, step })
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var, NnError> {
        let Some(&first) = xs.first() else {
            return Err(NnError::InvalidShape {
                op: "stack",
                shape: Vec::new(),
                reason: "nothing to stack".into(),
            });
        };
        for &x in &xs[1..] {
            self.same_shape("stack", first, x)?;
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(self.shape(first));
        let mut data = Vec::with_capacity(shape.iter().product());
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Stack(xs.to_vec()))
    }

    /// Mean of same-shaped tensors.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var, NnError> {
        let Some((&first, rest)) = xs.split_first() else {
            return Err(NnError::InvalidShape {
                op: "mean_of",
                shape: Vec::new(),
                reason: "empty input".into(),
            });
        };
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        if xs.len() == 1 {
            return Ok(acc);
        }
        self.scale(acc, T::one() / T::lit(xs.len() as f64))
    }

    /// Propagates d(loss)/d(node) back through the tape and accumulates the
    /// parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<(), NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    p.grad.add_assign(&g);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (gi, gk) = self.conv2d_backward(*input, *kernel, *stride, *padding, &g);
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *kernel, gk);
                }
                Op::AddChannelBias { x, bias } => {
                    let c = self.shape(*bias)[0];
                    let hw = g.len() / c;
                    let gb: Vec<T> = g
                        .data()
                        .chunks(hw)
                        .map(|ch| ch.iter().fold(T::zero(), |a, &b| a + b))
                        .collect();
                    accumulate(&mut grads, *bias, Tensor::new(vec![c], gb)?);
                    accumulate(&mut grads, *x, g);
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * *slope })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::MaxPool2 { x, argmax } | Op::GlobalMaxPool { x, argmax } => {
                    let mut gx = Tensor::zeros(self.shape(*x));
                    let gd = gx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        gd[src] += gv;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Affine { x, weight, bias } => {
                    let xd = self.value(*x).data();
                    let wd = self.value(*weight).data();
                    let n_in = xd.len();
                    let n_out = g.len();
                    let mut gx = vec![T::zero(); n_in];
                    let mut gw = vec![T::zero(); n_out * n_in];
                    for o in 0..n_out {
                        let go = g.data()[o];
                        for i in 0..n_in {
                            gx[i] += go * wd[o * n_in + i];
                            gw[o * n_in + i] = go * xd[i];
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![n_in], gx)?);
                    accumulate(&mut grads, *weight, Tensor::new(vec![n_out, n_in], gw)?);
                    accumulate(&mut grads, *bias, g);
                }
                Op::Softmax { x, axis } => {
                    let y = &node.value;
                    let (outer, n, inner) = split_axis(y.shape(), *axis, "softmax")?;
                    let mut gx = Tensor::zeros(y.shape());
                    let (yd, gd, out) = (y.data(), g.data(), gx.data_mut());
                    for o in 0..outer {
                        for k in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + k;
                            let dot = (0..n).fold(T::zero(), |a, j| a + gd[idx(j)] * yd[idx(j)]);
                            for j in 0..n {
                                out[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LogSoftmax { x, axis } => {
                    let y = &node.value;
                    let (outer, n, inner) = split_axis(y.shape(), *axis, "log_softmax")?;
                    let mut gx = Tensor::zeros(y.shape());
                    let (yd, gd, out) = (y.data(), g.data(), gx.data_mut());
                    for o in 0..outer {
                        for k in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + k;
                            let total = (0..n).fold(T::zero(), |a, j| a + gd[idx(j)]);
                            for j in 0..n {
                                out[idx(j)] = gd[idx(j)] - yd[idx(j)].exp() * total;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = zip_map(&node.value, &g, |y, gv| gv * y * (T::one() - y));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = zip_map(&node.value, &g, |y, gv| gv * y);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Log(x) => {
                    let gx = zip_map(self.value(*x), &g, |v, gv| gv / v);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sqrt(x) => {
                    let two = T::lit(2.0);
                    let gx = zip_map(&node.value, &g, |y, gv| gv / (two * y));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Square(x) => {
                    let two = T::lit(2.0);
                    let gx = zip_map(self.value(*x), &g, |v, gv| two * v * gv);
                    accumulate(&mut grads, *x, gx);
                }
                Op::ChannelScale { x, w } => {
                    let xv = self.value(*x);
                    let coeffs = self.value(*w).data();
                    let c = coeffs.len();
                    let hw = xv.len() / c;
                    let mut gx = g.clone();
                    let mut gw = vec![T::zero(); c];
                    for ch in 0..c {
                        let gs = &mut gx.data_mut()[ch * hw..(ch + 1) * hw];
                        let xs = &xv.data()[ch * hw..(ch + 1) * hw];
                        let mut acc = T::zero();
                        for (gv, &xval) in gs.iter_mut().zip(xs) {
                            acc += *gv * xval;
                            *gv *= coeffs[ch];
                        }
                        gw[ch] = acc;
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, Tensor::new(vec![c], gw)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(self.value(*b), &g, |v, gv| v * gv);
                    let gb = zip_map(self.value(*a), &g, |v, gv| v * gv);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulConst { x, c } => {
                    accumulate(&mut grads, *x, zip_map(c, &g, |v, gv| v * gv));
                }
                Op::AddConst(x) => accumulate(&mut grads, *x, g),
                Op::Scale { x, s } => {
                    let s = *s;
                    accumulate(&mut grads, *x, g.map(|v| v * s));
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::full(self.shape(*x), gv));
                }
                Op::SelectChannels { x, start, step } => {
                    let (_, h, w) = chw(self.shape(*x), "select_channels")?;
                    let hw = h * w;
                    let mut gx = Tensor::zeros(self.shape(*x));
                    for (j, chunk) in g.data().chunks(hw).enumerate() {
                        let ch = start + j * step;
                        gx.data_mut()[ch * hw..(ch + 1) * hw].copy_from_slice(chunk);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Stack(xs) => {
                    let per = g.len() / xs.len();
                    for (j, &x) in xs.iter().enumerate() {
                        let part = g.data()[j * per..(j + 1) * per].to_vec();
                        accumulate(&mut grads, x, Tensor::new(self.shape(x).to_vec(), part)?);
                    }
                }
                Op::Constant => {}
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        g: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>) {
        let xv = self.value(input);
        let kv = self.value(kernel);
        let (cin, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, kh, kw) = (kv.shape()[0], kv.shape()[2], kv.shape()[3]);
        let (ho, wo) = (g.shape()[1], g.shape()[2]);
        let x = xv.data();
        let k = kv.data();
        let gd = g.data();
        let mut gx = vec![T::zero(); x.len()];
        let mut gk = vec![T::zero(); k.len()];
        for co in 0..cout {
            let g_c = &gd[co * ho * wo..(co + 1) * ho * wo];
            for ci in 0..cin {
                let x_c = &x[ci * h * w..(ci + 1) * h * w];
                let gx_c = &mut gx[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ho, h, ky, stride, padding);
                    for kx in 0..kw {
                        let kidx = ((co * cin + ci) * kh + ky) * kw + kx;
                        let wt = k[kidx];
                        let (ox_lo, ox_hi) = valid_range(wo, w, kx, stride, padding);
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let g_row = &g_c[oy * wo..(oy + 1) * wo];
                            for ox in ox_lo..ox_hi {
                                let ix = iy * w + ox * stride + kx - padding;
                                let gv = g_row[ox];
                                acc += gv * x_c[ix];
                                gx_c[ix] += gv * wt;
                            }
                        }
                        gk[kidx] += acc;
                    }
                }
            }
        }
        (
            Tensor::new(xv.shape().to_vec(), gx).expect("input shape"),
            Tensor::new(kv.shape().to_vec(), gk).expect("kernel shape"),
        )
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, g: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(g.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize, log: bool) -> Result<Tensor<T>, NnError> {
    let (outer, n, inner) = split_axis(x.shape(), axis, if log { "log_softmax" } else { "softmax" })?;
    let mut out = x.clone();
    let xd = x.data();
    let od = out.data_mut();
    for o in 0..outer {
        for k in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + k;
            let max = (0..n).map(|j| xd[idx(j)]).fold(T::neg_infinity(), T::max);
            let denom = (0..n).fold(T::zero(), |a, j| a + (xd[idx(j)] - max).exp());
            let log_denom = denom.ln();
            for j in 0..n {
                let shifted = xd[idx(j)] - max;
                od[idx(j)] = if log {
                    shifted - log_denom
                } else {
                    shifted.exp() / denom
                };
            }
        }
    }
    Ok(out)
}
