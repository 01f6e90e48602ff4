use super::kernels::{self, ConvGeom};
use super::{axis_blocks, lit, numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddChannelBias { x: Var, bias: Var },
    Square(Var),
    Silu(Var),
    LeakyRelu(Var, T),
    LogSigmoid(Var),
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, axis: usize },
    ReduceNorm { x: Var, axis: usize, p: u8 },
    Matmul(Var, Var),
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, out_geom: ConvGeom },
    UpsampleNearest2x(Var),
    CapsulePredict { u: Var, w: Var },
    WeightedSum { c: Var, u_hat: Var },
    Squash { s: Var, eps: T },
    Agreement { v: Var, u_hat: Var },
    Gdl { y: Var, y_hat: Var, gamma: u32 },
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation. Node order is a
/// topological order, so the backward sweep is a single reverse pass.
///
/// A tape belongs to one forward/backward step and is not shared across
/// threads; run independent images on independent tapes.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradient map produced by a backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`; all zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Same value as `x`, cut from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// `x[c, ...] + bias[c]` for `x` of rank ≥ 1.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() == 0 || tb.shape() != [tx.shape()[0]] {
            return Err(Error::dim(
                "add_channel_bias",
                format!("{:?} + bias {:?}", tx.shape(), tb.shape()),
            ));
        }
        let inner = tx.len() / tx.shape()[0];
        let mut out = tx.clone();
        for (c, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let b = tb.data()[c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(self.push(out, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| x.min(T::zero()) - (T::one() + (-x.abs()).exp()).ln());
        self.push(out, Op::LogSigmoid(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / lit(t.len() as f64));
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("softmax", t.shape(), axis)?;
        let (outer, n, inner) = axis_blocks(t.shape(), axis);
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..n {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[at(k)] = out[at(k)] / total;
                }
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// L1 (`p = 1`) or L2 (`p = 2`) norm along `axis`, which is removed.
    pub fn reduce_norm(&mut self, x: Var, axis: usize, p: u8) -> Result<Var> {
        let t = self.value(x);
        check_axis("reduce_norm", t.shape(), axis)?;
        if p != 1 && p != 2 {
            return Err(Error::Contract(format!("reduce_norm supports p in {{1, 2}}, got {p}")));
        }
        let (outer, n, inner) = axis_blocks(t.shape(), axis);
        let src = t.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = T::zero();
                for k in 0..n {
                    let v = src[(o * n + k) * inner + i];
                    acc += if p == 1 { v.abs() } else { v * v };
                }
                out[o * inner + i] = if p == 1 { acc } else { acc.sqrt() };
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(out, Op::ReduceNorm { x, axis, p }, &[x]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, T::one(), ta.data(), false, tb.data(), false, T::zero(), &mut out);
        let out = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = vec![false; t.rank()];
        if axes.len() != t.rank() || axes.iter().any(|&a| a >= t.rank() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", format!("axes {axes:?} for {:?}", t.shape())));
        }
        let (data, shape) = kernels::permute(t.data(), t.shape(), axes);
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// `x: [C_in, H, W]`, `w: [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 3 || tw.rank() != 4 || tw.shape()[1] != tx.shape()[0] || tw.shape()[2] != tw.shape()[3] {
            return Err(Error::dim("conv2d", format!("input {:?}, weight {:?}", tx.shape(), tw.shape())));
        }
        let geom = ConvGeom {
            channels: tx.shape()[0],
            height: tx.shape()[1],
            width: tx.shape()[2],
            kernel: tw.shape()[2],
            stride,
            pad,
        };
        if !geom.is_valid() {
            return Err(Error::dim("conv2d", format!("invalid window {geom:?}")));
        }
        let c_out = tw.shape()[0];
        let data = kernels::conv2d_forward(tx.data(), tw.data(), c_out, &geom);
        let out = Tensor::from_parts(vec![c_out, geom.out_height(), geom.out_width()], data);
        Ok(self.push(out, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// `x: [C_in, H, W]`, `w: [C_in, C_out, k, k]`; output extent
    /// `(H - 1) * stride - 2 * pad + k`. Exact adjoint of [`Tape::conv2d`]
    /// with the same weight.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 3 || tw.rank() != 4 || tw.shape()[0] != tx.shape()[0] || tw.shape()[2] != tw.shape()[3] {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("input {:?}, weight {:?}", tx.shape(), tw.shape()),
            ));
        }
        let k = tw.shape()[2];
        let (h, w_) = (tx.shape()[1], tx.shape()[2]);
        let grow = |e: usize| ((e - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
        let (Some(ho), Some(wo)) = (grow(h), grow(w_)) else {
            return Err(Error::dim("conv_transpose2d", format!("padding {pad} too large for kernel {k}")));
        };
        if stride == 0 {
            return Err(Error::dim("conv_transpose2d", "stride must be >= 1"));
        }
        let out_geom = ConvGeom {
            channels: tw.shape()[1],
            height: ho,
            width: wo,
            kernel: k,
            stride,
            pad,
        };
        let c_in = tx.shape()[0];
        let data = kernels::conv_transpose2d_forward(tx.data(), tw.data(), c_in, &out_geom);
        let out = Tensor::from_parts(vec![out_geom.channels, ho, wo], data);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, out_geom }, &[x, w]))
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` image.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 3 {
            return Err(Error::dim("upsample_nearest2x", format!("{:?}", t.shape())));
        }
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let src = t.data();
        let mut out = Vec::with_capacity(c * 4 * h * w);
        for ch in 0..c {
            for i in 0..2 * h {
                let row = &src[(ch * h + i / 2) * w..(ch * h + i / 2 + 1) * w];
                for j in 0..2 * w {
                    out.push(row[j / 2]);
                }
            }
        }
        let out = Tensor::from_parts(vec![c, 2 * h, 2 * w], out);
        Ok(self.push(out, Op::UpsampleNearest2x(x), &[x]))
    }

    /// Capsule predictions `û[l, i, j, :] = u[l, i, :] · W[i, j]` with
    /// `u: [L, I, Du]`, `W: [I, J, Du, Da]`, result `[L, I, J, Da]`.
    pub fn capsule_predict(&mut self, u: Var, w: Var) -> Result<Var> {
        let (tu, tw) = (self.value(u), self.value(w));
        if tu.rank() != 3 || tw.rank() != 4 || tw.shape()[0] != tu.shape()[1] || tw.shape()[2] != tu.shape()[2] {
            return Err(Error::dim("capsule_predict", format!("u {:?}, W {:?}", tu.shape(), tw.shape())));
        }
        let (l, ni, du) = (tu.shape()[0], tu.shape()[1], tu.shape()[2]);
        let (nj, da) = (tw.shape()[1], tw.shape()[3]);
        let (ud, wd) = (tu.data(), tw.data());
        let mut out = vec![T::zero(); l * ni * nj * da];
        for loc in 0..l {
            for i in 0..ni {
                let uvec = &ud[(loc * ni + i) * du..(loc * ni + i + 1) * du];
                for j in 0..nj {
                    let dst = &mut out[((loc * ni + i) * nj + j) * da..((loc * ni + i) * nj + j + 1) * da];
                    for (k, &uk) in uvec.iter().enumerate() {
                        let row = &wd[((i * nj + j) * du + k) * da..((i * nj + j) * du + k + 1) * da];
                        for (o, &wv) in dst.iter_mut().zip(row) {
                            *o += uk * wv;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![l, ni, nj, da], out);
        Ok(self.push(out, Op::CapsulePredict { u, w }, &[u, w]))
    }

    /// `s[l, j, :] = Σ_i c[l, i, j] · û[l, i, j, :]`.
    pub fn weighted_sum(&mut self, c: Var, u_hat: Var) -> Result<Var> {
        let (tc, tu) = (self.value(c), self.value(u_hat));
        if tc.rank() != 3 || tu.rank() != 4 || tu.shape()[..3] != *tc.shape() {
            return Err(Error::dim("weighted_sum", format!("c {:?}, û {:?}", tc.shape(), tu.shape())));
        }
        let (l, ni, nj, d) = (tu.shape()[0], tu.shape()[1], tu.shape()[2], tu.shape()[3]);
        let (cd, ud) = (tc.data(), tu.data());
        let mut out = vec![T::zero(); l * nj * d];
        for loc in 0..l {
            for i in 0..ni {
                for j in 0..nj {
                    let cij = cd[(loc * ni + i) * nj + j];
                    let src = &ud[((loc * ni + i) * nj + j) * d..((loc * ni + i) * nj + j + 1) * d];
                    let dst = &mut out[(loc * nj + j) * d..(loc * nj + j + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += cij * v;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![l, nj, d], out);
        Ok(self.push(out, Op::WeightedSum { c, u_hat }, &[c, u_hat]))
    }

    /// Squashing non-linearity along the last axis:
    /// `v = |s|^2 / (1 + |s|^2) · s / sqrt(|s|^2 + eps)`.
    pub fn squash(&mut self, s: Var, eps: T) -> Result<Var> {
        let t = self.value(s);
        if t.rank() == 0 {
            return Err(Error::dim("squash", "needs at least one axis"));
        }
        let d = *t.shape().last().unwrap();
        let mut out = t.clone();
        for chunk in out.data_mut().chunks_mut(d) {
            let q: T = chunk.iter().map(|&v| v * v).sum();
            let f = squash_factor(q, eps);
            chunk.iter_mut().for_each(|v| *v = *v * f);
        }
        Ok(self.push(out, Op::Squash { s, eps }, &[s]))
    }

    /// Agreement logits `a[l, i, j] = <v[l, j, :], û[l, i, j, :]>`.
    pub fn agreement(&mut self, v: Var, u_hat: Var) -> Result<Var> {
        let (tv, tu) = (self.value(v), self.value(u_hat));
        if tv.rank() != 3
            || tu.rank() != 4
            || tv.shape()[0] != tu.shape()[0]
            || tv.shape()[1] != tu.shape()[2]
            || tv.shape()[2] != tu.shape()[3]
        {
            return Err(Error::dim("agreement", format!("v {:?}, û {:?}", tv.shape(), tu.shape())));
        }
        let (l, ni, nj, d) = (tu.shape()[0], tu.shape()[1], tu.shape()[2], tu.shape()[3]);
        let (vd, ud) = (tv.data(), tu.data());
        let mut out = vec![T::zero(); l * ni * nj];
        for loc in 0..l {
            for i in 0..ni {
                for j in 0..nj {
                    let a = &ud[((loc * ni + i) * nj + j) * d..((loc * ni + i) * nj + j + 1) * d];
                    let b = &vd[(loc * nj + j) * d..(loc * nj + j + 1) * d];
                    out[(loc * ni + i) * nj + j] = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
                }
            }
        }
        let out = Tensor::from_parts(vec![l, ni, nj], out);
        Ok(self.push(out, Op::Agreement { v, u_hat }, &[v, u_hat]))
    }

    /// Gradient-difference penalty over the two trailing (spatial) axes:
    /// `Σ ||∇y| - |∇ŷ||^gamma` over vertical and horizontal neighbour pairs.
    pub fn gdl(&mut self, y: Var, y_hat: Var, gamma: u32) -> Result<Var> {
        let (ty, th) = (self.value(y), self.value(y_hat));
        same_shape("gdl", ty, th)?;
        if ty.rank() < 2 {
            return Err(Error::dim("gdl", format!("needs spatial axes, got {:?}", ty.shape())));
        }
        if gamma < 1 {
            return Err(Error::Contract("gdl exponent must be >= 1".into()));
        }
        let mut total = T::zero();
        for_each_gdl_pair(ty.shape(), |p, q| {
            let a = (ty.data()[p] - ty.data()[q]).abs();
            let b = (th.data()[p] - th.data()[q]).abs();
            total += (a - b).abs().powi(gamma as i32);
        });
        let out = Tensor::scalar(total);
        Ok(self.push(out, Op::Gdl { y, y_hat, gamma }, &[y, y_hat]))
    }

    /// Forward value `value`, backward passes the gradient to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, value: Tensor<T>) -> Result<Var> {
        same_shape("straight_through", self.value(x), &value)?;
        Ok(self.push(value, Op::StraightThrough(x), &[x]))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let t = self.value(loss);
        if t.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        self.backward_seeded(loss, Tensor::ones(t.shape()))
    }

    /// Reverse sweep starting from an explicit output gradient.
    pub fn backward_seeded(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        same_shape("backward", self.value(out), &seed)?;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = zip(g, tb, |gv, bv| gv * bv);
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = zip(g, ta, |gv, av| gv * av);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::AddChannelBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let c = g.shape()[0];
                    let inner = g.len() / c;
                    let db: Vec<T> = g.data().chunks(inner).map(|ch| ch.iter().copied().sum()).collect();
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![c], db));
                }
            }
            Op::Square(a) => {
                let d = zip(g, self.value(*a), |gv, x| gv * (x + x));
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let d = zip(g, self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (T::one() + x * (T::one() - s))
                });
                self.accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let d = zip(g, self.value(*a), |gv, x| if x > T::zero() { gv } else { gv * slope });
                self.accumulate(grads, *a, d);
            }
            Op::LogSigmoid(a) => {
                let d = zip(g, self.value(*a), |gv, x| gv * sigmoid(-x));
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n: T = lit(self.value(*a).len() as f64);
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), g.item() / n));
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_blocks(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut d = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: T = (0..n).map(|k| gd[at(k)] * yd[at(k)]).sum();
                        for k in 0..n {
                            d[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::ReduceNorm { x, axis, p } => {
                let tx = self.value(*x);
                let (outer, n, inner) = axis_blocks(tx.shape(), *axis);
                let (xd, yd, gd) = (tx.data(), y.data(), g.data());
                let mut d = vec![T::zero(); xd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let (gv, norm) = (gd[o * inner + i], yd[o * inner + i]);
                        for k in 0..n {
                            let at = (o * n + k) * inner + i;
                            d[at] = if *p == 1 {
                                gv * sign(xd[at])
                            } else if norm > T::zero() {
                                gv * xd[at] / norm
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut d = vec![T::zero(); m * k];
                    kernels::gemm(m, n, k, T::one(), g.data(), false, tb.data(), true, T::zero(), &mut d);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], d));
                }
                if self.wants(*b) {
                    let mut d = vec![T::zero(); k * n];
                    kernels::gemm(k, m, n, T::one(), ta.data(), true, g.data(), false, T::zero(), &mut d);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], d));
                }
            }
            Op::Permute { x, axes } => {
                let inv = kernels::inverse_permutation(axes);
                let (d, shape) = kernels::permute(g.data(), g.shape(), &inv);
                self.accumulate(grads, *x, Tensor::from_parts(shape, d));
            }
            Op::Reshape(x) => {
                let d = Tensor::from_parts(self.shape(*x).to_vec(), g.data().to_vec());
                self.accumulate(grads, *x, d);
            }
            Op::Conv2d { x, w, geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let c_out = tw.shape()[0];
                if self.wants(*x) {
                    let d = kernels::conv2d_grad_input(g.data(), tw.data(), c_out, geom);
                    self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
                }
                if self.wants(*w) {
                    let d = kernels::conv2d_grad_weight(tx.data(), g.data(), c_out, geom);
                    self.accumulate(grads, *w, Tensor::from_parts(tw.shape().to_vec(), d));
                }
            }
            Op::ConvTranspose2d { x, w, out_geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (dx, dw) =
                    kernels::conv_transpose2d_backward(tx.data(), g.data(), tw.data(), tx.shape()[0], out_geom);
                if self.wants(*x) {
                    self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), dx));
                }
                if self.wants(*w) {
                    self.accumulate(grads, *w, Tensor::from_parts(tw.shape().to_vec(), dw));
                }
            }
            Op::UpsampleNearest2x(x) => {
                let shape = self.shape(*x).to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let gd = g.data();
                let mut d = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            d[(ch * h + i / 2) * w + j / 2] += gd[(ch * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, d));
            }
            Op::CapsulePredict { u, w } => {
                let (tu, tw) = (self.value(*u), self.value(*w));
                let (l, ni, du) = (tu.shape()[0], tu.shape()[1], tu.shape()[2]);
                let (nj, da) = (tw.shape()[1], tw.shape()[3]);
                let (ud, wd, gd) = (tu.data(), tw.data(), g.data());
                let mut dud = vec![T::zero(); ud.len()];
                let mut dwd = vec![T::zero(); wd.len()];
                for loc in 0..l {
                    for i in 0..ni {
                        for j in 0..nj {
                            let grow = &gd[((loc * ni + i) * nj + j) * da..((loc * ni + i) * nj + j + 1) * da];
                            for k in 0..du {
                                let wrow_at = ((i * nj + j) * du + k) * da;
                                let wrow = &wd[wrow_at..wrow_at + da];
                                let acc: T = grow.iter().zip(wrow).map(|(&a, &b)| a * b).sum();
                                dud[(loc * ni + i) * du + k] += acc;
                                let uk = ud[(loc * ni + i) * du + k];
                                for (dw, &gv) in dwd[wrow_at..wrow_at + da].iter_mut().zip(grow) {
                                    *dw += uk * gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *u, Tensor::from_parts(tu.shape().to_vec(), dud));
                self.accumulate(grads, *w, Tensor::from_parts(tw.shape().to_vec(), dwd));
            }
            Op::WeightedSum { c, u_hat } => {
                let (tc, tu) = (self.value(*c), self.value(*u_hat));
                let (l, ni, nj, d) = (tu.shape()[0], tu.shape()[1], tu.shape()[2], tu.shape()[3]);
                let (cd, ud, gd) = (tc.data(), tu.data(), g.data());
                let mut dc = vec![T::zero(); cd.len()];
                let mut du = vec![T::zero(); ud.len()];
                for loc in 0..l {
                    for i in 0..ni {
                        for j in 0..nj {
                            let at = (loc * ni + i) * nj + j;
                            let urow = &ud[at * d..(at + 1) * d];
                            let grow = &gd[(loc * nj + j) * d..(loc * nj + j + 1) * d];
                            dc[at] = urow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                            for (o, &gv) in du[at * d..(at + 1) * d].iter_mut().zip(grow) {
                                *o = cd[at] * gv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *c, Tensor::from_parts(tc.shape().to_vec(), dc));
                self.accumulate(grads, *u_hat, Tensor::from_parts(tu.shape().to_vec(), du));
            }
            Op::Squash { s, eps } => {
                let ts = self.value(*s);
                let d = *ts.shape().last().unwrap();
                let mut out = vec![T::zero(); ts.len()];
                for ((sv, gv), o) in ts.data().chunks(d).zip(g.data().chunks(d)).zip(out.chunks_mut(d)) {
                    let q: T = sv.iter().map(|&v| v * v).sum();
                    let f = squash_factor(q, *eps);
                    let fp = squash_factor_deriv(q, *eps);
                    let gs: T = gv.iter().zip(sv).map(|(&a, &b)| a * b).sum();
                    let two: T = lit(2.0);
                    for k in 0..d {
                        o[k] = f * gv[k] + two * fp * gs * sv[k];
                    }
                }
                self.accumulate(grads, *s, Tensor::from_parts(ts.shape().to_vec(), out));
            }
            Op::Agreement { v, u_hat } => {
                let (tv, tu) = (self.value(*v), self.value(*u_hat));
                let (l, ni, nj, d) = (tu.shape()[0], tu.shape()[1], tu.shape()[2], tu.shape()[3]);
                let (vd, ud, gd) = (tv.data(), tu.data(), g.data());
                let mut dv = vec![T::zero(); vd.len()];
                let mut du = vec![T::zero(); ud.len()];
                for loc in 0..l {
                    for i in 0..ni {
                        for j in 0..nj {
                            let at = (loc * ni + i) * nj + j;
                            let gv = gd[at];
                            let vrow = &vd[(loc * nj + j) * d..(loc * nj + j + 1) * d];
                            let urow = &ud[at * d..(at + 1) * d];
                            for k in 0..d {
                                dv[(loc * nj + j) * d + k] += gv * urow[k];
                                du[at * d + k] = gv * vrow[k];
                            }
                        }
                    }
                }
                self.accumulate(grads, *v, Tensor::from_parts(tv.shape().to_vec(), dv));
                self.accumulate(grads, *u_hat, Tensor::from_parts(tu.shape().to_vec(), du));
            }
            Op::Gdl { y: ty, y_hat, gamma } => {
                let (a_t, b_t) = (self.value(*ty), self.value(*y_hat));
                let (yd, hd) = (a_t.data(), b_t.data());
                let gv = g.item();
                let gamma = *gamma;
                let mut dy = vec![T::zero(); yd.len()];
                let mut dh = vec![T::zero(); hd.len()];
                for_each_gdl_pair(a_t.shape(), |p, q| {
                    let dyv = yd[p] - yd[q];
                    let dhv = hd[p] - hd[q];
                    let e = dyv.abs() - dhv.abs();
                    // d|e|^gamma / de
                    let de = lit::<T>(gamma as f64) * e.abs().powi(gamma as i32 - 1) * sign(e) * gv;
                    let sy = de * sign(dyv);
                    dy[p] += sy;
                    dy[q] -= sy;
                    let sh = de * sign(dhv);
                    dh[p] -= sh;
                    dh[q] += sh;
                });
                self.accumulate(grads, *ty, Tensor::from_parts(a_t.shape().to_vec(), dy));
                self.accumulate(grads, *y_hat, Tensor::from_parts(b_t.shape().to_vec(), dh));
            }
            Op::StraightThrough(x) => self.accumulate(grads, *x, g.clone()),
        }
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Scale applied to `s` by the squash: `q / ((1 + q) sqrt(q + eps))`, `q = |s|^2`.
/// Largest output length: `q / (1 + q)` rounds to 1 for large `q`, so the
/// length is capped a few ulps below 1 to keep `|v| < 1` after rounding.
fn squash_length_cap<T: Scalar>() -> T {
    T::one() - lit::<T>(64.0) * T::epsilon()
}

pub(crate) fn squash_factor<T: Scalar>(q: T, eps: T) -> T {
    (q / (T::one() + q)).min(squash_length_cap()) / (q + eps).sqrt()
}

fn squash_factor_deriv<T: Scalar>(q: T, eps: T) -> T {
    let r = (q + eps).sqrt();
    let one_q = T::one() + q;
    let cap = squash_length_cap::<T>();
    if q / one_q >= cap {
        return -cap / (lit::<T>(2.0) * r * r * r);
    }
    (r - q * one_q / (r + r)) / (one_q * one_q * r * r)
}

/// Visits (index, previous-neighbour index) for every vertical pair and
/// every horizontal pair over the trailing two axes.
fn for_each_gdl_pair(shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let (h, w) = (shape[rank - 2], shape[rank - 1]);
    let planes = numel(&shape[..rank - 2]);
    for p in 0..planes {
        let base = p * h * w;
        for i in 1..h {
            for j in 0..w {
                f(base + i * w + j, base + (i - 1) * w + j);
            }
        }
        for i in 0..h {
            for j in 1..w {
                f(base + i * w + j, base + i * w + j - 1);
            }
        }
    }
}
