//! Wengert-list reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! list once, in strict reverse order, and consumes the tape.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    Log,
    Neg,
    AddConst(f64),
    MulConst(f64),
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    /// Population variance (divides by the element count).
    Var,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Pointwise {
        input: Var,
        kind: Pointwise,
    },
    Binary {
        lhs: Var,
        rhs: Var,
        kind: Binary,
    },
    Broadcast {
        input: Var,
    },
    Gap {
        input: Var,
    },
    Resize {
        input: Var,
    },
    AdaptivePool {
        input: Var,
    },
    Reduce {
        input: Var,
        kind: Reduction,
        out_index: Vec<usize>,
        count: usize,
    },
    Concat {
        inputs: Vec<Var>,
    },
    LogSoftmax {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    ScaleGrad {
        input: Var,
        factor: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(self.shapes[v.0].clone(), g.clone()))
    }

    pub fn data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, or zeros of the right shape if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let rg = self.any_grad(inputs);
        Ok(self.push(value, op, rg))
    }

    // ---------------------------------------------------------------- conv

    /// Cross-correlation with symmetric zero padding. The output extent
    /// `(H + 2·padding − k)/stride + 1` must be integral.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.conv2d_padded(input, weight, bias, stride, (padding, padding))
    }

    /// Like [`Tape::conv2d`] with separate leading/trailing padding, applied
    /// identically to both spatial axes.
    pub fn conv2d_padded(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        (pad_before, pad_after): (usize, usize),
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(TensorError::shape(OP, format!("input {xs:?}, weight {ws:?}")));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin {
            return Err(TensorError::shape(OP, format!("input channels {cin} vs weight {wcin}")));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::geometry(OP, format!("kernel {kh}x{kw} must be square and odd")));
        }
        if stride == 0 {
            return Err(TensorError::geometry(OP, "stride 0"));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(TensorError::shape(OP, format!("bias {:?} vs {cout} outputs", self.shape(bv))));
            }
        }
        let extent = |n: usize| -> Result<usize> {
            let span = (n + pad_before + pad_after)
                .checked_sub(kh)
                .ok_or_else(|| TensorError::geometry(OP, format!("extent {n} smaller than kernel {kh}")))?;
            if span % stride != 0 {
                return Err(TensorError::geometry(
                    OP,
                    format!("extent {n} with padding ({pad_before},{pad_after}), kernel {kh}, stride {stride} is not integral"),
                ));
            }
            Ok(span / stride + 1)
        };
        let geom = ConvGeom {
            cin,
            h,
            w,
            k: kh,
            stride,
            pad: pad_before,
            ho: extent(h)?,
            wo: extent(w)?,
        };

        let npix = geom.out_pixels();
        let patch = geom.patch();
        let mut out = vec![0.0; b * cout * npix];
        let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { patch * npix }];
        {
            let x = self.value(input).data();
            let wd = self.value(weight).data();
            for s in 0..b {
                let xs = &x[s * cin * h * w..(s + 1) * cin * h * w];
                let src: &[f64] = if geom.is_pointwise() {
                    xs
                } else {
                    kernels::im2col(xs, &geom, &mut cols);
                    &cols
                };
                let dst = &mut out[s * cout * npix..(s + 1) * cout * npix];
                kernels::gemm(cout, patch, npix, wd, (patch, 1), src, (npix, 1), 0.0, dst, (npix, 1));
            }
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for s in 0..b {
                    for (co, &bval) in bd.iter().enumerate() {
                        let off = (s * cout + co) * npix;
                        out[off..off + npix].iter_mut().for_each(|v| *v += bval);
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![b, cout, geom.ho, geom.wo], out);
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.record(OP, value, Op::Conv2d { input, weight, bias, geom }, &inputs)
    }

    /// `input · weightᵀ + bias` for `input [B, Din]`, `weight [Dout, Din]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::shape(OP, format!("input {xs:?}, weight {ws:?}")));
        }
        let (b, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(bv) = bias {
            if self.shape(bv) != [dout] {
                return Err(TensorError::shape(OP, format!("bias {:?} vs {dout} outputs", self.shape(bv))));
            }
        }
        let mut out = vec![0.0; b * dout];
        kernels::gemm(
            b,
            din,
            dout,
            self.value(input).data(),
            (din, 1),
            self.value(weight).data(),
            (1, din),
            0.0,
            &mut out,
            (dout, 1),
        );
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bd).for_each(|(o, &bb)| *o += bb);
            }
        }
        let value = Tensor::from_vec(vec![b, dout], out);
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.record(OP, value, Op::Linear { input, weight, bias }, &inputs)
    }

    // ----------------------------------------------------------- pointwise

    pub fn pointwise(&mut self, input: Var, kind: Pointwise) -> Result<Var> {
        let x = self.value(input);
        if kind == Pointwise::Log {
            if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                return Err(TensorError::domain("log", format!("non-positive input {bad}")));
            }
        }
        let value = match kind {
            Pointwise::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            Pointwise::Sigmoid => x.map(kernels::sigmoid),
            Pointwise::Log => x.map(f64::ln),
            Pointwise::Neg => x.map(|v| -v),
            Pointwise::AddConst(c) => x.map(|v| v + c),
            Pointwise::MulConst(c) => x.map(|v| v * c),
            Pointwise::Identity => x.clone(),
        };
        self.record("pointwise", value, Op::Pointwise { input, kind }, &[input])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Log)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Neg)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.pointwise(x, Pointwise::AddConst(c))
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.pointwise(x, Pointwise::MulConst(c))
    }

    pub fn identity(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Identity)
    }

    // -------------------------------------------------------------- binary

    /// Elementwise op on two tensors of identical shape.
    pub fn binary(&mut self, lhs: Var, rhs: Var, kind: Binary) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(TensorError::shape(
                "binary",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        if kind == Binary::Div && b.data().iter().any(|&v| v == 0.0) {
            return Err(TensorError::domain("div", "division by zero"));
        }
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(a.shape().to_vec(), data);
        self.record("binary", value, Op::Binary { lhs, rhs, kind }, &[lhs, rhs])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    /// Repeats `input` over trailing axes. The input shape must be a prefix of `shape`,
    /// e.g. `[B] → [B, C, H, W]` or `[B, C] → [B, C, H, W]`.
    pub fn broadcast(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let xs = x.shape();
        if xs.len() > shape.len() || xs != &shape[..xs.len()] {
            return Err(TensorError::shape(
                "broadcast",
                format!("{xs:?} is not a prefix of {shape:?}"),
            ));
        }
        let inner = numel(&shape[xs.len()..]);
        let mut data = Vec::with_capacity(x.numel() * inner);
        for &v in x.data() {
            data.extend(std::iter::repeat(v).take(inner));
        }
        let value = Tensor::from_vec(shape.to_vec(), data);
        self.record("broadcast", value, Op::Broadcast { input }, &[input])
    }

    // ------------------------------------------------------------- spatial

    /// Global average pooling `[B, C, H, W] → [B, C]`.
    pub fn gap(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 {
            return Err(TensorError::shape("gap", format!("expected [B,C,H,W], got {s:?}")));
        }
        let hw = s[2] * s[3];
        let data = x
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::from_vec(vec![s[0], s[1]], data);
        self.record("gap", value, Op::Gap { input }, &[input])
    }

    /// Bilinear resize with half-pixel centres (align-corners = false).
    pub fn resize_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape().to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 || s[2] == 0 || s[3] == 0 {
            return Err(TensorError::shape(
                "resize_bilinear",
                format!("input {s:?} to {out_h}x{out_w}"),
            ));
        }
        let (h, w) = (s[2], s[3]);
        let ty = kernels::bilinear_taps(h, out_h);
        let tx = kernels::bilinear_taps(w, out_w);
        let planes = s[0] * s[1];
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * wx0 + src[y0 * w + x1] * wx1;
                    let bottom = src[y1 * w + x0] * wx0 + src[y1 * w + x1] * wx1;
                    dst[oy * out_w + ox] = top * wy0 + bottom * wy1;
                }
            }
        }
        let value = Tensor::from_vec(vec![s[0], s[1], out_h, out_w], out);
        self.record("resize_bilinear", value, Op::Resize { input }, &[input])
    }

    /// Adaptive average pooling to `out_h × out_w` bins.
    pub fn adaptive_avg_pool(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape().to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 || s[2] == 0 || s[3] == 0 {
            return Err(TensorError::shape(
                "adaptive_avg_pool",
                format!("input {s:?} to {out_h}x{out_w}"),
            ));
        }
        let (h, w) = (s[2], s[3]);
        let by = kernels::pool_bins(h, out_h);
        let bx = kernels::pool_bins(w, out_w);
        let planes = s[0] * s[1];
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1)) in by.iter().enumerate() {
                for (ox, &(x0, x1)) in bx.iter().enumerate() {
                    let mut acc = 0.0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += src[yy * w + xx];
                        }
                    }
                    out[(p * out_h + oy) * out_w + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let value = Tensor::from_vec(vec![s[0], s[1], out_h, out_w], out);
        self.record("adaptive_avg_pool", value, Op::AdaptivePool { input }, &[input])
    }

    /// Concatenates along axis 1. All other extents must agree.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(TensorError::shape("concat", format!("rank of {s0:?} below 2")));
        }
        let inner = numel(&s0[2..]);
        let mut channels = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(TensorError::shape("concat", format!("{s:?} vs {s0:?}")));
            }
            channels += s[1];
        }
        let b = s0[0];
        let mut data = Vec::with_capacity(b * channels * inner);
        for s in 0..b {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[s * c * inner..(s + 1) * c * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = channels;
        let value = Tensor::from_vec(shape, data);
        self.record("concat", value, Op::Concat { inputs: inputs.to_vec() }, inputs)
    }

    // ---------------------------------------------------------- reductions

    /// Reduces over `axes` (which are removed from the output shape).
    pub fn reduce(&mut self, input: Var, kind: Reduction, axes: &[usize]) -> Result<Var> {
        const OP: &str = "reduce";
        let s = self.shape(input).to_vec();
        if axes.is_empty() {
            return Err(TensorError::EmptyReduction { op: OP, detail: "no axes".into() });
        }
        let mut reduced = vec![false; s.len()];
        for &a in axes {
            if a >= s.len() || reduced[a] {
                return Err(TensorError::shape(OP, format!("axis {a} invalid for {s:?}")));
            }
            reduced[a] = true;
        }
        let count: usize = axes.iter().map(|&a| s[a]).product();
        if count == 0 {
            return Err(TensorError::EmptyReduction {
                op: OP,
                detail: format!("zero-extent axis in {s:?}"),
            });
        }
        let out_shape: Vec<usize> = s
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&e, _)| e)
            .collect();
        // Output stride for every kept input axis; reduced axes contribute 0.
        let mut out_strides = vec![0usize; s.len()];
        let mut acc = 1;
        for d in (0..s.len()).rev() {
            if !reduced[d] {
                out_strides[d] = acc;
                acc *= s[d];
            }
        }
        let n = numel(&s);
        let mut out_index = Vec::with_capacity(n);
        let mut idx = vec![0usize; s.len()];
        for _ in 0..n {
            out_index.push(idx.iter().zip(&out_strides).map(|(i, st)| i * st).sum());
            for d in (0..s.len()).rev() {
                idx[d] += 1;
                if idx[d] < s[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let x = self.value(input).data();
        let m = numel(&out_shape);
        let mut sums = vec![0.0; m];
        for (v, &o) in x.iter().zip(&out_index) {
            sums[o] += v;
        }
        let data = match kind {
            Reduction::Sum => sums,
            Reduction::Mean => sums.iter().map(|v| v / count as f64).collect(),
            Reduction::Var => {
                let means: Vec<f64> = sums.iter().map(|v| v / count as f64).collect();
                let mut sq = vec![0.0; m];
                for (v, &o) in x.iter().zip(&out_index) {
                    let d = v - means[o];
                    sq[o] += d * d;
                }
                sq.iter().map(|v| v / count as f64).collect()
            }
        };
        let value = Tensor::from_vec(out_shape, data);
        self.record(
            OP,
            value,
            Op::Reduce {
                input,
                kind,
                out_index,
                count,
            },
            &[input],
        )
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, Reduction::Sum, axes)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, Reduction::Mean, axes)
    }

    pub fn var(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, Reduction::Var, axes)
    }

    /// Reduces over every axis, producing a rank-0 tensor.
    pub fn reduce_all(&mut self, x: Var, kind: Reduction) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        if axes.is_empty() {
            return match kind {
                Reduction::Sum | Reduction::Mean => self.identity(x),
                Reduction::Var => self.mul_const(x, 0.0),
            };
        }
        self.reduce(x, kind, &axes)
    }

    // ------------------------------------------------------------- softmax

    fn channel_layout(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(v);
        if s.len() < 2 || s[1] == 0 {
            return Err(TensorError::shape(op, format!("need [B, K, ...], got {s:?}")));
        }
        Ok((s[0], s[1], numel(&s[2..])))
    }

    /// Log-softmax over axis 1, max-shifted.
    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let (b, k, inner) = self.channel_layout("log_softmax", input)?;
        let x = self.value(input);
        let mut out = x.data().to_vec();
        for s in 0..b {
            for i in 0..inner {
                let at = |c: usize| (s * k + c) * inner + i;
                let mx = (0..k).map(|c| out[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..k).map(|c| (out[at(c)] - mx).exp()).sum::<f64>().ln();
                for c in 0..k {
                    out[at(c)] -= lse;
                }
            }
        }
        let value = Tensor::from_vec(x.shape().to_vec(), out);
        self.record("log_softmax", value, Op::LogSoftmax { input }, &[input])
    }

    /// Softmax over axis 1, max-shifted.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let (b, k, inner) = self.channel_layout("softmax", input)?;
        let x = self.value(input);
        let mut out = x.data().to_vec();
        for s in 0..b {
            for i in 0..inner {
                let at = |c: usize| (s * k + c) * inner + i;
                let mx = (0..k).map(|c| out[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..k {
                    let e = (out[at(c)] - mx).exp();
                    out[at(c)] = e;
                    z += e;
                }
                for c in 0..k {
                    out[at(c)] /= z;
                }
            }
        }
        let value = Tensor::from_vec(x.shape().to_vec(), out);
        self.record("softmax", value, Op::Softmax { input }, &[input])
    }

    /// Picks one channel per position: `[B, K, rest..] → [B, rest..]`.
    pub fn gather_channels(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let (b, k, inner) = self.channel_layout("gather", input)?;
        if index.len() != b * inner {
            return Err(TensorError::shape(
                "gather",
                format!("{} indices for {} positions", index.len(), b * inner),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&c| c >= k) {
            return Err(TensorError::domain("gather", format!("index {bad} outside 0..{k}")));
        }
        let x = self.value(input).data();
        let data = index
            .iter()
            .enumerate()
            .map(|(pos, &c)| x[((pos / inner) * k + c) * inner + pos % inner])
            .collect();
        let mut shape = self.shape(input).to_vec();
        shape.remove(1);
        let value = Tensor::from_vec(shape, data);
        self.record(
            "gather",
            value,
            Op::Gather {
                input,
                index: index.to_vec(),
            },
            &[input],
        )
    }

    /// Identity in the forward pass, multiplies the incoming gradient by `factor`.
    /// Exists only so gradient-check harnesses can plant a known-bad backward.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, input: Var, factor: f64) -> Var {
        let value = self.value(input).clone();
        let rg = self.requires_grad(input);
        self.push(value, Op::ScaleGrad { input, factor }, rg)
    }

    // ------------------------------------------------------------ backward

    /// Propagates from a single-element `root` and consumes the tape.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let rs = self.shape(root);
        if numel(rs) != 1 {
            return Err(TensorError::NonScalarRoot(rs.to_vec()));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        // Constant leaves never receive a gradient.
        for (g, nd) in grads.iter_mut().zip(&self.nodes) {
            if !nd.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let xs = val(*input).shape();
                let (b, cout) = (xs[0], val(*weight).shape()[0]);
                let (npix, patch) = (geom.out_pixels(), geom.patch());
                let plane = geom.cin * geom.h * geom.w;
                let x = val(*input).data();
                let wd = val(*weight).data();
                if let Some(bv) = bias.filter(|&bv| wants(bv)) {
                    let mut db = vec![0.0; cout];
                    for s in 0..b {
                        for (co, d) in db.iter_mut().enumerate() {
                            let off = (s * cout + co) * npix;
                            *d += g[off..off + npix].iter().sum::<f64>();
                        }
                    }
                    accumulate(grads, bv, db);
                }
                let need_w = wants(*weight);
                let need_x = wants(*input);
                let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { patch * npix }];
                let mut dw = vec![0.0; if need_w { cout * patch } else { 0 }];
                let mut dx = vec![0.0; if need_x { b * plane } else { 0 }];
                let mut dcols = vec![0.0; if need_x && !geom.is_pointwise() { patch * npix } else { 0 }];
                for s in 0..b {
                    let gs = &g[s * cout * npix..(s + 1) * cout * npix];
                    if need_w {
                        let xsample = &x[s * plane..(s + 1) * plane];
                        let src: &[f64] = if geom.is_pointwise() {
                            xsample
                        } else {
                            kernels::im2col(xsample, geom, &mut cols);
                            &cols
                        };
                        // dW[cout, patch] += g[cout, npix] · colsᵀ
                        kernels::gemm(cout, npix, patch, gs, (npix, 1), src, (1, npix), 1.0, &mut dw, (patch, 1));
                    }
                    if need_x {
                        let dxs = &mut dx[s * plane..(s + 1) * plane];
                        if geom.is_pointwise() {
                            kernels::gemm(patch, cout, npix, wd, (1, patch), gs, (npix, 1), 0.0, dxs, (npix, 1));
                        } else {
                            kernels::gemm(patch, cout, npix, wd, (1, patch), gs, (npix, 1), 0.0, &mut dcols, (npix, 1));
                            kernels::col2im(&dcols, geom, dxs);
                        }
                    }
                }
                if need_w {
                    accumulate(grads, *weight, dw);
                }
                if need_x {
                    accumulate(grads, *input, dx);
                }
            }
            Op::Linear { input, weight, bias } => {
                let xs = val(*input).shape();
                let (b, din) = (xs[0], xs[1]);
                let dout = val(*weight).shape()[0];
                if let Some(bv) = bias.filter(|&bv| wants(bv)) {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                    }
                    accumulate(grads, bv, db);
                }
                if wants(*weight) {
                    let mut dw = vec![0.0; dout * din];
                    kernels::gemm(dout, b, din, g, (1, dout), val(*input).data(), (din, 1), 0.0, &mut dw, (din, 1));
                    accumulate(grads, *weight, dw);
                }
                if wants(*input) {
                    let mut dx = vec![0.0; b * din];
                    kernels::gemm(b, dout, din, g, (dout, 1), val(*weight).data(), (din, 1), 0.0, &mut dx, (din, 1));
                    accumulate(grads, *input, dx);
                }
            }
            Op::Pointwise { input, kind } => {
                let x = val(*input).data();
                let y = node.value.data();
                let dx: Vec<f64> = match kind {
                    Pointwise::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect(),
                    Pointwise::Sigmoid => g
                        .iter()
                        .zip(y)
                        .map(|(&gi, &yi)| gi * yi * (1.0 - yi))
                        .collect(),
                    Pointwise::Log => g.iter().zip(x).map(|(&gi, &xi)| gi / xi).collect(),
                    Pointwise::Neg => g.iter().map(|&gi| -gi).collect(),
                    Pointwise::MulConst(c) => g.iter().map(|&gi| gi * c).collect(),
                    Pointwise::AddConst(_) | Pointwise::Identity => g.to_vec(),
                };
                accumulate(grads, *input, dx);
            }
            Op::Binary { lhs, rhs, kind } => {
                let a = val(*lhs).data();
                let b = val(*rhs).data();
                if wants(*lhs) {
                    let da = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().zip(b).map(|(gi, bi)| gi * bi).collect(),
                        Binary::Div => g.iter().zip(b).map(|(gi, bi)| gi / bi).collect(),
                    };
                    accumulate(grads, *lhs, da);
                }
                if wants(*rhs) {
                    let db = match kind {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|gi| -gi).collect(),
                        Binary::Mul => g.iter().zip(a).map(|(gi, ai)| gi * ai).collect(),
                        Binary::Div => g
                            .iter()
                            .zip(a.iter().zip(b))
                            .map(|(gi, (ai, bi))| -gi * ai / (bi * bi))
                            .collect(),
                    };
                    accumulate(grads, *rhs, db);
                }
            }
            Op::Broadcast { input } => {
                let m = val(*input).numel();
                let inner = g.len() / m;
                let dx = g.chunks(inner).map(|c| c.iter().sum()).collect();
                accumulate(grads, *input, dx);
            }
            Op::Gap { input } => {
                let s = val(*input).shape();
                let hw = s[2] * s[3];
                let mut dx = Vec::with_capacity(val(*input).numel());
                for &gi in g {
                    dx.extend(std::iter::repeat(gi / hw as f64).take(hw));
                }
                accumulate(grads, *input, dx);
            }
            Op::Resize { input } => {
                let s = val(*input).shape();
                let (h, w) = (s[2], s[3]);
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                let ty = kernels::bilinear_taps(h, oh);
                let tx = kernels::bilinear_taps(w, ow);
                let planes = s[0] * s[1];
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dp = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let gv = gp[oy * ow + ox];
                            dp[y0 * w + x0] += gv * wy0 * wx0;
                            dp[y0 * w + x1] += gv * wy0 * wx1;
                            dp[y1 * w + x0] += gv * wy1 * wx0;
                            dp[y1 * w + x1] += gv * wy1 * wx1;
                        }
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::AdaptivePool { input } => {
                let s = val(*input).shape();
                let (h, w) = (s[2], s[3]);
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                let by = kernels::pool_bins(h, oh);
                let bx = kernels::pool_bins(w, ow);
                let planes = s[0] * s[1];
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for (oy, &(y0, y1)) in by.iter().enumerate() {
                        for (ox, &(x0, x1)) in bx.iter().enumerate() {
                            let share = g[(p * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    dx[(p * h + yy) * w + xx] += share;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::Reduce {
                input,
                kind,
                out_index,
                count,
            } => {
                let x = val(*input).data();
                let nf = *count as f64;
                let dx: Vec<f64> = match kind {
                    Reduction::Sum => out_index.iter().map(|&o| g[o]).collect(),
                    Reduction::Mean => out_index.iter().map(|&o| g[o] / nf).collect(),
                    Reduction::Var => {
                        let mut means = vec![0.0; g.len()];
                        for (v, &o) in x.iter().zip(out_index) {
                            means[o] += v;
                        }
                        means.iter_mut().for_each(|m| *m /= nf);
                        x.iter()
                            .zip(out_index)
                            .map(|(v, &o)| 2.0 * (v - means[o]) / nf * g[o])
                            .collect()
                    }
                };
                accumulate(grads, *input, dx);
            }
            Op::Concat { inputs } => {
                let s = node.value.shape();
                let (b, total) = (s[0], s[1]);
                let inner = numel(&s[2..]);
                let mut offset = 0;
                for &v in inputs {
                    let c = val(v).shape()[1];
                    if wants(v) {
                        let mut dx = Vec::with_capacity(b * c * inner);
                        for smp in 0..b {
                            let start = (smp * total + offset) * inner;
                            dx.extend_from_slice(&g[start..start + c * inner]);
                        }
                        accumulate(grads, v, dx);
                    }
                    offset += c;
                }
            }
            Op::LogSoftmax { input } => {
                let s = node.value.shape();
                let (b, k, inner) = (s[0], s[1], numel(&s[2..]));
                let y = node.value.data();
                let mut dx = vec![0.0; g.len()];
                for smp in 0..b {
                    for i in 0..inner {
                        let at = |c: usize| (smp * k + c) * inner + i;
                        let gsum: f64 = (0..k).map(|c| g[at(c)]).sum();
                        for c in 0..k {
                            dx[at(c)] = g[at(c)] - y[at(c)].exp() * gsum;
                        }
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::Softmax { input } => {
                let s = node.value.shape();
                let (b, k, inner) = (s[0], s[1], numel(&s[2..]));
                let y = node.value.data();
                let mut dx = vec![0.0; g.len()];
                for smp in 0..b {
                    for i in 0..inner {
                        let at = |c: usize| (smp * k + c) * inner + i;
                        let dot: f64 = (0..k).map(|c| g[at(c)] * y[at(c)]).sum();
                        for c in 0..k {
                            dx[at(c)] = y[at(c)] * (g[at(c)] - dot);
                        }
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::Gather { input, index } => {
                let s = val(*input).shape();
                let (k, inner) = (s[1], numel(&s[2..]));
                let mut dx = vec![0.0; val(*input).numel()];
                for (pos, &c) in index.iter().enumerate() {
                    dx[((pos / inner) * k + c) * inner + pos % inner] += g[pos];
                }
                accumulate(grads, *input, dx);
            }
            Op::ScaleGrad { input, factor } => {
                accumulate(grads, *input, g.iter().map(|v| v * factor).collect());
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
        slot @ None => *slot = Some(delta),
    }
}
