//! Reverse-mode autodiff over a flat op tape.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Ops
//! append nodes and return [`TensorId`]s; [`Tape::backward`] walks the
//! tape in reverse and accumulates gradients into the leaves that were
//! registered with `requires_grad`. Repeated backward calls accumulate;
//! [`Tape::zero_grads`] resets. Every op output is scanned for
//! non-finite values and rejected immediately.
//!
//! Interior gradients are scratch local to one backward call, so only
//! leaf gradients are observable. A fresh tape per training step is the
//! intended usage.

use crate::error::TensorError;
use crate::kernels;
use crate::num::{one_minus_ulp, Element};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    SingleThread,
    MultiThread,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
    },
    ConvT2d {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
    },
    MaxPool2 {
        input: TensorId,
        argmax: Vec<u8>,
    },
    LeakyRelu {
        input: TensorId,
        alpha: f64,
    },
    Tanh {
        input: TensorId,
    },
    InstanceNorm {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        /// (mean, 1/sqrt(var+eps)) per (item, channel).
        stats: Vec<(T, T)>,
    },
    Concat {
        a: TensorId,
        b: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Div {
        a: TensorId,
        b: TensorId,
    },
    AddScalar {
        input: TensorId,
    },
    MulScalar {
        input: TensorId,
        c: f64,
    },
    Abs {
        input: TensorId,
    },
    MeanAll {
        input: TensorId,
    },
    SumAll {
        input: TensorId,
    },
    Reshape {
        input: TensorId,
    },
    CropSpatial {
        input: TensorId,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<TensorId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::ConvT2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                if let Some(b) = bias {
                    v.push(*b);
                }
                v
            }
            Op::InstanceNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Concat { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Div { a, b } => vec![*a, *b],
            Op::MaxPool2 { input, .. }
            | Op::LeakyRelu { input, .. }
            | Op::Tanh { input }
            | Op::AddScalar { input, .. }
            | Op::MulScalar { input, .. }
            | Op::Abs { input }
            | Op::MeanAll { input }
            | Op::SumAll { input }
            | Op::Reshape { input }
            | Op::CropSpatial { input } => vec![*input],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    exec: ExecMode,
}

impl<T: Element> Tape<T> {
    pub fn new(exec: ExecMode) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn exec_mode(&self) -> ExecMode {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn par(&self) -> bool {
        self.exec == ExecMode::MultiThread
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a `requires_grad` leaf, if backward ran.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn check(&self, op: &'static str, id: TensorId) -> Result<(), TensorError> {
        if id.0 >= self.nodes.len() {
            return Err(TensorError::UnknownId(id.0));
        }
        let _ = op;
        Ok(())
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
    ) -> Result<TensorId, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs,
            requires_grad: false,
            grad: None,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    // ── convolution ──────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId, TensorError> {
        const OP: &str = "conv2d";
        self.check(OP, input)?;
        self.check(OP, weight)?;
        if let Some(b) = bias {
            self.check(OP, b)?;
        }
        if stride == 0 {
            return Err(TensorError::Unsupported {
                op: OP,
                detail: "stride must be >= 1".into(),
            });
        }
        let (n, c, h, w) = self.value(input).as_nchw(OP)?;
        let wshape = self.value(weight).shape().to_vec();
        let [o, wc, k1, k2] = wshape.as_slice() else {
            return Err(TensorError::BadRank {
                op: OP,
                expected: "4 ([O,C,k,k])",
                got: wshape,
            });
        };
        let (o, wc, k) = (*o, *wc, *k1);
        if k != *k2 {
            return Err(TensorError::Unsupported {
                op: OP,
                detail: format!("kernel must be square, got {k}x{k2}"),
            });
        }
        if wc != c {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "input channels",
                expected: wc.to_string(),
                got: c.to_string(),
            });
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    dim: "bias channels",
                    expected: format!("[{o}]"),
                    got: format!("{bs:?}"),
                });
            }
        }
        let oh = kernels::conv_out_extent(OP, "height", h, k, stride, padding)?;
        let ow = kernels::conv_out_extent(OP, "width", w, k, stride, padding)?;

        let ckk = c * k * k;
        let patch = oh * ow;
        let mut out = vec![T::zero(); n * o * patch];
        let mut col = vec![T::zero(); ckk * patch];
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let bias_data = bias.map(|b| self.value(b).data());
        for item in 0..n {
            kernels::im2col(
                &x[item * c * h * w..(item + 1) * c * h * w],
                c,
                h,
                w,
                k,
                stride,
                padding,
                oh,
                ow,
                &mut col,
            );
            let out_item = &mut out[item * o * patch..(item + 1) * o * patch];
            if let Some(bd) = bias_data {
                for (oc, row) in out_item.chunks_exact_mut(patch).enumerate() {
                    row.fill(bd[oc]);
                }
            }
            kernels::gemm_acc(self.par(), out_item, wt, &col, o, ckk, patch);
        }
        let shape = self.value(input).shape_like_nchw(o, oh, ow);
        let value = Tensor::new(shape, out).expect("conv2d output shape");
        self.push(
            OP,
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        )
    }

    pub fn conv2d_transpose(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
    ) -> Result<TensorId, TensorError> {
        const OP: &str = "conv2d_transpose";
        self.check(OP, input)?;
        self.check(OP, weight)?;
        if let Some(b) = bias {
            self.check(OP, b)?;
        }
        if stride == 0 {
            return Err(TensorError::Unsupported {
                op: OP,
                detail: "stride must be >= 1".into(),
            });
        }
        let (n, c, h, w) = self.value(input).as_nchw(OP)?;
        let wshape = self.value(weight).shape().to_vec();
        let [wc, o, k1, k2] = wshape.as_slice() else {
            return Err(TensorError::BadRank {
                op: OP,
                expected: "4 ([C,O,k,k])",
                got: wshape,
            });
        };
        let (wc, o, k) = (*wc, *o, *k1);
        if k != *k2 {
            return Err(TensorError::Unsupported {
                op: OP,
                detail: format!("kernel must be square, got {k}x{k2}"),
            });
        }
        if k != stride {
            return Err(TensorError::Unsupported {
                op: OP,
                detail: format!("kernel {k} must equal stride {stride}"),
            });
        }
        if wc != c {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "input channels",
                expected: wc.to_string(),
                got: c.to_string(),
            });
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    dim: "bias channels",
                    expected: format!("[{o}]"),
                    got: format!("{bs:?}"),
                });
            }
        }
        let (oh, ow) = (h * stride, w * stride);
        let patch = h * w;
        let mut out = vec![T::zero(); n * o * oh * ow];
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let bias_data = bias.map(|b| self.value(b).data());
        if let Some(bd) = bias_data {
            for item in 0..n {
                let out_item = &mut out[item * o * oh * ow..(item + 1) * o * oh * ow];
                for (oc, row) in out_item.chunks_exact_mut(oh * ow).enumerate() {
                    row.fill(bd[oc]);
                }
            }
        }
        let mut m = vec![T::zero(); o * patch];
        let mut wdt = vec![T::zero(); o * c];
        for dy in 0..k {
            for dx in 0..k {
                // W^T slice for this offset: [O, C]
                for ci in 0..c {
                    for oc in 0..o {
                        wdt[oc * c + ci] = wt[((ci * o + oc) * k + dy) * k + dx];
                    }
                }
                for item in 0..n {
                    m.fill(T::zero());
                    kernels::gemm_acc(
                        self.par(),
                        &mut m,
                        &wdt,
                        &x[item * c * patch..(item + 1) * c * patch],
                        o,
                        c,
                        patch,
                    );
                    let out_item = &mut out[item * o * oh * ow..(item + 1) * o * oh * ow];
                    for oc in 0..o {
                        for y in 0..h {
                            let src = &m[oc * patch + y * w..oc * patch + (y + 1) * w];
                            let orow = (y * stride + dy) * ow;
                            let dst = &mut out_item[oc * oh * ow + orow..];
                            for (xcol, &v) in src.iter().enumerate() {
                                let oi = xcol * stride + dx;
                                dst[oi] = dst[oi] + v;
                            }
                        }
                    }
                }
            }
        }
        let shape = self.value(input).shape_like_nchw(o, oh, ow);
        let value = Tensor::new(shape, out).expect("conv2d_transpose output shape");
        self.push(
            OP,
            value,
            Op::ConvT2d {
                input,
                weight,
                bias,
                stride,
            },
        )
    }

    // ── pooling, activations, normalization ─────────────────────────

    pub fn maxpool2(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        const OP: &str = "maxpool2";
        self.check(OP, input)?;
        let (n, c, h, w) = self.value(input).as_nchw(OP)?;
        if h % 2 != 0 {
            return Err(TensorError::OddExtent {
                op: OP,
                dim: "height",
                got: h,
            });
        }
        if w % 2 != 0 {
            return Err(TensorError::OddExtent {
                op: OP,
                dim: "width",
                got: w,
            });
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * (h / 2) * (w / 2));
        let mut arg = Vec::with_capacity(out.capacity());
        for item in 0..n {
            let (o, a) = kernels::maxpool2_fwd(&x[item * c * h * w..(item + 1) * c * h * w], c, h, w);
            out.extend_from_slice(&o);
            arg.extend_from_slice(&a);
        }
        let shape = self.value(input).shape_like_nchw(c, h / 2, w / 2);
        let value = Tensor::new(shape, out).expect("maxpool2 output shape");
        self.push(OP, value, Op::MaxPool2 { input, argmax: arg })
    }

    pub fn leaky_relu(&mut self, input: TensorId, alpha: f64) -> Result<TensorId, TensorError> {
        const OP: &str = "leaky_relu";
        self.check(OP, input)?;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(TensorError::Unsupported {
                op: OP,
                detail: format!("alpha must be in (0, 1), got {alpha}"),
            });
        }
        let a = T::from_f64(alpha);
        let value = self.value(input).map(|v| if v > T::zero() { v } else { a * v });
        self.push(OP, value, Op::LeakyRelu { input, alpha })
    }

    /// tanh clamped to the largest value strictly below 1 in magnitude,
    /// so the output range stays inside the open interval (-1, 1) even
    /// where the float function saturates.
    pub fn tanh(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        const OP: &str = "tanh";
        self.check(OP, input)?;
        let lim: T = one_minus_ulp();
        let value = self
            .value(input)
            .map(|v| v.tanh().minimum(lim).maximum(-lim));
        self.push(OP, value, Op::Tanh { input })
    }

    pub fn instance_norm(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        const OP: &str = "instance_norm";
        self.check(OP, input)?;
        self.check(OP, gamma)?;
        self.check(OP, beta)?;
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(TensorError::Unsupported {
                op: OP,
                detail: format!("eps must be a positive finite value, got {eps}"),
            });
        }
        let (n, c, h, w) = self.value(input).as_nchw(OP)?;
        let plane = h * w;
        if plane < 2 {
            return Err(TensorError::DegenerateStats {
                op: OP,
                detail: format!("spatial extent {h}x{w} has fewer than 2 elements"),
            });
        }
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(id).shape();
            if s != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    dim: if name == "gamma" {
                        "gamma channels"
                    } else {
                        "beta channels"
                    },
                    expected: format!("[{c}]"),
                    got: format!("{s:?}"),
                });
            }
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let epst = T::from_f64(eps);
        let mut out = vec![T::zero(); x.len()];
        let mut stats = Vec::with_capacity(n * c);
        for item in 0..n {
            let xi = &x[item * c * plane..(item + 1) * c * plane];
            let st = kernels::channel_stats(xi, c, plane, epst);
            for (ci, &(mean, inv)) in st.iter().enumerate() {
                let dst = &mut out[item * c * plane + ci * plane..item * c * plane + (ci + 1) * plane];
                let src = &xi[ci * plane..(ci + 1) * plane];
                let (gc, bc) = (g[ci], b[ci]);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = gc * ((s - mean) * inv) + bc;
                }
            }
            stats.extend_from_slice(&st);
        }
        let shape = self.value(input).shape().to_vec();
        let value = Tensor::new(shape, out).expect("instance_norm output shape");
        self.push(
            OP,
            value,
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                stats,
            },
        )
    }

    // ── structure ops ────────────────────────────────────────────────

    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        const OP: &str = "concat_channels";
        self.check(OP, a)?;
        self.check(OP, b)?;
        let (na, ca, ha, wa) = self.value(a).as_nchw(OP)?;
        let (nb, cb, hb, wb) = self.value(b).as_nchw(OP)?;
        if na != nb {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "batch",
                expected: na.to_string(),
                got: nb.to_string(),
            });
        }
        if (ha, wa) != (hb, wb) {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "spatial extents",
                expected: format!("{ha}x{wa}"),
                got: format!("{hb}x{wb}"),
            });
        }
        let plane = ha * wa;
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        let mut out = Vec::with_capacity((ca + cb) * plane * na);
        for item in 0..na {
            out.extend_from_slice(&xa[item * ca * plane..(item + 1) * ca * plane]);
            out.extend_from_slice(&xb[item * cb * plane..(item + 1) * cb * plane]);
        }
        let shape = self.value(a).shape_like_nchw(ca + cb, ha, wa);
        let value = Tensor::new(shape, out).expect("concat output shape");
        self.push(OP, value, Op::Concat { a, b })
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
        make: impl Fn(TensorId, TensorId) -> Op<T>,
    ) -> Result<TensorId, TensorError> {
        self.check(op_name, a)?;
        self.check(op_name, b)?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                dim: "shape",
                expected: format!("{:?}", self.value(a).shape()),
                got: format!("{:?}", self.value(b).shape()),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("elementwise shape");
        self.push(op_name, value, make(a, b))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise("div", a, b, |x, y| x / y, |a, b| Op::Div { a, b })
    }

    pub fn add_scalar(&mut self, input: TensorId, c: f64) -> Result<TensorId, TensorError> {
        const OP: &str = "add_scalar";
        self.check(OP, input)?;
        let ct = T::from_f64(c);
        let value = self.value(input).map(|v| v + ct);
        self.push(OP, value, Op::AddScalar { input })
    }

    pub fn mul_scalar(&mut self, input: TensorId, c: f64) -> Result<TensorId, TensorError> {
        const OP: &str = "mul_scalar";
        self.check(OP, input)?;
        let ct = T::from_f64(c);
        let value = self.value(input).map(|v| v * ct);
        self.push(OP, value, Op::MulScalar { input, c })
    }

    pub fn abs(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        const OP: &str = "abs";
        self.check(OP, input)?;
        let value = self.value(input).map(|v| v.abs());
        self.push(OP, value, Op::Abs { input })
    }

    pub fn mean_all(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        const OP: &str = "mean_all";
        self.check(OP, input)?;
        let x = self.value(input);
        let inv = T::from_f64(1.0 / x.numel() as f64);
        let total: T = x.data().iter().copied().sum();
        self.push(OP, Tensor::scalar(total * inv), Op::MeanAll { input })
    }

    pub fn sum_all(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        const OP: &str = "sum_all";
        self.check(OP, input)?;
        let total: T = self.value(input).data().iter().copied().sum();
        self.push(OP, Tensor::scalar(total), Op::SumAll { input })
    }

    pub fn reshape(&mut self, input: TensorId, shape: &[usize]) -> Result<TensorId, TensorError> {
        const OP: &str = "reshape";
        self.check(OP, input)?;
        let x = self.value(input);
        let numel: usize = shape.iter().product();
        if numel != x.numel() || shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "element count",
                expected: x.numel().to_string(),
                got: format!("{shape:?}"),
            });
        }
        let value = Tensor::new(shape.to_vec(), x.data().to_vec()).expect("reshape");
        self.push(OP, value, Op::Reshape { input })
    }

    /// Top-left spatial crop to `nh x nw`.
    pub fn crop_spatial(
        &mut self,
        input: TensorId,
        nh: usize,
        nw: usize,
    ) -> Result<TensorId, TensorError> {
        const OP: &str = "crop_spatial";
        self.check(OP, input)?;
        let (n, c, h, w) = self.value(input).as_nchw(OP)?;
        if nh == 0 || nw == 0 || nh > h || nw > w {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "crop extent",
                expected: format!("within {h}x{w}"),
                got: format!("{nh}x{nw}"),
            });
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * nh * nw);
        for item in 0..n {
            for ci in 0..c {
                let base = (item * c + ci) * h * w;
                for y in 0..nh {
                    out.extend_from_slice(&x[base + y * w..base + y * w + nw]);
                }
            }
        }
        let shape = self.value(input).shape_like_nchw(c, nh, nw);
        let value = Tensor::new(shape, out).expect("crop shape");
        self.push(OP, value, Op::CropSpatial { input })
    }

    // ── backward ─────────────────────────────────────────────────────

    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::UnknownId(loss.0));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        for (i, node) in self.nodes.iter().enumerate() {
            for inp in node.op.inputs() {
                if inp.0 >= i {
                    return Err(TensorError::Cycle {
                        node: i,
                        input: inp.0,
                    });
                }
            }
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        scratch[loss.0] = Some(vec![T::one()]);
        let par = self.par();
        for i in (0..=loss.0).rev() {
            let Some(gout) = scratch[i].take() else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].requires_grad {
                    let numel = self.nodes[i].value.numel();
                    let g = self.nodes[i]
                        .grad
                        .get_or_insert_with(|| vec![T::zero(); numel]);
                    for (d, s) in g.iter_mut().zip(&gout) {
                        *d = *d + *s;
                    }
                }
                continue;
            }
            backprop_node(&self.nodes, par, i, &gout, &mut scratch);
        }
        Ok(())
    }
}

/// Gradient buffer for `id` if that node participates in the backward
/// pass, lazily allocated.
fn slot<'a, T: Element>(
    nodes: &[Node<T>],
    scratch: &'a mut [Option<Vec<T>>],
    id: TensorId,
) -> Option<&'a mut Vec<T>> {
    if !nodes[id.0].needs_grad {
        return None;
    }
    let numel = nodes[id.0].value.numel();
    Some(scratch[id.0].get_or_insert_with(|| vec![T::zero(); numel]))
}

fn add_assign<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn backprop_node<T: Element>(
    nodes: &[Node<T>],
    par: bool,
    i: usize,
    gout: &[T],
    scratch: &mut [Option<Vec<T>>],
) {
    match &nodes[i].op {
        Op::Leaf => unreachable!("handled by caller"),
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        } => {
            let (n, c, h, w) = nodes[input.0].value.as_nchw("conv2d").unwrap();
            let wshape = nodes[weight.0].value.shape();
            let (o, k) = (wshape[0], wshape[2]);
            let (_, _, oh, ow) = nodes[i].value.as_nchw("conv2d").unwrap();
            let (ckk, patch) = (c * k * k, oh * ow);
            let x = nodes[input.0].value.data();
            let wt = nodes[weight.0].value.data();

            let input_needs = nodes[input.0].needs_grad;
            let weight_needs = nodes[weight.0].needs_grad;
            let bias_needs = bias.map(|b| nodes[b.0].needs_grad).unwrap_or(false);

            let wt_t = if input_needs {
                Some(kernels::transpose(wt, o, ckk))
            } else {
                None
            };
            let mut col = vec![T::zero(); ckk * patch];
            let mut dw_acc = if weight_needs {
                Some(vec![T::zero(); o * ckk])
            } else {
                None
            };
            let mut db_acc = if bias_needs {
                Some(vec![T::zero(); o])
            } else {
                None
            };
            let mut dx_local: Option<Vec<T>> = input_needs.then(|| vec![T::zero(); n * c * h * w]);
            let mut dcol = vec![T::zero(); ckk * patch];

            for item in 0..n {
                let gy = &gout[item * o * patch..(item + 1) * o * patch];
                if weight_needs || input_needs {
                    if weight_needs {
                        kernels::im2col(
                            &x[item * c * h * w..(item + 1) * c * h * w],
                            c,
                            h,
                            w,
                            k,
                            *stride,
                            *padding,
                            oh,
                            ow,
                            &mut col,
                        );
                        let col_t = kernels::transpose(&col, ckk, patch);
                        kernels::gemm_acc(
                            par,
                            dw_acc.as_mut().unwrap(),
                            gy,
                            &col_t,
                            o,
                            patch,
                            ckk,
                        );
                    }
                    if let Some(wt_t) = &wt_t {
                        dcol.fill(T::zero());
                        kernels::gemm_acc(par, &mut dcol, wt_t, gy, ckk, o, patch);
                        kernels::col2im_acc(
                            &dcol,
                            c,
                            h,
                            w,
                            k,
                            *stride,
                            *padding,
                            oh,
                            ow,
                            &mut dx_local.as_mut().unwrap()[item * c * h * w..(item + 1) * c * h * w],
                        );
                    }
                }
                if let Some(db) = db_acc.as_mut() {
                    for (oc, row) in gy.chunks_exact(patch).enumerate() {
                        db[oc] = db[oc] + row.iter().copied().sum::<T>();
                    }
                }
            }
            if let Some(dx_local) = dx_local {
                if let Some(g) = slot(nodes, scratch, *input) {
                    add_assign(g, &dx_local);
                }
            }
            if let Some(dw) = dw_acc {
                if let Some(g) = slot(nodes, scratch, *weight) {
                    add_assign(g, &dw);
                }
            }
            if let (Some(db), Some(b)) = (db_acc, bias) {
                if let Some(g) = slot(nodes, scratch, *b) {
                    add_assign(g, &db);
                }
            }
        }
        Op::ConvT2d {
            input,
            weight,
            bias,
            stride,
        } => {
            let (n, c, h, w) = nodes[input.0].value.as_nchw("conv2d_transpose").unwrap();
            let wshape = nodes[weight.0].value.shape();
            let (o, k) = (wshape[1], wshape[2]);
            let (oh, ow) = (h * stride, w * stride);
            let patch = h * w;
            let x = nodes[input.0].value.data();
            let wt = nodes[weight.0].value.data();

            let input_needs = nodes[input.0].needs_grad;
            let weight_needs = nodes[weight.0].needs_grad;
            let bias_needs = bias.map(|b| nodes[b.0].needs_grad).unwrap_or(false);

            let mut dx_local: Option<Vec<T>> = input_needs.then(|| vec![T::zero(); n * c * patch]);
            let mut dw_local: Option<Vec<T>> =
                weight_needs.then(|| vec![T::zero(); c * o * k * k]);
            let mut msub = vec![T::zero(); o * patch];
            let mut wd = vec![T::zero(); c * o];
            let mut dwd = vec![T::zero(); c * o];

            for dy in 0..k {
                for dx_off in 0..k {
                    if input_needs {
                        for ci in 0..c {
                            for oc in 0..o {
                                wd[ci * o + oc] = wt[((ci * o + oc) * k + dy) * k + dx_off];
                            }
                        }
                    }
                    if weight_needs {
                        dwd.fill(T::zero());
                    }
                    for item in 0..n {
                        // gather the (dy, dx) subgrid of the output grad
                        let gy_item = &gout[item * o * oh * ow..(item + 1) * o * oh * ow];
                        for oc in 0..o {
                            for y in 0..h {
                                let src = &gy_item[oc * oh * ow + (y * stride + dy) * ow..];
                                let dst = &mut msub[oc * patch + y * w..oc * patch + (y + 1) * w];
                                for (xcol, d) in dst.iter_mut().enumerate() {
                                    *d = src[xcol * stride + dx_off];
                                }
                            }
                        }
                        if input_needs {
                            kernels::gemm_acc(
                                par,
                                &mut dx_local.as_mut().unwrap()
                                    [item * c * patch..(item + 1) * c * patch],
                                &wd,
                                &msub,
                                c,
                                o,
                                patch,
                            );
                        }
                        if weight_needs {
                            let msub_t = kernels::transpose(&msub, o, patch);
                            kernels::gemm_acc(
                                par,
                                &mut dwd,
                                &x[item * c * patch..(item + 1) * c * patch],
                                &msub_t,
                                c,
                                patch,
                                o,
                            );
                        }
                    }
                    if weight_needs {
                        let dw = dw_local.as_mut().unwrap();
                        for ci in 0..c {
                            for oc in 0..o {
                                let idx = ((ci * o + oc) * k + dy) * k + dx_off;
                                dw[idx] = dw[idx] + dwd[ci * o + oc];
                            }
                        }
                    }
                }
            }
            if let Some(dx_local) = dx_local {
                if let Some(g) = slot(nodes, scratch, *input) {
                    add_assign(g, &dx_local);
                }
            }
            if let Some(dw_local) = dw_local {
                if let Some(g) = slot(nodes, scratch, *weight) {
                    add_assign(g, &dw_local);
                }
            }
            if bias_needs {
                let mut db = vec![T::zero(); o];
                for item in 0..n {
                    let gy_item = &gout[item * o * oh * ow..(item + 1) * o * oh * ow];
                    for (oc, row) in gy_item.chunks_exact(oh * ow).enumerate() {
                        db[oc] = db[oc] + row.iter().copied().sum::<T>();
                    }
                }
                if let Some(g) = slot(nodes, scratch, bias.unwrap()) {
                    add_assign(g, &db);
                }
            }
        }
        Op::MaxPool2 { input, argmax } => {
            let (n, c, h, w) = nodes[input.0].value.as_nchw("maxpool2").unwrap();
            let per_out = c * (h / 2) * (w / 2);
            if let Some(g) = slot(nodes, scratch, *input) {
                for item in 0..n {
                    kernels::maxpool2_bwd(
                        &gout[item * per_out..(item + 1) * per_out],
                        &argmax[item * per_out..(item + 1) * per_out],
                        c,
                        h,
                        w,
                        &mut g[item * c * h * w..(item + 1) * c * h * w],
                    );
                }
            }
        }
        Op::LeakyRelu { input, alpha } => {
            let a = T::from_f64(*alpha);
            let x = nodes[input.0].value.data();
            if let Some(g) = slot(nodes, scratch, *input) {
                for ((d, &s), &xv) in g.iter_mut().zip(gout).zip(x) {
                    *d = *d + s * if xv > T::zero() { T::one() } else { a };
                }
            }
        }
        Op::Tanh { input } => {
            let y = nodes[i].value.data();
            if let Some(g) = slot(nodes, scratch, *input) {
                for ((d, &s), &yv) in g.iter_mut().zip(gout).zip(y) {
                    *d = *d + s * (T::one() - yv * yv);
                }
            }
        }
        Op::InstanceNorm {
            input,
            gamma,
            beta,
            stats,
        } => {
            let (n, c, h, w) = nodes[input.0].value.as_nchw("instance_norm").unwrap();
            let plane = h * w;
            let x = nodes[input.0].value.data();
            let gm = nodes[gamma.0].value.data();
            let inv_p = T::from_f64(1.0 / plane as f64);

            let input_needs = nodes[input.0].needs_grad;
            let gamma_needs = nodes[gamma.0].needs_grad;
            let beta_needs = nodes[beta.0].needs_grad;

            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx_local: Option<Vec<T>> = input_needs.then(|| vec![T::zero(); x.len()]);

            for item in 0..n {
                for ci in 0..c {
                    let (mean, inv) = stats[item * c + ci];
                    let base = (item * c + ci) * plane;
                    let xs = &x[base..base + plane];
                    let gy = &gout[base..base + plane];
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xhat = T::zero();
                    for (&dyv, &xv) in gy.iter().zip(xs) {
                        let xhat = (xv - mean) * inv;
                        sum_dy = sum_dy + dyv;
                        sum_dy_xhat = sum_dy_xhat + dyv * xhat;
                    }
                    if gamma_needs {
                        dgamma[ci] = dgamma[ci] + sum_dy_xhat;
                    }
                    if beta_needs {
                        dbeta[ci] = dbeta[ci] + sum_dy;
                    }
                    if let Some(dx) = dx_local.as_mut() {
                        let mean_dy = sum_dy * inv_p;
                        let mean_dy_xhat = sum_dy_xhat * inv_p;
                        let scale = gm[ci] * inv;
                        let dxs = &mut dx[base..base + plane];
                        for ((d, &dyv), &xv) in dxs.iter_mut().zip(gy).zip(xs) {
                            let xhat = (xv - mean) * inv;
                            *d = scale * (dyv - mean_dy - xhat * mean_dy_xhat);
                        }
                    }
                }
            }
            if let Some(dx_local) = dx_local {
                if let Some(g) = slot(nodes, scratch, *input) {
                    add_assign(g, &dx_local);
                }
            }
            if gamma_needs {
                if let Some(g) = slot(nodes, scratch, *gamma) {
                    add_assign(g, &dgamma);
                }
            }
            if beta_needs {
                if let Some(g) = slot(nodes, scratch, *beta) {
                    add_assign(g, &dbeta);
                }
            }
        }
        Op::Concat { a, b } => {
            let (n, ca, h, w) = nodes[a.0].value.as_nchw("concat_channels").unwrap();
            let (_, cb, _, _) = nodes[b.0].value.as_nchw("concat_channels").unwrap();
            let plane = h * w;
            let a_needs = nodes[a.0].needs_grad;
            let b_needs = nodes[b.0].needs_grad;
            let mut da_local: Option<Vec<T>> = a_needs.then(|| vec![T::zero(); n * ca * plane]);
            let mut db_local: Option<Vec<T>> = b_needs.then(|| vec![T::zero(); n * cb * plane]);
            for item in 0..n {
                let g_item = &gout[item * (ca + cb) * plane..(item + 1) * (ca + cb) * plane];
                if let Some(da) = da_local.as_mut() {
                    add_assign(
                        &mut da[item * ca * plane..(item + 1) * ca * plane],
                        &g_item[..ca * plane],
                    );
                }
                if let Some(db) = db_local.as_mut() {
                    add_assign(
                        &mut db[item * cb * plane..(item + 1) * cb * plane],
                        &g_item[ca * plane..],
                    );
                }
            }
            if let Some(da) = da_local {
                if let Some(g) = slot(nodes, scratch, *a) {
                    add_assign(g, &da);
                }
            }
            if let Some(db) = db_local {
                if let Some(g) = slot(nodes, scratch, *b) {
                    add_assign(g, &db);
                }
            }
        }
        Op::Add { a, b } => {
            if let Some(g) = slot(nodes, scratch, *a) {
                add_assign(g, gout);
            }
            if let Some(g) = slot(nodes, scratch, *b) {
                add_assign(g, gout);
            }
        }
        Op::Sub { a, b } => {
            if let Some(g) = slot(nodes, scratch, *a) {
                add_assign(g, gout);
            }
            if let Some(g) = slot(nodes, scratch, *b) {
                for (d, &s) in g.iter_mut().zip(gout) {
                    *d = *d - s;
                }
            }
        }
        Op::Mul { a, b } => {
            let xa = nodes[a.0].value.data();
            let xb = nodes[b.0].value.data();
            if nodes[a.0].needs_grad {
                if let Some(g) = slot(nodes, scratch, *a) {
                    for ((d, &s), &bv) in g.iter_mut().zip(gout).zip(xb) {
                        *d = *d + s * bv;
                    }
                }
            }
            if nodes[b.0].needs_grad {
                if let Some(g) = slot(nodes, scratch, *b) {
                    for ((d, &s), &av) in g.iter_mut().zip(gout).zip(xa) {
                        *d = *d + s * av;
                    }
                }
            }
        }
        Op::Div { a, b } => {
            let xb = nodes[b.0].value.data();
            let y = nodes[i].value.data();
            if nodes[a.0].needs_grad {
                if let Some(g) = slot(nodes, scratch, *a) {
                    for ((d, &s), &bv) in g.iter_mut().zip(gout).zip(xb) {
                        *d = *d + s / bv;
                    }
                }
            }
            if nodes[b.0].needs_grad {
                if let Some(g) = slot(nodes, scratch, *b) {
                    for (((d, &s), &yv), &bv) in g.iter_mut().zip(gout).zip(y).zip(xb) {
                        *d = *d - s * yv / bv;
                    }
                }
            }
        }
        Op::AddScalar { input } => {
            if let Some(g) = slot(nodes, scratch, *input) {
                add_assign(g, gout);
            }
        }
        Op::MulScalar { input, c } => {
            let ct = T::from_f64(*c);
            if let Some(g) = slot(nodes, scratch, *input) {
                for (d, &s) in g.iter_mut().zip(gout) {
                    *d = *d + s * ct;
                }
            }
        }
        Op::Abs { input } => {
            let x = nodes[input.0].value.data();
            if let Some(g) = slot(nodes, scratch, *input) {
                for ((d, &s), &xv) in g.iter_mut().zip(gout).zip(x) {
                    let sign = if xv > T::zero() {
                        T::one()
                    } else if xv < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    *d = *d + s * sign;
                }
            }
        }
        Op::MeanAll { input } => {
            let inv = T::from_f64(1.0 / nodes[input.0].value.numel() as f64);
            let s = gout[0] * inv;
            if let Some(g) = slot(nodes, scratch, *input) {
                for d in g.iter_mut() {
                    *d = *d + s;
                }
            }
        }
        Op::SumAll { input } => {
            let s = gout[0];
            if let Some(g) = slot(nodes, scratch, *input) {
                for d in g.iter_mut() {
                    *d = *d + s;
                }
            }
        }
        Op::Reshape { input } => {
            if let Some(g) = slot(nodes, scratch, *input) {
                add_assign(g, gout);
            }
        }
        Op::CropSpatial { input } => {
            let (n, c, h, w) = nodes[input.0].value.as_nchw("crop_spatial").unwrap();
            let (_, _, nh, nw) = nodes[i].value.as_nchw("crop_spatial").unwrap();
            if let Some(g) = slot(nodes, scratch, *input) {
                for item in 0..n {
                    for ci in 0..c {
                        let sbase = (item * c + ci) * nh * nw;
                        let dbase = (item * c + ci) * h * w;
                        for y in 0..nh {
                            add_assign(
                                &mut g[dbase + y * w..dbase + y * w + nw],
                                &gout[sbase + y * nw..sbase + (y + 1) * nw],
                            );
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), vals.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new(ExecMode::SingleThread);
        let x = tape.leaf(t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]), false);
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_rejects_channel_mismatch_naming_dimension() {
        let mut tape = Tape::<f64>::new(ExecMode::SingleThread);
        let x = tape.leaf(Tensor::zeros(&[2, 4, 4]), false);
        let w = tape.constant(Tensor::zeros(&[3, 5, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn conv2d_rejects_non_integral_output() {
        let mut tape = Tape::<f64>::new(ExecMode::SingleThread);
        let x = tape.leaf(Tensor::zeros(&[1, 6, 6]), false);
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let err = tape.conv2d(x, w, None, 2, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("height") && msg.contains("not divisible"), "{msg}");
    }

    #[test]
    fn conv_transpose_requires_kernel_eq_stride() {
        let mut tape = Tape::<f64>::new(ExecMode::SingleThread);
        let x = tape.leaf(Tensor::zeros(&[1, 4, 4]), false);
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(tape.conv2d_transpose(x, w, None, 2).is_err());
        let w2 = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let y = tape.conv2d_transpose(x, w2, None, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 8, 8]);
    }

    #[test]
    fn maxpool_requires_even_extents() {
        let mut tape = Tape::<f64>::new(ExecMode::SingleThread);
        let x = tape.leaf(Tensor::zeros(&[1, 3, 4]), false);
        let err = tape.maxpool2(x).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn instance_norm_rejects_single_element_plane() {
        let mut tape = Tape::<f64>::new(ExecMode::SingleThread);
        let x = tape.leaf(Tensor::zeros(&[2, 1, 1]), false);
        let g = tape.constant(Tensor::filled(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.instance_norm(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut tape = Tape::<f64>::new(ExecMode::SingleThread);
        let a = tape.leaf(t(&[2], &[1.0, 1.0]), false);
        let b = tape.leaf(t(&[2], &[0.0, 1.0]), false);
        let err = tape.div(a, b).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "div" }));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new(ExecMode::SingleThread);
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.abs(x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new(ExecMode::SingleThread);
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]), true);
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
        tape.zero_grads();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // y = mean(x*x + x*x) -> dy/dx = 4x/n
        let mut tape = Tape::<f64>::new(ExecMode::SingleThread);
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let both = tape.add(sq, sq).unwrap();
        let loss = tape.mean_all(both).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn leaky_relu_subgradient_at_zero_is_alpha() {
        let mut tape = Tape::<f64>::new(ExecMode::SingleThread);
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.2, 0.0, 2.0]);
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.2, 0.2, 1.0]);
    }

    #[test]
    fn tanh_stays_strictly_inside_unit_interval() {
        let mut tape = Tape::<f32>::new(ExecMode::SingleThread);
        let x = tape.leaf(
            Tensor::new(vec![4], vec![-500.0, -20.0, 20.0, 500.0]).unwrap(),
            false,
        );
        let y = tape.tanh(x).unwrap();
        for &v in tape.value(y).data() {
            assert!(v > -1.0 && v < 1.0, "{v}");
        }
    }

    #[test]
    fn concat_then_split_recovers_inputs() {
        let mut tape = Tape::<f64>::new(ExecMode::SingleThread);
        let a = tape.leaf(t(&[1, 2, 2], &[1., 2., 3., 4.]), true);
        let b = tape.leaf(t(&[2, 2, 2], &[5., 6., 7., 8., 9., 10., 11., 12.]), true);
        let cat = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(cat).shape(), &[3, 2, 2]);
        assert_eq!(&tape.value(cat).data()[..4], tape.value(a).data());
        assert_eq!(&tape.value(cat).data()[4..], tape.value(b).data());
        // gradient splits back to the sources
        let s = tape.sum_all(cat).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn instance_norm_output_statistics() {
        let mut tape = Tape::<f64>::new(ExecMode::SingleThread);
        let data: Vec<f64> = (0..64).map(|i| (i as f64 * 0.7).sin() * 2.0 + 0.5).collect();
        let x = tape.leaf(t(&[1, 8, 8], &data), false);
        let g = tape.constant(Tensor::filled(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.instance_norm(x, g, b, 1e-5).unwrap();
        let out = tape.value(y).data();
        let mean: f64 = out.iter().sum::<f64>() / 64.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
        assert!(mean.abs() <= 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }

    #[test]
    fn batched_matches_per_item() {
        let mut tape = Tape::<f64>::new(ExecMode::SingleThread);
        let img1: Vec<f64> = (0..32).map(|i| (i as f64 * 0.3).sin()).collect();
        let img2: Vec<f64> = (0..32).map(|i| (i as f64 * 0.9).cos()).collect();
        let wdat: Vec<f64> = (0..18).map(|i| (i as f64 * 0.17).sin()).collect();
        let both: Vec<f64> = img1.iter().chain(&img2).copied().collect();

        let xb = tape.leaf(t(&[2, 2, 4, 4], &both), false);
        let w = tape.constant(t(&[1, 2, 3, 3], &wdat));
        let bias = tape.constant(t(&[1], &[0.25]));
        let yb = tape.conv2d(xb, w, Some(bias), 1, 1).unwrap();

        let x1 = tape.leaf(t(&[2, 4, 4], &img1), false);
        let y1 = tape.conv2d(x1, w, Some(bias), 1, 1).unwrap();
        let x2 = tape.leaf(t(&[2, 4, 4], &img2), false);
        let y2 = tape.conv2d(x2, w, Some(bias), 1, 1).unwrap();

        assert_eq!(&tape.value(yb).data()[..16], tape.value(y1).data());
        assert_eq!(&tape.value(yb).data()[16..], tape.value(y2).data());
    }
}
