//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs for the adjoint. Nodes are stored in execution order, so a single
//! reverse sweep visits each node after all of its consumers.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// Mutable running statistics of one batch-norm layer.
pub struct RunningStats<'a> {
    pub mean: &'a mut [f64],
    pub var: &'a mut [f64],
    pub momentum: f64,
}

const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;
pub const BCE_CLAMP: f64 = 1e-7;

thread_local! {
    static SIGMOID_FAULT: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Test hook: while set, the sigmoid adjoint on this thread is off by 1%.
#[doc(hidden)]
pub fn set_sigmoid_fault(on: bool) {
    SIGMOID_FAULT.with(|f| f.set(on));
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    PRelu {
        x: Var,
        alpha: Var,
    },
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
    Windows {
        x: Var,
        origins: Vec<(usize, usize)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation record for one forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable recorded on a different tape");
        &self.nodes[v.index]
    }

    fn needs(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            value.data().iter().all(|v| v.is_finite()),
            "non-finite value produced"
        );
        let op = if needs_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Record an input; it is differentiated iff `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        let needs = tensor.requires_grad;
        tensor.grad = None;
        if needs {
            self.push(tensor, Op::Leaf, true)
        } else {
            self.push(tensor, Op::Constant, false)
        }
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Named parameter leaf, recorded once per tape.
    pub fn param(&mut self, name: &str, tensor: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let mut t = tensor.clone();
        t.requires_grad = trainable;
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Parameters in first-use order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.param_order
            .iter()
            .map(|n| (n.as_str(), self.params[n.as_str()]))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.node(v).value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).value.grad.as_deref()
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        self.backward_done = false;
    }

    // ---- elementwise -------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("lhs {sa:?} vs rhs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("shape checked")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.shape(), v.data().iter().map(|&a| f(a)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// `x + b` where `b`'s shape equals the trailing dims of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != sb[..] {
            return Err(Error::dim(
                "add_broadcast",
                format!("trailing axes of {sx:?} must equal {sb:?}"),
            ));
        }
        let bv = self.data(b).to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(bv.len()) {
            chunk.iter_mut().zip(&bv).for_each(|(o, &c)| *o += c);
        }
        out.requires_grad = false;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddBroadcast(x, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |a| a * c);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, c), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, sigmoid);
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map(x, f64::tanh);
        let needs = self.needs(x);
        self.push(out, Op::Tanh(x), needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.map(x, f64::exp);
        let needs = self.needs(x);
        self.push(out, Op::Exp(x), needs)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|&v| v <= 0.0) {
            return Err(Error::Numerical("log of a non-positive value".into()));
        }
        let out = self.map(x, f64::ln);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Log(x), needs))
    }

    /// Parametric ReLU; `alpha` is either one shared slope or one per channel
    /// (axis 1).
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let na = self.value(alpha).len();
        let channels = if shape.len() >= 2 { shape[1] } else { 1 };
        if na != 1 && na != channels {
            return Err(Error::dim(
                "prelu",
                format!("alpha has {na} slopes for {channels} channels (axis 1)"),
            ));
        }
        let inner: usize = if shape.len() >= 2 { shape[2..].iter().product() } else { 1 };
        let a = self.data(alpha).to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if *v <= 0.0 {
                let c = if na == 1 { 0 } else { (i / inner) % channels };
                *v *= a[c];
            }
        }
        let needs = self.needs(x) || self.needs(alpha);
        Ok(self.push(out, Op::PRelu { x, alpha }, needs))
    }

    // ---- linear algebra ---------------------------------------------

    /// `a · b` for rank-2 operands or batched rank-3 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, k2, n) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            _ => {
                return Err(Error::dim(
                    "matmul",
                    format!("unsupported operand ranks/batches {sa:?} x {sb:?}"),
                ))
            }
        };
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("contracted axes differ: {k} (lhs last) vs {k2} (rhs first)"),
            ));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for s in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &da[s * m * k..(s + 1) * m * k],
                    false,
                    &db[s * k * n..(s + 1) * k * n],
                    false,
                    &mut out[s * m * n..(s + 1) * m * n],
                    false,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), needs))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("transpose", format!("rank {} < 2", shape.len())));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for (blk, o) in src.chunks(r * c).zip(out.chunks_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    o[j * r + i] = blk[i * c + j];
                }
            }
        }
        let mut new_shape = shape;
        let l = new_shape.len();
        new_shape.swap(l - 2, l - 1);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Transpose(x), needs))
    }

    /// `x · wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let fan_in = *sx.last().expect("rank >= 1");
        if sw.len() != 2 || sw[1] != fan_in {
            return Err(Error::dim(
                "linear",
                format!("input last axis {fan_in} vs weight {sw:?} (expected [out, {fan_in}])"),
            ));
        }
        let fan_out = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::dim(
                    "linear",
                    format!("bias {:?} vs {fan_out} outputs", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).len() / fan_in;
        let mut out = vec![0.0; rows * fan_out];
        kernels::gemm(
            rows,
            fan_in,
            fan_out,
            self.data(x),
            false,
            self.data(w),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.data(b);
            for row in out.chunks_mut(fan_out) {
                row.iter_mut().zip(bv).for_each(|(o, &c)| *o += c);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = fan_out;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, needs))
    }

    /// Cross-correlation of a `[N,C,H,W]` (or `[C,H,W]`) input.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        let batched = sx.len() == 4;
        if !(sx.len() == 3 || batched) {
            return Err(Error::dim("conv2d", format!("input rank {} (want 3 or 4)", sx.len())));
        }
        let (n, c, h, w) = if batched {
            (sx[0], sx[1], sx[2], sx[3])
        } else {
            (1, sx[0], sx[1], sx[2])
        };
        if sk.len() != 4 {
            return Err(Error::dim("conv2d", format!("kernel rank {} (want 4)", sk.len())));
        }
        if sk[1] != c {
            return Err(Error::dim(
                "conv2d",
                format!("input channels {c} vs kernel C_in axis {}", sk[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be >= 1"));
        }
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded extent {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {:?} vs C_out {c_out}", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            c_in: c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
        };
        let out = kernels::conv2d_forward(
            self.data(x),
            n,
            &geom,
            self.data(kernel),
            bias.map(|b| self.data(b)),
            c_out,
        );
        let shape = if batched {
            vec![n, c_out, geom.out_h(), geom.out_w()]
        } else {
            vec![c_out, geom.out_h(), geom.out_w()]
        };
        let needs =
            self.needs(x) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Conv2d {
                x,
                w: kernel,
                b: bias,
                geom,
            },
            needs,
        ))
    }

    /// Max pooling over the last two axes.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("max_pool2d", "rank < 2"));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if k == 0 || stride == 0 || k > h || k > w {
            return Err(Error::dim(
                "max_pool2d",
                format!("window {k} stride {stride} on {h}x{w}"),
            ));
        }
        let planes = self.value(x).len() / (h * w);
        let (out, argmax) = kernels::max_pool2d_forward(self.data(x), planes, h, w, k, stride);
        let mut new_shape = shape;
        let l = new_shape.len();
        new_shape[l - 2] = (h - k) / stride + 1;
        new_shape[l - 1] = (w - k) / stride + 1;
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::MaxPool2d { x, argmax }, needs))
    }

    /// Batch normalization over axis 1; statistics span every other axis.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: RunningStats<'_>,
        mode: Mode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("batch_norm", "rank < 2"));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.value(gamma).len() != c || self.value(beta).len() != c || stats.mean.len() != c {
            return Err(Error::dim("batch_norm", format!("channel axis {c} vs affine/stat length")));
        }
        let m = (n * inner) as f64;
        let xv = self.data(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if mode.is_train() {
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * inner;
                    mean[ch] += xv[base..base + inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * inner;
                    var[ch] += xv[base..base + inner]
                        .iter()
                        .map(|&v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..c {
                stats.mean[ch] = (1.0 - stats.momentum) * stats.mean[ch] + stats.momentum * mean[ch];
                stats.var[ch] =
                    (1.0 - stats.momentum) * stats.var[ch] + stats.momentum * var[ch] * unbias;
            }
        } else {
            mean.copy_from_slice(stats.mean);
            var.copy_from_slice(stats.var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode.is_train(),
            },
            needs,
        ))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} of rank {}", shape.len())));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let n = shape[axis];
        let out = kernels::softmax_strided(self.data(x), outer, n, inner);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Softmax { x, outer, n, inner },
            needs,
        ))
    }

    /// Layer normalization over the last axis followed by `gamma ⊙ · + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", format!("affine length vs last axis {d}")));
        }
        let xv = self.data(x);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        let (g, b) = (self.data(gamma), self.data(beta));
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            inv_std[r] = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                let i = r * d + j;
                xhat[i] = (row[j] - mean) * inv_std[r];
                out[i] = g[j] * xhat[i] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Inverted dropout: train mode keeps each value with probability `1-p`
    /// and rescales by `1/(1-p)`; eval mode is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut SeededRng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if !mode.is_train() || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with a caller-supplied mask (fixed-mask gradient checks).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::dim("dropout", "mask length vs input length"));
        }
        let v = self.value(x);
        let out = Tensor::new(
            v.shape(),
            v.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask }, needs))
    }

    // ---- structural --------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} of rank {}", first.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} incompatible with {first:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let e = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * e..(o + 1) * e]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(&new_shape, out)?,
            Op::Slice { x, axis, start },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(v, Op::Reshape(x), needs))
    }

    /// Cut one `h×w` window per batch item out of `[N,C,H,W]`; `origins[n]`
    /// is the top-left cell for item `n`.
    pub fn windows(&mut self, x: Var, origins: &[(usize, usize)], h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || origins.len() != shape[0] {
            return Err(Error::dim(
                "windows",
                format!("input {shape:?} with {} origins", origins.len()),
            ));
        }
        let (n, c, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
        if origins.iter().any(|&(r, q)| r + h > hh || q + w > ww) {
            return Err(Error::dim("windows", format!("{h}x{w} window leaves {hh}x{ww} map")));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(n * c * h * w);
        for (s, &(r0, c0)) in origins.iter().enumerate() {
            for ch in 0..c {
                for i in 0..h {
                    let base = ((s * c + ch) * hh + r0 + i) * ww + c0;
                    out.extend_from_slice(&src[base..base + w]);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(&[n, c, h, w], out)?,
            Op::Windows {
                x,
                origins: origins.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.data(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Mean binary cross-entropy with probabilities clamped to
    /// `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        if targets.len() != self.value(p).len() {
            return Err(Error::dim(
                "bce",
                format!("{} targets for {} probabilities", targets.len(), self.value(p).len()),
            ));
        }
        let pv = self.data(p);
        let n = pv.len() as f64;
        let loss = pv
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        let needs = self.needs(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    // ---- reverse sweep ------------------------------------------------

    /// Populate `grad` on every differentiable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::Tape("loss was not recorded on this tape".into()));
        }
        if self.nodes[loss.index].value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.index].value.shape()
            )));
        }
        if !self.nodes[loss.index].needs_grad {
            return Err(Error::Tape(
                "loss is detached: no differentiable leaf contributes to it".into(),
            ));
        }
        if self.backward_done {
            return Err(Error::Tape(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let nodes = &self.nodes;
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let val = |v: Var| nodes[v.index].value.data();
            let shp = |v: Var| nodes[v.index].value.shape();
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                let n = &nodes[v.index];
                if n.needs_grad {
                    let len = n.value.len();
                    f(grads[v.index].get_or_insert_with(|| vec![0.0; len]));
                }
            };
            let out = node.value.data();
            match &node.op {
                Op::Constant => {}
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Add(a, b) => {
                    acc(*a, &mut |d| add_into(d, &g));
                    acc(*b, &mut |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |d| add_into(d, &g));
                    acc(*b, &mut |d| d.iter_mut().zip(&g).for_each(|(d, g)| *d -= g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, &mut |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * vb[k];
                        }
                    });
                    acc(*b, &mut |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * va[k];
                        }
                    });
                }
                Op::AddBroadcast(x, b) => {
                    acc(*x, &mut |d| add_into(d, &g));
                    acc(*b, &mut |d| {
                        let l = d.len();
                        for chunk in g.chunks(l) {
                            add_into(d, chunk);
                        }
                    });
                }
                Op::Scale(x, c) => acc(*x, &mut |d| {
                    d.iter_mut().zip(&g).for_each(|(d, g)| *d += c * g)
                }),
                Op::MatMul(a, b) => {
                    let sa = shp(*a);
                    let sb = shp(*b);
                    let (batch, m, k) = if sa.len() == 2 {
                        (1, sa[0], sa[1])
                    } else {
                        (sa[0], sa[1], sa[2])
                    };
                    let n = sb[sb.len() - 1];
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, &mut |d| {
                        for s in 0..batch {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                &g[s * m * n..(s + 1) * m * n],
                                false,
                                &vb[s * k * n..(s + 1) * k * n],
                                true,
                                &mut d[s * m * k..(s + 1) * m * k],
                                true,
                            );
                        }
                    });
                    acc(*b, &mut |d| {
                        for s in 0..batch {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                &va[s * m * k..(s + 1) * m * k],
                                true,
                                &g[s * m * n..(s + 1) * m * n],
                                false,
                                &mut d[s * k * n..(s + 1) * k * n],
                                true,
                            );
                        }
                    });
                }
                Op::Transpose(x) => {
                    let s = shp(*x);
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    acc(*x, &mut |d| {
                        for (db, gb) in d.chunks_mut(r * c).zip(g.chunks(r * c)) {
                            for i in 0..r {
                                for j in 0..c {
                                    db[i * c + j] += gb[j * r + i];
                                }
                            }
                        }
                    });
                }
                Op::Linear { x, w, b } => {
                    let sw = shp(*w);
                    let (fan_out, fan_in) = (sw[0], sw[1]);
                    let rows = g.len() / fan_out;
                    let (vx, vw) = (val(*x), val(*w));
                    acc(*x, &mut |d| {
                        kernels::gemm(rows, fan_out, fan_in, &g, false, vw, false, d, true)
                    });
                    acc(*w, &mut |d| {
                        kernels::gemm(fan_out, rows, fan_in, &g, true, vx, false, d, true)
                    });
                    if let Some(b) = b {
                        acc(*b, &mut |d| {
                            for row in g.chunks(fan_out) {
                                add_into(d, row);
                            }
                        });
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let sx = shp(*x);
                    let n = if sx.len() == 4 { sx[0] } else { 1 };
                    let c_out = shp(*w)[0];
                    let grads_c = kernels::conv2d_backward(
                        val(*x),
                        n,
                        geom,
                        val(*w),
                        c_out,
                        &g,
                        nodes[x.index].needs_grad,
                        nodes[w.index].needs_grad,
                        b.is_some_and(|b| nodes[b.index].needs_grad),
                    );
                    if let Some(dx) = grads_c.dx {
                        acc(*x, &mut |d| add_into(d, &dx));
                    }
                    if let Some(dw) = grads_c.dw {
                        acc(*w, &mut |d| add_into(d, &dw));
                    }
                    if let (Some(b), Some(db)) = (b, grads_c.db) {
                        acc(*b, &mut |d| add_into(d, &db));
                    }
                }
                Op::MaxPool2d { x, argmax } => acc(*x, &mut |d| {
                    for (o, &src) in argmax.iter().enumerate() {
                        d[src] += g[o];
                    }
                }),
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let s = shp(*x);
                    let (n, c) = (s[0], s[1]);
                    let inner: usize = s[2..].iter().product();
                    let m = (n * inner) as f64;
                    let gv = val(*gamma);
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for smp in 0..n {
                        for ch in 0..c {
                            let base = (smp * c + ch) * inner;
                            for i in base..base + inner {
                                sum_g[ch] += g[i];
                                sum_gx[ch] += g[i] * xhat[i];
                            }
                        }
                    }
                    acc(*gamma, &mut |d| add_into(d, &sum_gx));
                    acc(*beta, &mut |d| add_into(d, &sum_g));
                    acc(*x, &mut |d| {
                        for smp in 0..n {
                            for ch in 0..c {
                                let base = (smp * c + ch) * inner;
                                let k = gv[ch] * inv_std[ch];
                                for i in base..base + inner {
                                    d[i] += if *train {
                                        k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                                    } else {
                                        k * g[i]
                                    };
                                }
                            }
                        }
                    });
                }
                Op::PRelu { x, alpha } => {
                    let s = shp(*x);
                    let va = val(*alpha);
                    let vx = val(*x);
                    let na = va.len();
                    let channels = if s.len() >= 2 { s[1] } else { 1 };
                    let inner: usize = if s.len() >= 2 { s[2..].iter().product() } else { 1 };
                    let chan = |i: usize| if na == 1 { 0 } else { (i / inner) % channels };
                    acc(*x, &mut |d| {
                        for i in 0..d.len() {
                            d[i] += if vx[i] > 0.0 { g[i] } else { va[chan(i)] * g[i] };
                        }
                    });
                    acc(*alpha, &mut |d| {
                        for i in 0..vx.len() {
                            if vx[i] <= 0.0 {
                                d[chan(i)] += g[i] * vx[i];
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let skew = if SIGMOID_FAULT.with(|f| f.get()) { 1.01 } else { 1.0 };
                    acc(*x, &mut |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * out[k] * (1.0 - out[k]) * skew;
                        }
                    })
                }
                Op::Tanh(x) => acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * (1.0 - out[k] * out[k]);
                    }
                }),
                Op::Exp(x) => acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * out[k];
                    }
                }),
                Op::Log(x) => {
                    let vx = val(*x);
                    acc(*x, &mut |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] / vx[k];
                        }
                    })
                }
                Op::Softmax { x, outer, n, inner } => acc(*x, &mut |d| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..*n).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..*n {
                                d[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = val(*gamma);
                    let dd = gv.len();
                    acc(*gamma, &mut |d| {
                        for (r, row) in g.chunks(dd).enumerate() {
                            for j in 0..dd {
                                d[j] += row[j] * xhat[r * dd + j];
                            }
                        }
                    });
                    acc(*beta, &mut |d| {
                        for row in g.chunks(dd) {
                            add_into(d, row);
                        }
                    });
                    acc(*x, &mut |d| {
                        for (r, row) in g.chunks(dd).enumerate() {
                            let xh = &xhat[r * dd..(r + 1) * dd];
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..dd {
                                let dxh = row[j] * gv[j];
                                s1 += dxh;
                                s2 += dxh * xh[j];
                            }
                            let k = inv_std[r] / dd as f64;
                            for j in 0..dd {
                                let dxh = row[j] * gv[j];
                                d[r * dd + j] += k * (dd as f64 * dxh - s1 - xh[j] * s2);
                            }
                        }
                    });
                }
                Op::Dropout { x, mask } => acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * mask[k];
                    }
                }),
                Op::Concat { inputs, axis } => {
                    let s_out = node.value.shape();
                    let (outer, inner) = outer_inner(s_out, *axis);
                    let total = s_out[*axis] * inner;
                    let mut offset = 0;
                    for &v in inputs {
                        let e = shp(v)[*axis] * inner;
                        acc(v, &mut |d| {
                            for o in 0..outer {
                                add_into(
                                    &mut d[o * e..(o + 1) * e],
                                    &g[o * total + offset..o * total + offset + e],
                                );
                            }
                        });
                        offset += e;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let s_in = shp(*x);
                    let len = node.value.shape()[*axis];
                    let (outer, inner) = outer_inner(s_in, *axis);
                    acc(*x, &mut |d| {
                        for o in 0..outer {
                            let base = (o * s_in[*axis] + start) * inner;
                            add_into(
                                &mut d[base..base + len * inner],
                                &g[o * len * inner..(o + 1) * len * inner],
                            );
                        }
                    });
                }
                Op::Reshape(x) => acc(*x, &mut |d| add_into(d, &g)),
                Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
                Op::Mean(x) => acc(*x, &mut |d| {
                    let k = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|v| *v += k)
                }),
                Op::Bce { p, targets } => {
                    let vp = val(*p);
                    let n = vp.len() as f64;
                    acc(*p, &mut |d| {
                        for k in 0..d.len() {
                            let pk = vp[k];
                            if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pk) {
                                let y = targets[k];
                                d[k] += g[0] * (-y / pk + (1.0 - y) / (1.0 - pk)) / n;
                            }
                        }
                    });
                }
                Op::Windows { x, origins } => {
                    let s_in = shp(*x);
                    let (c, hh, ww) = (s_in[1], s_in[2], s_in[3]);
                    let s_out = node.value.shape();
                    let (h, w) = (s_out[2], s_out[3]);
                    acc(*x, &mut |d| {
                        for (s, &(r0, c0)) in origins.iter().enumerate() {
                            for ch in 0..c {
                                for i in 0..h {
                                    let dst = ((s * c + ch) * hh + r0 + i) * ww + c0;
                                    let src = ((s * c + ch) * h + i) * w;
                                    add_into(&mut d[dst..dst + w], &g[src..src + w]);
                                }
                            }
                        }
                    });
                }
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.grad = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    /// Gradients of named parameters after [`Tape::backward`].
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.params()
            .filter_map(|(name, v)| self.grad(v).map(|g| (name.to_string(), g.to_vec())))
            .collect()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
