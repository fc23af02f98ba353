//! Wengert tape. Ops append records in execution order, so node indices are
//! already a topological order and the backward sweep visits each node
//! exactly once, in reverse.
//!
//! Ops run through a tape compute their forward value unconditionally but
//! record a node only when some input participates in gradient flow. A
//! forward pass over plain values therefore leaves the tape empty.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{self, Border, WarpParams};
use super::{same_shape, NodeRef, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// 4-neighbor discrete Laplacian, row-major 3x3.
pub const LAPLACIAN_KERNEL: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];

/// Epsilon under the square root in the total-variation derivative. The
/// forward value is exact; only the derivative is smoothed at zero
/// difference.
pub const TV_GRAD_EPS: f64 = 1e-8;

const SQRT_GRAD_FLOOR: f64 = 1e-12;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Sqrt(usize),
    Relu(usize),
    Clamp01(usize),
    Sum(usize),
    Reshape(usize),
    BroadcastChannels(usize),
    MatVec { w: usize, x: usize, rows: usize, cols: usize },
    MatMulNt { a: usize, b: usize, ra: usize, rb: usize, k: usize },
    Conv2d { input: usize, kernel: usize, stride: usize, padding: usize },
    DepthwiseFixed { input: usize, kernel: Arc<Vec<f64>>, kh: usize, kw: usize, border: Border },
    AvgPool2(usize),
    AffineWarp { input: usize, params: WarpParams },
    StackRows(Vec<usize>),
    RowNormalize { input: usize, eps: f64 },
    ChannelNormalize { input: usize, eps: f64 },
    AddChannelBias { input: usize, bias: usize },
    SoftmaxCrossEntropy { logits: usize, softmax: Vec<f64>, target: usize },
    TvLoss(usize),
    Compose { x: usize, p: usize, mask: Arc<Vec<f64>> },
    CosineSim { a: usize, b: usize },
}

struct Node {
    op: Op,
    value: Arc<Vec<f64>>,
    shape: Vec<usize>,
}

impl Node {
    fn is_const(&self) -> bool {
        matches!(self.op, Op::Const)
    }
}

/// Recorded computation graph for one forward pass. Single-threaded.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Register a gradient leaf. Gradients are reported for leaves after
    /// [`Tape::backward`].
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let index = self.nodes.len();
        self.nodes.push(Node { op: Op::Leaf, value: t.data_arc(), shape: t.shape().to_vec() });
        Tensor::from_parts(
            t.data_arc(),
            t.shape().to_vec(),
            Some(NodeRef { tape_id: self.id, index }),
        )
    }

    fn push_const(&mut self, t: &Tensor) -> usize {
        let index = self.nodes.len();
        self.nodes.push(Node { op: Op::Const, value: t.data_arc(), shape: t.shape().to_vec() });
        index
    }

    fn input_index(&mut self, t: &Tensor) -> Result<usize> {
        match t.node() {
            Some(n) if n.tape_id == self.id => Ok(n.index),
            Some(_) => Err(Error::Contract("tensor belongs to a different tape".into())),
            None => Ok(self.push_const(t)),
        }
    }

    /// True if any input is already on this tape; errors on foreign tapes.
    fn any_on_tape(&self, inputs: &[&Tensor]) -> Result<bool> {
        let mut any = false;
        for t in inputs {
            if let Some(n) = t.node() {
                if n.tape_id != self.id {
                    return Err(Error::Contract("tensor belongs to a different tape".into()));
                }
                any = true;
            }
        }
        Ok(any)
    }

    fn guard_finite(value: &[f64], op: &str) -> Result<()> {
        if value.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{op} produced NaN/Inf")))
        }
    }

    fn record(&mut self, op: Op, value: Arc<Vec<f64>>, shape: Vec<usize>) -> Tensor {
        let index = self.nodes.len();
        self.nodes.push(Node { op, value: Arc::clone(&value), shape: shape.clone() });
        Tensor::from_parts(value, shape, Some(NodeRef { tape_id: self.id, index }))
    }

    fn value_of(&self, index: usize) -> &[f64] {
        &self.nodes[index].value
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_ew(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_ew(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_ew(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    fn binary_ew(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Tensor> {
        same_shape(a, b, name)?;
        let value: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        Self::guard_finite(&value, name)?;
        if !self.any_on_tape(&[a, b])? {
            return Ok(Tensor::from_parts(Arc::new(value), a.shape().to_vec(), None));
        }
        let ia = self.input_index(a)?;
        let ib = self.input_index(b)?;
        Ok(self.record(make(ia, ib), Arc::new(value), a.shape().to_vec()))
    }

    pub fn add_scalar(&mut self, a: &Tensor, s: f64) -> Result<Tensor> {
        self.unary_ew(a, "add_scalar", |x| x + s, Op::AddScalar)
    }

    pub fn mul_scalar(&mut self, a: &Tensor, s: f64) -> Result<Tensor> {
        self.unary_ew(a, "mul_scalar", |x| x * s, |i| Op::MulScalar(i, s))
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary_ew(a, "relu", |x| x.max(0.0), Op::Relu)
    }

    pub fn clamp01(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary_ew(a, "clamp01", |x| x.clamp(0.0, 1.0), Op::Clamp01)
    }

    pub fn sqrt(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric("sqrt of negative value".into()));
        }
        self.unary_ew(a, "sqrt", f64::sqrt, Op::Sqrt)
    }

    fn unary_ew(
        &mut self,
        a: &Tensor,
        name: &str,
        f: impl Fn(f64) -> f64,
        make: impl FnOnce(usize) -> Op,
    ) -> Result<Tensor> {
        let value: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
        Self::guard_finite(&value, name)?;
        if !self.any_on_tape(&[a])? {
            return Ok(Tensor::from_parts(Arc::new(value), a.shape().to_vec(), None));
        }
        let ia = self.input_index(a)?;
        Ok(self.record(make(ia), Arc::new(value), a.shape().to_vec()))
    }

    // ---- reductions and shape --------------------------------------------

    /// Sum of all elements, scalar output.
    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let value = vec![a.data().iter().sum::<f64>()];
        Self::guard_finite(&value, "sum")?;
        if !self.any_on_tape(&[a])? {
            return Ok(Tensor::from_parts(Arc::new(value), Vec::new(), None));
        }
        let ia = self.input_index(a)?;
        Ok(self.record(Op::Sum(ia), Arc::new(value), Vec::new()))
    }

    /// Mean of all elements.
    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.numel() == 0 {
            return Err(Error::Parameter("mean of empty tensor".into()));
        }
        let n = a.numel() as f64;
        let s = self.sum(a)?;
        self.mul_scalar(&s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                a.shape(),
                shape
            )));
        }
        if !self.any_on_tape(&[a])? {
            return Ok(Tensor::from_parts(a.data_arc(), shape.to_vec(), None));
        }
        let ia = self.input_index(a)?;
        Ok(self.record(Op::Reshape(ia), a.data_arc(), shape.to_vec()))
    }

    /// Replicate an [h, w] tensor into [c, h, w].
    pub fn broadcast_channels(&mut self, a: &Tensor, c: usize) -> Result<Tensor> {
        if a.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "broadcast_channels expects rank 2, got {:?}",
                a.shape()
            )));
        }
        let (h, w) = (a.shape()[0], a.shape()[1]);
        let mut value = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            value.extend_from_slice(a.data());
        }
        let shape = vec![c, h, w];
        if !self.any_on_tape(&[a])? {
            return Ok(Tensor::from_parts(Arc::new(value), shape, None));
        }
        let ia = self.input_index(a)?;
        Ok(self.record(Op::BroadcastChannels(ia), Arc::new(value), shape))
    }

    /// Stack equal-length rank-1 tensors into a [rows, k] matrix.
    pub fn stack_rows(&mut self, rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::Parameter("stack_rows of empty list".into()));
        }
        let k = rows[0].numel();
        for r in rows {
            if r.shape().len() != 1 || r.numel() != k {
                return Err(Error::Dimension("stack_rows expects equal-length rank-1 rows".into()));
            }
        }
        let mut value = Vec::with_capacity(rows.len() * k);
        for r in rows {
            value.extend_from_slice(r.data());
        }
        let shape = vec![rows.len(), k];
        let refs: Vec<&Tensor> = rows.iter().collect();
        if !self.any_on_tape(&refs)? {
            return Ok(Tensor::from_parts(Arc::new(value), shape, None));
        }
        let mut idx = Vec::with_capacity(rows.len());
        for r in rows {
            idx.push(self.input_index(r)?);
        }
        Ok(self.record(Op::StackRows(idx), Arc::new(value), shape))
    }

    // ---- linear algebra ----------------------------------------------------

    /// y = W x with W: [rows, cols], x: [cols].
    pub fn matvec(&mut self, w: &Tensor, x: &Tensor) -> Result<Tensor> {
        if w.shape().len() != 2 || x.shape().len() != 1 || w.shape()[1] != x.numel() {
            return Err(Error::Dimension(format!(
                "matvec: W {:?} vs x {:?}",
                w.shape(),
                x.shape()
            )));
        }
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let value = kernels::matvec(w.data(), x.data(), rows, cols);
        Self::guard_finite(&value, "matvec")?;
        if !self.any_on_tape(&[w, x])? {
            return Ok(Tensor::from_parts(Arc::new(value), vec![rows], None));
        }
        let iw = self.input_index(w)?;
        let ix = self.input_index(x)?;
        Ok(self.record(Op::MatVec { w: iw, x: ix, rows, cols }, Arc::new(value), vec![rows]))
    }

    /// C = A B^T with A: [ra, k], B: [rb, k].
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[1] {
            return Err(Error::Dimension(format!(
                "matmul_nt: A {:?} vs B {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (ra, k) = (a.shape()[0], a.shape()[1]);
        let rb = b.shape()[0];
        let value = kernels::matmul_nt(a.data(), b.data(), ra, rb, k);
        Self::guard_finite(&value, "matmul_nt")?;
        let shape = vec![ra, rb];
        if !self.any_on_tape(&[a, b])? {
            return Ok(Tensor::from_parts(Arc::new(value), shape, None));
        }
        let ia = self.input_index(a)?;
        let ib = self.input_index(b)?;
        Ok(self.record(Op::MatMulNt { a: ia, b: ib, ra, rb, k }, Arc::new(value), shape))
    }

    // ---- convolution and image ops -----------------------------------------

    /// input: [c_in, h, w], kernel: [c_out, c_in, k, k].
    pub fn conv2d(
        &mut self,
        input: &Tensor,
        kernel: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let (ci, h, w) = input.chw()?;
        if kernel.shape().len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d kernel must be rank 4, got {:?}",
                kernel.shape()
            )));
        }
        let (co, kci, k, k2) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        if kci != ci || k != k2 {
            return Err(Error::Dimension(format!(
                "conv2d: input {:?} vs kernel {:?}",
                input.shape(),
                kernel.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {k} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let value = kernels::conv2d_forward(input.data(), ci, h, w, kernel.data(), co, k, stride, padding);
        Self::guard_finite(&value, "conv2d")?;
        let oh = kernels::conv2d_out_dim(h, k, stride, padding);
        let ow = kernels::conv2d_out_dim(w, k, stride, padding);
        let shape = vec![co, oh, ow];
        if !self.any_on_tape(&[input, kernel])? {
            return Ok(Tensor::from_parts(Arc::new(value), shape, None));
        }
        let ii = self.input_index(input)?;
        let ik = self.input_index(kernel)?;
        Ok(self.record(Op::Conv2d { input: ii, kernel: ik, stride, padding }, Arc::new(value), shape))
    }

    /// Same-size depthwise convolution with a constant [kh, kw] kernel.
    /// Differentiable w.r.t. the input only.
    pub fn depthwise_fixed(
        &mut self,
        input: &Tensor,
        kernel: &[f64],
        kh: usize,
        kw: usize,
        border: Border,
    ) -> Result<Tensor> {
        let (c, h, w) = input.chw()?;
        if kernel.len() != kh * kw || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Parameter("depthwise_fixed kernel must be odd-sized".into()));
        }
        let value = kernels::depthwise_fixed_forward(input.data(), c, h, w, kernel, kh, kw, border);
        Self::guard_finite(&value, "depthwise_fixed")?;
        let shape = input.shape().to_vec();
        if !self.any_on_tape(&[input])? {
            return Ok(Tensor::from_parts(Arc::new(value), shape, None));
        }
        let ii = self.input_index(input)?;
        let op = Op::DepthwiseFixed {
            input: ii,
            kernel: Arc::new(kernel.to_vec()),
            kh,
            kw,
            border,
        };
        Ok(self.record(op, Arc::new(value), shape))
    }

    pub fn avgpool2(&mut self, input: &Tensor) -> Result<Tensor> {
        let (c, h, w) = input.chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!("avgpool2 needs even dims, got {h}x{w}")));
        }
        let value = kernels::avgpool2_forward(input.data(), c, h, w);
        Self::guard_finite(&value, "avgpool2")?;
        let shape = vec![c, h / 2, w / 2];
        if !self.any_on_tape(&[input])? {
            return Ok(Tensor::from_parts(Arc::new(value), shape, None));
        }
        let ii = self.input_index(input)?;
        Ok(self.record(Op::AvgPool2(ii), Arc::new(value), shape))
    }

    /// Bilinear affine warp with fixed parameters, zero border.
    pub fn affine_warp(&mut self, input: &Tensor, params: WarpParams) -> Result<Tensor> {
        let (c, h, w) = input.chw()?;
        let value = kernels::affine_warp_forward(input.data(), c, h, w, &params);
        Self::guard_finite(&value, "affine_warp")?;
        let shape = input.shape().to_vec();
        if !self.any_on_tape(&[input])? {
            return Ok(Tensor::from_parts(Arc::new(value), shape, None));
        }
        let ii = self.input_index(input)?;
        Ok(self.record(Op::AffineWarp { input: ii, params }, Arc::new(value), shape))
    }

    /// out[c, :, :] = x[c, :, :] + bias[c].
    pub fn add_channel_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (c, h, w) = x.chw()?;
        if bias.shape() != [c] {
            return Err(Error::Dimension(format!(
                "add_channel_bias: input {:?} vs bias {:?}",
                x.shape(),
                bias.shape()
            )));
        }
        let mut value = Vec::with_capacity(x.numel());
        for ch in 0..c {
            let b = bias.data()[ch];
            value.extend(x.data()[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v + b));
        }
        Self::guard_finite(&value, "add_channel_bias")?;
        let shape = x.shape().to_vec();
        if !self.any_on_tape(&[x, bias])? {
            return Ok(Tensor::from_parts(Arc::new(value), shape, None));
        }
        let ix = self.input_index(x)?;
        let ib = self.input_index(bias)?;
        Ok(self.record(Op::AddChannelBias { input: ix, bias: ib }, Arc::new(value), shape))
    }

    // ---- normalization -------------------------------------------------------

    /// L2-normalize a rank-1 vector or every row of a [rows, k] matrix.
    /// With `eps == 0` a zero-norm row is a degenerate-input error.
    pub fn l2_normalize(&mut self, a: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, k) = match a.shape().len() {
            1 => (1, a.numel()),
            2 => (a.shape()[0], a.shape()[1]),
            _ => {
                return Err(Error::Dimension(format!(
                    "l2_normalize expects rank 1 or 2, got {:?}",
                    a.shape()
                )))
            }
        };
        let mut value = vec![0.0; a.numel()];
        for r in 0..rows {
            let row = &a.data()[r * k..(r + 1) * k];
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            if norm < NORM_FLOOR {
                return Err(Error::Degenerate("l2_normalize of zero-norm row".into()));
            }
            for (o, &v) in value[r * k..(r + 1) * k].iter_mut().zip(row.iter()) {
                *o = v / norm;
            }
        }
        Self::guard_finite(&value, "l2_normalize")?;
        let shape = a.shape().to_vec();
        if !self.any_on_tape(&[a])? {
            return Ok(Tensor::from_parts(Arc::new(value), shape, None));
        }
        let ia = self.input_index(a)?;
        Ok(self.record(Op::RowNormalize { input: ia, eps }, Arc::new(value), shape))
    }

    /// L2-normalize the channel vector at every spatial position of a
    /// [c, h, w] tensor; `eps` stabilizes all-zero activations.
    pub fn channel_l2_normalize(&mut self, a: &Tensor, eps: f64) -> Result<Tensor> {
        let (c, h, w) = a.chw()?;
        if eps <= 0.0 {
            return Err(Error::Parameter("channel_l2_normalize needs eps > 0".into()));
        }
        let hw = h * w;
        let mut value = vec![0.0; a.numel()];
        for pos in 0..hw {
            let mut s = 0.0;
            for ch in 0..c {
                let v = a.data()[ch * hw + pos];
                s += v * v;
            }
            let norm = (s + eps).sqrt();
            for ch in 0..c {
                value[ch * hw + pos] = a.data()[ch * hw + pos] / norm;
            }
        }
        Self::guard_finite(&value, "channel_l2_normalize")?;
        let shape = a.shape().to_vec();
        if !self.any_on_tape(&[a])? {
            return Ok(Tensor::from_parts(Arc::new(value), shape, None));
        }
        let ia = self.input_index(a)?;
        Ok(self.record(Op::ChannelNormalize { input: ia, eps }, Arc::new(value), shape))
    }

    // ---- losses -----------------------------------------------------------

    /// Numerically stable softmax cross-entropy against a class index.
    pub fn softmax_cross_entropy(&mut self, logits: &Tensor, target: usize) -> Result<Tensor> {
        if logits.shape().len() != 1 {
            return Err(Error::Dimension("softmax_cross_entropy expects rank-1 logits".into()));
        }
        if target >= logits.numel() {
            return Err(Error::Parameter(format!(
                "target {} out of range for {} classes",
                target,
                logits.numel()
            )));
        }
        let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.data().iter().map(|&v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let softmax: Vec<f64> = exps.iter().map(|&e| e / denom).collect();
        let loss = denom.ln() + max - logits.data()[target];
        let value = vec![loss];
        Self::guard_finite(&value, "softmax_cross_entropy")?;
        if !self.any_on_tape(&[logits])? {
            return Ok(Tensor::from_parts(Arc::new(value), Vec::new(), None));
        }
        let il = self.input_index(logits)?;
        Ok(self.record(
            Op::SoftmaxCrossEntropy { logits: il, softmax, target },
            Arc::new(value),
            Vec::new(),
        ))
    }

    /// Total variation: per pixel sqrt(d_down^2 + d_right^2), borders
    /// contribute zero differences. Value is exact; the derivative smooths
    /// sqrt at zero with [`TV_GRAD_EPS`].
    pub fn tv_loss(&mut self, a: &Tensor) -> Result<Tensor> {
        let (c, h, w) = a.chw()?;
        let value = vec![tv_forward(a.data(), c, h, w)];
        Self::guard_finite(&value, "tv_loss")?;
        if !self.any_on_tape(&[a])? {
            return Ok(Tensor::from_parts(Arc::new(value), Vec::new(), None));
        }
        let ia = self.input_index(a)?;
        Ok(self.record(Op::TvLoss(ia), Arc::new(value), Vec::new()))
    }

    /// ||K (x)||_2 with K the 4-neighbor Laplacian, zero padding.
    pub fn laplacian_energy(&mut self, a: &Tensor) -> Result<Tensor> {
        let (_, h, w) = a.chw()?;
        if h < 3 || w < 3 {
            return Err(Error::Dimension(format!(
                "laplacian_energy needs at least 3x3, got {h}x{w}"
            )));
        }
        let resp = self.depthwise_fixed(a, &LAPLACIAN_KERNEL, 3, 3, Border::Zero)?;
        let sq = self.mul(&resp, &resp)?;
        let s = self.sum(&sq)?;
        self.sqrt(&s)
    }

    /// x (1 - m) + p m with mask m: [h, w] broadcast over channels.
    /// Computed with exactly this formula so masked-out positions reproduce
    /// x (or p) bitwise.
    pub fn compose(&mut self, x: &Tensor, p: &Tensor, mask: &Tensor) -> Result<Tensor> {
        same_shape(x, p, "compose")?;
        let (c, h, w) = x.chw()?;
        if mask.shape() != [h, w] {
            return Err(Error::Dimension(format!(
                "compose: image {:?} vs mask {:?}",
                x.shape(),
                mask.shape()
            )));
        }
        let hw = h * w;
        let m = mask.data();
        let mut value = vec![0.0; x.numel()];
        for ch in 0..c {
            for i in 0..hw {
                let mv = m[i];
                value[ch * hw + i] = x.data()[ch * hw + i] * (1.0 - mv) + p.data()[ch * hw + i] * mv;
            }
        }
        Self::guard_finite(&value, "compose")?;
        let shape = x.shape().to_vec();
        if !self.any_on_tape(&[x, p])? {
            return Ok(Tensor::from_parts(Arc::new(value), shape, None));
        }
        let ix = self.input_index(x)?;
        let ip = self.input_index(p)?;
        Ok(self.record(Op::Compose { x: ix, p: ip, mask: mask.data_arc() }, Arc::new(value), shape))
    }

    /// Cosine similarity of two rank-1 vectors. Zero-norm input is a
    /// degenerate-input error.
    pub fn cosine_similarity(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 1 || b.shape().len() != 1 {
            return Err(Error::Dimension("cosine_similarity expects rank-1 vectors".into()));
        }
        same_shape(a, b, "cosine_similarity")?;
        let na = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if na < NORM_FLOOR || nb < NORM_FLOOR {
            return Err(Error::Degenerate("cosine_similarity of zero-norm vector".into()));
        }
        let dot: f64 = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).sum();
        let value = vec![dot / (na * nb)];
        Self::guard_finite(&value, "cosine_similarity")?;
        if !self.any_on_tape(&[a, b])? {
            return Ok(Tensor::from_parts(Arc::new(value), Vec::new(), None));
        }
        let ia = self.input_index(a)?;
        let ib = self.input_index(b)?;
        Ok(self.record(Op::CosineSim { a: ia, b: ib }, Arc::new(value), Vec::new()))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns per-node gradients; query
    /// them through [`Gradients::of`].
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let node = loss
            .node()
            .ok_or_else(|| Error::Contract("backward: loss is not on this tape".into()))?;
        if node.tape_id != self.id {
            return Err(Error::Contract("backward: loss belongs to a different tape".into()));
        }
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let n = node.index + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[node.index] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            if grads[idx].is_none() {
                continue;
            }
            // Leaf and const nodes terminate propagation.
            if matches!(self.nodes[idx].op, Op::Leaf | Op::Const) {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.propagate(idx, &g, &mut grads);
            // Keep op-node gradients around only for leaves; interior grads
            // are no longer needed once propagated.
        }
        Ok(Gradients { tape_id: self.id, grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.acc_iter(grads, *a, g.iter().cloned());
                self.acc_iter(grads, *b, g.iter().cloned());
            }
            Op::Sub(a, b) => {
                self.acc_iter(grads, *a, g.iter().cloned());
                self.acc_iter(grads, *b, g.iter().map(|&v| -v));
            }
            Op::Mul(a, b) => {
                let av = self.value_of(*a);
                let bv = self.value_of(*b);
                self.acc_iter(grads, *a, g.iter().zip(bv.iter()).map(|(&gv, &bv)| gv * bv));
                self.acc_iter(grads, *b, g.iter().zip(av.iter()).map(|(&gv, &av)| gv * av));
            }
            Op::AddScalar(a) => self.acc_iter(grads, *a, g.iter().cloned()),
            Op::MulScalar(a, s) => {
                let s = *s;
                self.acc_iter(grads, *a, g.iter().map(move |&v| v * s));
            }
            Op::Sqrt(a) => {
                let out = &node.value;
                self.acc_iter(
                    grads,
                    *a,
                    g.iter()
                        .zip(out.iter())
                        .map(|(&gv, &y)| gv / (2.0 * y.max(SQRT_GRAD_FLOOR))),
                );
            }
            Op::Relu(a) => {
                let av = self.value_of(*a);
                self.acc_iter(
                    grads,
                    *a,
                    g.iter()
                        .zip(av.iter())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 }),
                );
            }
            Op::Clamp01(a) => {
                let av = self.value_of(*a);
                self.acc_iter(
                    grads,
                    *a,
                    g.iter()
                        .zip(av.iter())
                        .map(|(&gv, &x)| if (0.0..=1.0).contains(&x) { gv } else { 0.0 }),
                );
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.len();
                let gv = g[0];
                self.acc_iter(grads, *a, std::iter::repeat(gv).take(n));
            }
            Op::Reshape(a) => self.acc_iter(grads, *a, g.iter().cloned()),
            Op::BroadcastChannels(a) => {
                let hw = self.nodes[*a].value.len();
                let c = g.len() / hw;
                let mut acc = vec![0.0; hw];
                for ch in 0..c {
                    for (o, &gv) in acc.iter_mut().zip(&g[ch * hw..(ch + 1) * hw]) {
                        *o += gv;
                    }
                }
                self.acc_vec(grads, *a, acc);
            }
            Op::MatVec { w, x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                if !self.nodes[*w].is_const() {
                    let xv = self.value_of(*x);
                    let mut gw = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for c in 0..cols {
                            gw[r * cols + c] = gr * xv[c];
                        }
                    }
                    self.acc_vec(grads, *w, gw);
                }
                if !self.nodes[*x].is_const() {
                    let wv = self.value_of(*w);
                    let mut gx = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for c in 0..cols {
                            gx[c] += gr * wv[r * cols + c];
                        }
                    }
                    self.acc_vec(grads, *x, gx);
                }
            }
            Op::MatMulNt { a, b, ra, rb, k } => {
                let (ra, rb, k) = (*ra, *rb, *k);
                if !self.nodes[*a].is_const() {
                    // dA = G B
                    let bv = self.value_of(*b);
                    let mut ga = vec![0.0; ra * k];
                    for i in 0..ra {
                        for j in 0..rb {
                            let gv = g[i * rb + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for t in 0..k {
                                ga[i * k + t] += gv * bv[j * k + t];
                            }
                        }
                    }
                    self.acc_vec(grads, *a, ga);
                }
                if !self.nodes[*b].is_const() {
                    // dB = G^T A
                    let av = self.value_of(*a);
                    let mut gb = vec![0.0; rb * k];
                    for i in 0..ra {
                        for j in 0..rb {
                            let gv = g[i * rb + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for t in 0..k {
                                gb[j * k + t] += gv * av[i * k + t];
                            }
                        }
                    }
                    self.acc_vec(grads, *b, gb);
                }
            }
            Op::Conv2d { input, kernel, stride, padding } => {
                let (ci, h, w) = shape_chw(&self.nodes[*input].shape);
                let kshape = &self.nodes[*kernel].shape;
                let (co, k) = (kshape[0], kshape[2]);
                if !self.nodes[*input].is_const() {
                    let gi = kernels::conv2d_backward_input(
                        g,
                        ci,
                        h,
                        w,
                        self.value_of(*kernel),
                        co,
                        k,
                        *stride,
                        *padding,
                    );
                    self.acc_vec(grads, *input, gi);
                }
                if !self.nodes[*kernel].is_const() {
                    let gk = kernels::conv2d_backward_kernel(
                        g,
                        self.value_of(*input),
                        ci,
                        h,
                        w,
                        co,
                        k,
                        *stride,
                        *padding,
                    );
                    self.acc_vec(grads, *kernel, gk);
                }
            }
            Op::DepthwiseFixed { input, kernel, kh, kw, border } => {
                let (c, h, w) = shape_chw(&self.nodes[*input].shape);
                let gi = kernels::depthwise_fixed_backward(g, c, h, w, kernel, *kh, *kw, *border);
                self.acc_vec(grads, *input, gi);
            }
            Op::AvgPool2(a) => {
                let (c, h, w) = shape_chw(&self.nodes[*a].shape);
                let gi = kernels::avgpool2_backward(g, c, h, w);
                self.acc_vec(grads, *a, gi);
            }
            Op::AffineWarp { input, params } => {
                let (c, h, w) = shape_chw(&self.nodes[*input].shape);
                let gi = kernels::affine_warp_backward(g, c, h, w, params);
                self.acc_vec(grads, *input, gi);
            }
            Op::StackRows(inputs) => {
                let k = g.len() / inputs.len();
                for (r, &i) in inputs.iter().enumerate() {
                    if !self.nodes[i].is_const() {
                        self.acc_iter(grads, i, g[r * k..(r + 1) * k].iter().cloned());
                    }
                }
            }
            Op::RowNormalize { input, eps } => {
                let xv = self.value_of(*input);
                let shape = &self.nodes[*input].shape;
                let (rows, k) = if shape.len() == 1 { (1, shape[0]) } else { (shape[0], shape[1]) };
                let mut gx = vec![0.0; xv.len()];
                for r in 0..rows {
                    let row = &xv[r * k..(r + 1) * k];
                    let gr = &g[r * k..(r + 1) * k];
                    let s: f64 = row.iter().map(|v| v * v).sum();
                    let norm = (s + eps).sqrt();
                    let dot: f64 = gr.iter().zip(row.iter()).map(|(&a, &b)| a * b).sum();
                    let n3 = norm * norm * norm;
                    for ((o, &gv), &xvv) in gx[r * k..(r + 1) * k].iter_mut().zip(gr).zip(row) {
                        *o = gv / norm - xvv * dot / n3;
                    }
                }
                self.acc_vec(grads, *input, gx);
            }
            Op::ChannelNormalize { input, eps } => {
                let xv = self.value_of(*input);
                let (c, h, w) = shape_chw(&self.nodes[*input].shape);
                let hw = h * w;
                let mut gx = vec![0.0; xv.len()];
                for pos in 0..hw {
                    let mut s = 0.0;
                    let mut dot = 0.0;
                    for ch in 0..c {
                        let x = xv[ch * hw + pos];
                        s += x * x;
                        dot += g[ch * hw + pos] * x;
                    }
                    let norm = (s + eps).sqrt();
                    let n3 = norm * norm * norm;
                    for ch in 0..c {
                        let x = xv[ch * hw + pos];
                        gx[ch * hw + pos] = g[ch * hw + pos] / norm - x * dot / n3;
                    }
                }
                self.acc_vec(grads, *input, gx);
            }
            Op::AddChannelBias { input, bias } => {
                let (c, h, w) = shape_chw(&self.nodes[*input].shape);
                let hw = h * w;
                if !self.nodes[*input].is_const() {
                    self.acc_iter(grads, *input, g.iter().cloned());
                }
                if !self.nodes[*bias].is_const() {
                    let mut gb = vec![0.0; c];
                    for ch in 0..c {
                        gb[ch] = g[ch * hw..(ch + 1) * hw].iter().sum();
                    }
                    self.acc_vec(grads, *bias, gb);
                }
            }
            Op::SoftmaxCrossEntropy { logits, softmax, target } => {
                let gv = g[0];
                let gl: Vec<f64> = softmax
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| gv * (p - if i == *target { 1.0 } else { 0.0 }))
                    .collect();
                self.acc_vec(grads, *logits, gl);
            }
            Op::TvLoss(a) => {
                let xv = self.value_of(*a);
                let (c, h, w) = shape_chw(&self.nodes[*a].shape);
                let gx = tv_backward(xv, c, h, w, g[0]);
                self.acc_vec(grads, *a, gx);
            }
            Op::Compose { x, p, mask } => {
                let hw = mask.len();
                let c = g.len() / hw;
                if !self.nodes[*x].is_const() {
                    let mut gx = vec![0.0; g.len()];
                    for ch in 0..c {
                        for i in 0..hw {
                            gx[ch * hw + i] = g[ch * hw + i] * (1.0 - mask[i]);
                        }
                    }
                    self.acc_vec(grads, *x, gx);
                }
                if !self.nodes[*p].is_const() {
                    let mut gp = vec![0.0; g.len()];
                    for ch in 0..c {
                        for i in 0..hw {
                            gp[ch * hw + i] = g[ch * hw + i] * mask[i];
                        }
                    }
                    self.acc_vec(grads, *p, gp);
                }
            }
            Op::CosineSim { a, b } => {
                let av = self.value_of(*a);
                let bv = self.value_of(*b);
                let na = av.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = av.iter().zip(bv.iter()).map(|(&x, &y)| x * y).sum();
                let cosv = dot / (na * nb);
                let gv = g[0];
                if !self.nodes[*a].is_const() {
                    let ga: Vec<f64> = av
                        .iter()
                        .zip(bv.iter())
                        .map(|(&x, &y)| gv * (y / (na * nb) - cosv * x / (na * na)))
                        .collect();
                    self.acc_vec(grads, *a, ga);
                }
                if !self.nodes[*b].is_const() {
                    let gb: Vec<f64> = av
                        .iter()
                        .zip(bv.iter())
                        .map(|(&x, &y)| gv * (x / (na * nb) - cosv * y / (nb * nb)))
                        .collect();
                    self.acc_vec(grads, *b, gb);
                }
            }
        }
    }

    fn acc_vec(&self, grads: &mut [Option<Vec<f64>>], idx: usize, contribution: Vec<f64>) {
        if self.nodes[idx].is_const() {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn acc_iter(
        &self,
        grads: &mut [Option<Vec<f64>>],
        idx: usize,
        contribution: impl Iterator<Item = f64>,
    ) {
        if self.nodes[idx].is_const() {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot => *slot = Some(contribution.collect()),
        }
    }
}

fn shape_chw(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (1, shape[0], shape[1]),
        _ => (shape[0], shape[1], shape[2]),
    }
}

fn tv_forward(x: &[f64], c: usize, h: usize, w: usize) -> f64 {
    let hw = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for i in 0..h {
            for j in 0..w {
                let v = plane[i * w + j];
                let dd = if i + 1 < h { v - plane[(i + 1) * w + j] } else { 0.0 };
                let dr = if j + 1 < w { v - plane[i * w + j + 1] } else { 0.0 };
                total += (dd * dd + dr * dr).sqrt();
            }
        }
    }
    total
}

fn tv_backward(x: &[f64], c: usize, h: usize, w: usize, g: f64) -> Vec<f64> {
    let hw = h * w;
    let mut gx = vec![0.0; c * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        let gp = &mut gx[ch * hw..(ch + 1) * hw];
        for i in 0..h {
            for j in 0..w {
                let v = plane[i * w + j];
                let dd = if i + 1 < h { v - plane[(i + 1) * w + j] } else { 0.0 };
                let dr = if j + 1 < w { v - plane[i * w + j + 1] } else { 0.0 };
                let denom = (dd * dd + dr * dr + TV_GRAD_EPS).sqrt();
                let cd = g * dd / denom;
                let cr = g * dr / denom;
                gp[i * w + j] += cd + cr;
                if i + 1 < h {
                    gp[(i + 1) * w + j] -= cd;
                }
                if j + 1 < w {
                    gp[i * w + j + 1] -= cr;
                }
            }
        }
    }
    gx
}

/// Gradient buffers produced by [`Tape::backward`].
pub struct Gradients {
    tape_id: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. a tensor recorded on the tape. Leaves that did not
    /// participate in the loss get zeros.
    pub fn of(&self, t: &Tensor) -> Result<Tensor> {
        let node = t
            .node()
            .ok_or_else(|| Error::Contract("gradient of a tensor not on the tape".into()))?;
        if node.tape_id != self.tape_id {
            return Err(Error::Contract("gradient query against a different tape".into()));
        }
        match self.grads.get(node.index) {
            Some(Some(g)) => Tensor::from_vec(g.clone(), t.shape()),
            _ => Ok(Tensor::zeros(t.shape())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1.0, 2.0, 3.0], &[3]));
        let loss = tape.sum(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_inputs_record_nothing() {
        let mut tape = Tape::new();
        let a = t(&[1.0, 2.0], &[2]);
        let b = t(&[3.0, 4.0], &[2]);
        let c = tape.add(&a, &b).unwrap();
        assert_eq!(c.data(), &[4.0, 6.0]);
        assert!(!c.requires_grad());
        assert_eq!(tape.num_nodes(), 0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1.0, 2.0], &[2]));
        let y = tape.mul_scalar(&x, 2.0).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn mul_shares_node_accumulates() {
        // d(x*x)/dx = 2x
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3.0], &[1]));
        let y = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1.0], &[1]));
        let unused = tape.leaf(&t(&[5.0, 5.0], &[2]));
        let loss = tape.sum(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_tape_tensor_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.leaf(&t(&[1.0], &[1]));
        assert!(matches!(t2.sum(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn cosine_examples() {
        let mut tape = Tape::new();
        // self-similarity
        let v = t(&[0.3, -0.2, 0.9], &[3]);
        let c = tape.cosine_similarity(&v, &v).unwrap();
        assert!((c.item().unwrap() - 1.0).abs() < 1e-12);
        // orthogonal
        let a = t(&[1.0, 0.0], &[2]);
        let b = t(&[0.0, 1.0], &[2]);
        let c = tape.cosine_similarity(&a, &b).unwrap();
        assert_eq!(c.item().unwrap(), 0.0);
        // direct dot/norm computation: cos([1,2,2],[2,1,2]) = 8/9
        let a = t(&[1.0, 2.0, 2.0], &[3]);
        let b = t(&[2.0, 1.0, 2.0], &[3]);
        let c = tape.cosine_similarity(&a, &b).unwrap();
        assert!((c.item().unwrap() - 8.0 / 9.0).abs() < 1e-12);
        // zero norm is degenerate
        let z = t(&[0.0, 0.0], &[2]);
        assert!(matches!(tape.cosine_similarity(&z, &b0()), Err(Error::Degenerate(_))));
    }

    fn b0() -> Tensor {
        t(&[1.0, 0.0], &[2])
    }

    #[test]
    fn tv_examples() {
        let mut tape = Tape::new();
        // constant image has zero variation
        let c = Tensor::full(&[1, 4, 4], 0.7);
        assert_eq!(tape.tv_loss(&c).unwrap().item().unwrap(), 0.0);
        // hand evaluation of the per-pixel formula on [[0,1],[2,3]]
        let img = t(&[0.0, 1.0, 2.0, 3.0], &[1, 2, 2]);
        let v = tape.tv_loss(&img).unwrap().item().unwrap();
        assert!((v - (5.0_f64.sqrt() + 2.0 + 1.0)).abs() < 1e-12);
        // invariant under global shift
        let mut tape2 = Tape::new();
        let shifted = img.map(|v| v + 3.25);
        let v2 = tape2.tv_loss(&shifted).unwrap().item().unwrap();
        assert!((v - v2).abs() < 1e-12);
    }

    #[test]
    fn laplacian_examples() {
        let mut tape = Tape::new();
        // unit impulse at center of 5x5: energy sqrt(16 + 4)
        let mut data = vec![0.0; 25];
        data[12] = 1.0;
        let x = t(&data, &[1, 5, 5]);
        let e = tape.laplacian_energy(&x).unwrap().item().unwrap();
        assert!((e - 20.0_f64.sqrt()).abs() < 1e-12);
        // linear ramp x_{i,j} = i has zero interior response
        let ramp: Vec<f64> = (0..5).flat_map(|i| std::iter::repeat(i as f64).take(5)).collect();
        let x = t(&ramp, &[1, 5, 5]);
        let resp = tape
            .depthwise_fixed(&x, &LAPLACIAN_KERNEL, 3, 3, Border::Zero)
            .unwrap();
        for i in 1..4 {
            for j in 1..4 {
                assert_eq!(resp.data()[i * 5 + j], 0.0);
            }
        }
        // constant image: all interior responses are zero
        let c = Tensor::full(&[1, 5, 5], 2.0);
        let resp = tape
            .depthwise_fixed(&c, &LAPLACIAN_KERNEL, 3, 3, Border::Zero)
            .unwrap();
        for i in 1..4 {
            for j in 1..4 {
                assert_eq!(resp.data()[i * 5 + j], 0.0);
            }
        }
        // too small is a dimension error
        assert!(tape.laplacian_energy(&Tensor::zeros(&[1, 2, 2])).is_err());
    }

    #[test]
    fn conv_scaling_identity() {
        let mut tape = Tape::new();
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = t(&[2.0], &[1, 1, 1, 1]);
        let y = tape.conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_laplacian_center() {
        // hand convolution: center of [[1..9]] under the 4-neighbor
        // Laplacian with padding 1 is (2+4+6+8) - 4*5 = 0.
        let mut tape = Tape::new();
        let x = t(&(1..=9).map(|v| v as f64).collect::<Vec<_>>(), &[1, 3, 3]);
        let k = t(&LAPLACIAN_KERNEL.to_vec(), &[1, 1, 3, 3]);
        let y = tape.conv2d(&x, &k, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 0.0);
    }

    #[test]
    fn conv_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[2, 3, 3]);
        let k = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(matches!(tape.conv2d(&x, &k, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn compose_algebra() {
        let mut tape = Tape::new();
        let x = t(&[0.1, 0.2, 0.3, 0.4], &[1, 2, 2]);
        let p = t(&[0.9, 0.8, 0.7, 0.6], &[1, 2, 2]);
        let m0 = Tensor::zeros(&[2, 2]);
        let m1 = Tensor::full(&[2, 2], 1.0);
        assert_eq!(tape.compose(&x, &p, &m0).unwrap().data(), x.data());
        assert_eq!(tape.compose(&x, &p, &m1).unwrap().data(), p.data());
        // gradient w.r.t. p is zero where the mask is zero
        let m = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let pl = tape.leaf(&p);
        let comp = tape.compose(&x, &pl, &m).unwrap();
        let loss = tape.sum(&comp).unwrap();
        let g = tape.backward(&loss).unwrap().of(&pl).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn chained_masked_tv_gradient_respects_mask() {
        // tv_loss(compose(x, p, m)): gradient w.r.t. p vanishes off-mask.
        let mut tape = Tape::new();
        let x = t(&[0.1, 0.6, 0.2, 0.9, 0.4, 0.3, 0.8, 0.5, 0.7], &[1, 3, 3]);
        let p = t(&[0.5; 9], &[1, 3, 3]);
        let m = t(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0], &[3, 3]);
        let pl = tape.leaf(&p);
        let comp = tape.compose(&x, &pl, &m).unwrap();
        let loss = tape.tv_loss(&comp).unwrap();
        let g = tape.backward(&loss).unwrap().of(&pl).unwrap();
        for (i, &gv) in g.data().iter().enumerate() {
            if i == 4 {
                assert!(gv != 0.0);
            } else {
                assert_eq!(gv, 0.0);
            }
        }
    }

    #[test]
    fn softmax_ce_matches_direct_formula() {
        let mut tape = Tape::new();
        let logits = t(&[1.0, 2.0, 0.5], &[3]);
        let l = tape.softmax_cross_entropy(&logits, 1).unwrap().item().unwrap();
        let denom: f64 = logits.data().iter().map(|v| v.exp()).sum();
        assert!((l - (-(2.0_f64.exp() / denom).ln())).abs() < 1e-12);
    }

    #[test]
    fn nan_guard_fires() {
        let mut tape = Tape::new();
        let big = Tensor::full(&[2], 1e308);
        assert!(matches!(tape.add(&big, &big), Err(Error::Numeric(_))));
    }
}
