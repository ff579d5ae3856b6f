//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node in creation order, so the
//! node list is already a topological order. [`Tape::backward`] walks it
//! once in reverse, handing each node's upstream gradient to its backward
//! rule. Leaf gradients accumulate across calls until [`Tape::zero_grad`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, AlignWindow, ConvGeometry};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Resize {
        input: Var,
    },
    AdaptiveAvgPool {
        input: Var,
    },
    GlobalMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    SoftmaxChannels {
        input: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Maximum(Var, Var),
    Scale {
        input: Var,
        factor: f64,
    },
    Relu(Var),
    Sigmoid(Var),
    ConcatChannels(Vec<Var>),
    SliceChannels {
        input: Var,
        start: usize,
    },
    FullyConnected {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Reshape(Var),
    SpatialScale {
        input: Var,
        map: Var,
    },
    ChannelScale {
        input: Var,
        gates: Var,
    },
    Sum(Var),
    GatherRows {
        sources: Vec<Var>,
        index: Vec<(usize, usize)>,
    },
    RoiAlign {
        input: Var,
        windows: Vec<AlignWindow>,
        out: (usize, usize),
        ratio: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        positive: Vec<bool>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Resize { .. } => "bilinear_resize",
            Op::AdaptiveAvgPool { .. } => "adaptive_avg_pool2d",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::SoftmaxChannels { .. } => "softmax",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Maximum(..) => "maximum",
            Op::Scale { .. } => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::ConcatChannels(_) => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::FullyConnected { .. } => "fully_connected",
            Op::Reshape(_) => "reshape",
            Op::SpatialScale { .. } => "spatial_scale",
            Op::ChannelScale { .. } => "channel_scale",
            Op::Sum(_) => "sum",
            Op::GatherRows { .. } => "gather_rows",
            Op::RoiAlign { .. } => "roi_align",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SmoothL1 { .. } => "smooth_l1",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            }
            | Op::FullyConnected {
                input, weight, bias, ..
            } => vec![*input, *weight, *bias],
            Op::Resize { input }
            | Op::AdaptiveAvgPool { input }
            | Op::GlobalMaxPool { input, .. }
            | Op::SoftmaxChannels { input }
            | Op::Scale { input, .. }
            | Op::SliceChannels { input, .. }
            | Op::RoiAlign { input, .. } => vec![*input],
            Op::Relu(a) | Op::Sigmoid(a) | Op::Reshape(a) | Op::Sum(a) => vec![*a],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Maximum(a, b) => vec![*a, *b],
            Op::SpatialScale { input, map } => vec![*input, *map],
            Op::ChannelScale { input, gates } => vec![*input, *gates],
            Op::ConcatChannels(vs) => vs.clone(),
            Op::GatherRows { sources, .. } => sources.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::SmoothL1 { pred, .. } => vec![*pred],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Ordered record of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_dims<T: Real>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let inputs = op.inputs();
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor. Gradients are kept only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named parameter as a trainable leaf, once per tape.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.leaf(value, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a `requires_grad` leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.dims().to_vec(), g.clone()).expect("grad dims"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Gradients of every bound parameter; unreached parameters get zeros.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.dims(v)));
                (name.clone(), g)
            })
            .collect()
    }

    /// Number of recorded kernel invocations per operation name.
    pub fn kernel_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for node in &self.nodes {
            if !matches!(node.op, Op::Leaf) {
                *counts.entry(node.op.name()).or_insert(0) += 1;
            }
        }
        counts
    }

    // ---- operations -------------------------------------------------------

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).nchw()?;
        let [k, wc, kh, kw] = self.value(weight).nchw()?;
        if wc != c {
            return Err(Error::Dimension(format!(
                "conv2d: input has {c} channels, weight expects {wc}"
            )));
        }
        if self.dims(bias) != [k] {
            return Err(Error::Dimension(format!(
                "conv2d: bias {:?} does not match {k} output channels",
                self.dims(bias)
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("conv2d: kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        let out_dim = |len: usize, kernel: usize| -> Result<usize> {
            let span = (len + 2 * padding)
                .checked_sub(kernel)
                .ok_or_else(|| Error::Config(format!("conv2d: kernel {kernel} exceeds padded input {len}")))?;
            if span % stride != 0 {
                return Err(Error::Config(format!(
                    "conv2d: ({len} + 2*{padding} - {kernel}) not divisible by stride {stride}"
                )));
            }
            Ok(span / stride + 1)
        };
        let geom = ConvGeometry {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: k,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: out_dim(h, kh)?,
            out_w: out_dim(w, kw)?,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![n, k, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config(format!(
                "bilinear_resize: target size {out_h}x{out_w} must be positive"
            )));
        }
        let [n, c, h, w] = self.value(input).nchw()?;
        let out = kernels::resize_forward(n * c, (h, w), (out_h, out_w), self.value(input).data());
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::Resize { input }))
    }

    pub fn adaptive_avg_pool2d(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).nchw()?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::Config(format!(
                "adaptive_avg_pool2d: output {out_h}x{out_w} must lie within input {h}x{w}"
            )));
        }
        let out = kernels::adaptive_avg_pool_forward(n * c, (h, w), (out_h, out_w), self.value(input).data());
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::AdaptiveAvgPool { input }))
    }

    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).nchw()?;
        let (out, argmax) = kernels::global_max_pool_forward(n * c, h * w, self.value(input).data());
        let value = Tensor::new(vec![n, c, 1, 1], out)?;
        Ok(self.push(value, Op::GlobalMaxPool { input, argmax }))
    }

    /// Softmax across the channel axis of an NCHW tensor, independently at
    /// every `(n, h, w)`.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).nchw()?;
        let plane = h * w;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let m = (0..c)
                    .map(|k| x[base + k * plane + p])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..c {
                    let e = (x[base + k * plane + p] - m).exp();
                    out[base + k * plane + p] = e;
                    total = total + e;
                }
                for k in 0..c {
                    out[base + k * plane + p] = out[base + k * plane + p] / total;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, Op::SoftmaxChannels { input }))
    }

    fn zip_with(&mut self, what: &str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op) -> Result<Var> {
        same_dims(what, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.dims(a).to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum; ties resolve to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("maximum", a, b, |x, y| if y > x { y } else { x }, Op::Maximum(a, b))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let value = self.value(input).map(|x| x * f);
        self.push(value, Op::Scale { input, factor })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(value, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(sigmoid);
        self.push(value, Op::Sigmoid(input))
    }

    /// Concatenates NCHW tensors along the channel axis, left to right.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Usage("concat_channels: no inputs".into()))?;
        let [n, _, h, w] = self.value(first).nchw()?;
        let mut total_c = 0;
        for &v in inputs {
            let [vn, vc, vh, vw] = self.value(v).nchw()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::Dimension(format!(
                    "concat_channels: {:?} vs {:?}",
                    self.dims(first),
                    self.dims(v)
                )));
            }
            total_c += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &v in inputs {
                let c = self.dims(v)[1];
                out.extend_from_slice(&self.value(v).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new(vec![n, total_c, h, w], out)?;
        Ok(self.push(value, Op::ConcatChannels(inputs.to_vec())))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).nchw()?;
        if len == 0 || start + len > c {
            return Err(Error::Dimension(format!(
                "slice_channels: [{start}, {}) outside {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            out.extend_from_slice(&x[(b * c + start) * plane..(b * c + start + len) * plane]);
        }
        let value = Tensor::new(vec![n, len, h, w], out)?;
        Ok(self.push(value, Op::SliceChannels { input, start }))
    }

    /// `y = x W^T + b` for `x: [B, in]`, `W: [out, in]`, `b: [out]`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xd, wd, bd) = (self.dims(input), self.dims(weight), self.dims(bias));
        let (&[batch, fan_in], &[fan_out, w_in], &[b_out]) = (xd, wd, bd) else {
            return Err(Error::Dimension(format!(
                "fully_connected: x {xd:?}, W {wd:?}, b {bd:?}"
            )));
        };
        if w_in != fan_in || b_out != fan_out {
            return Err(Error::Dimension(format!(
                "fully_connected: x {xd:?}, W {wd:?}, b {bd:?}"
            )));
        }
        let bias_data = self.value(bias).data();
        let mut out = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            out.extend_from_slice(bias_data);
        }
        kernels::gemm(
            batch,
            fan_in,
            fan_out,
            T::one(),
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            T::one(),
            &mut out,
        );
        let value = Tensor::new(vec![batch, fan_out], out)?;
        Ok(self.push(value, Op::FullyConnected { input, weight, bias }))
    }

    pub fn reshape(&mut self, input: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(dims.to_vec())?;
        Ok(self.push(value, Op::Reshape(input)))
    }

    /// Normalizes `K` same-shaped `[N,1,H,W]` logit maps so that at every
    /// position the outputs form a softmax over the group.
    pub fn softmax_over_group(&mut self, logits: &[Var]) -> Result<Vec<Var>> {
        let first = *logits
            .first()
            .ok_or_else(|| Error::Usage("softmax_over_group: empty group".into()))?;
        let [_, one, _, _] = self.value(first).nchw()?;
        for &v in logits {
            if self.dims(v) != self.dims(first) || one != 1 {
                return Err(Error::Dimension(format!(
                    "softmax_over_group: maps must share [N,1,H,W] dims, got {:?} and {:?}",
                    self.dims(first),
                    self.dims(v)
                )));
            }
        }
        let stacked = self.concat_channels(logits)?;
        let weights = self.softmax_channels(stacked)?;
        (0..logits.len())
            .map(|k| self.slice_channels(weights, k, 1))
            .collect()
    }

    /// Multiplies `x: [N,C,H,W]` by a per-position map `m: [N,1,H,W]`
    /// broadcast over channels.
    pub fn spatial_scale(&mut self, input: Var, map: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).nchw()?;
        if self.dims(map) != [n, 1, h, w] {
            return Err(Error::Dimension(format!(
                "spatial_scale: map {:?} does not fit {:?}",
                self.dims(map),
                self.dims(input)
            )));
        }
        let plane = h * w;
        let (x, m) = (self.value(input).data(), self.value(map).data());
        let out = (0..x.len())
            .map(|i| {
                let b = i / (c * plane);
                x[i] * m[b * plane + i % plane]
            })
            .collect();
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, Op::SpatialScale { input, map }))
    }

    /// Multiplies `x: [N,C,H,W]` by per-channel gates `g: [N,C]`.
    pub fn channel_scale(&mut self, input: Var, gates: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).nchw()?;
        if self.dims(gates) != [n, c] {
            return Err(Error::Dimension(format!(
                "channel_scale: gates {:?} do not fit {:?}",
                self.dims(gates),
                self.dims(input)
            )));
        }
        let plane = h * w;
        let (x, g) = (self.value(input).data(), self.value(gates).data());
        let out = (0..x.len()).map(|i| x[i] * g[i / plane]).collect();
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, Op::ChannelScale { input, gates }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum(input))
    }

    /// Builds a tensor whose row `r` (leading axis) is row `index[r].1` of
    /// `sources[index[r].0]`. All sources must agree on trailing dims.
    pub fn gather_rows(&mut self, sources: &[Var], index: &[(usize, usize)]) -> Result<Var> {
        let first = *sources
            .first()
            .ok_or_else(|| Error::Usage("gather_rows: no sources".into()))?;
        let tail = self.dims(first)[1..].to_vec();
        for &s in sources {
            if self.dims(s)[1..] != tail[..] {
                return Err(Error::Dimension(format!(
                    "gather_rows: {:?} vs {:?}",
                    self.dims(first),
                    self.dims(s)
                )));
            }
        }
        if index.is_empty() {
            return Err(Error::Usage("gather_rows: empty index".into()));
        }
        let row: usize = tail.iter().product();
        let mut out = Vec::with_capacity(index.len() * row);
        for &(s, r) in index {
            let src = sources
                .get(s)
                .ok_or_else(|| Error::Usage(format!("gather_rows: source {s} out of range")))?;
            if r >= self.dims(*src)[0] {
                return Err(Error::Usage(format!("gather_rows: row {r} out of range")));
            }
            out.extend_from_slice(&self.value(*src).data()[r * row..(r + 1) * row]);
        }
        let mut dims = vec![index.len()];
        dims.extend_from_slice(&tail);
        let value = Tensor::new(dims, out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                sources: sources.to_vec(),
                index: index.to_vec(),
            },
        ))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        let index: Vec<_> = inputs
            .iter()
            .enumerate()
            .flat_map(|(s, &v)| (0..self.dims(v)[0]).map(move |r| (s, r)))
            .collect();
        self.gather_rows(inputs, &index)
    }

    /// RoI-Align of `input: [N,C,H,W]` over windows already expressed in
    /// feature coordinates. Output is `[R, C, out.0, out.1]`.
    pub fn roi_align(
        &mut self,
        input: Var,
        windows: &[AlignWindow],
        out: (usize, usize),
        ratio: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(input).nchw()?;
        if windows.is_empty() {
            return Err(Error::Usage("roi_align: no windows".into()));
        }
        if out.0 == 0 || out.1 == 0 || ratio == 0 {
            return Err(Error::Config(format!(
                "roi_align: output {out:?} and sampling ratio {ratio} must be positive"
            )));
        }
        for win in windows {
            if win.batch >= n {
                return Err(Error::Usage(format!(
                    "roi_align: batch index {} out of range for batch {n}",
                    win.batch
                )));
            }
            if !win.overlaps(h, w) {
                return Err(Error::Usage(format!(
                    "roi_align: window {win:?} lies outside the {h}x{w} feature map"
                )));
            }
        }
        let data = kernels::roi_align_forward(c, (h, w), self.value(input).data(), windows, out, ratio);
        let value = Tensor::new(vec![windows.len(), c, out.0, out.1], data)?;
        Ok(self.push(
            value,
            Op::RoiAlign {
                input,
                windows: windows.to_vec(),
                out,
                ratio,
            },
        ))
    }

    /// Mean softmax cross-entropy of `logits: [R, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let &[rows, classes] = self.dims(logits) else {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {:?} must be 2-d",
                self.dims(logits)
            )));
        };
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "cross_entropy: {rows} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Usage(format!(
                "cross_entropy: label {bad} outside 0..{classes}"
            )));
        }
        let x = self.value(logits).data();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * classes..(r + 1) * classes];
            total += -log_softmax_at(row, t).as_f64();
        }
        let value = Tensor::scalar(T::from_f64(total / rows as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Smooth-L1 (transition at 1) summed over the trailing axis and averaged
    /// over rows flagged positive. Zero when no row is positive.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<T>, positive: &[bool]) -> Result<Var> {
        same_dims("smooth_l1", self.value(pred), target)?;
        let rows = self.dims(pred)[0];
        if positive.len() != rows {
            return Err(Error::Dimension(format!(
                "smooth_l1: {rows} rows but {} flags",
                positive.len()
            )));
        }
        let width = self.value(pred).numel() / rows;
        let npos = positive.iter().filter(|&&p| p).count();
        let p = self.value(pred).data();
        let mut total = 0.0;
        for (r, _) in positive.iter().enumerate().filter(|(_, &p)| p) {
            let span = r * width..(r + 1) * width;
            for (&a, &b) in p[span.clone()].iter().zip(&target.data()[span]) {
                total += smooth_l1_value(a.as_f64() - b.as_f64());
            }
        }
        let loss = if npos == 0 { 0.0 } else { total / npos as f64 };
        let value = Tensor::scalar(T::from_f64(loss));
        Ok(self.push(
            value,
            Op::SmoothL1 {
                pred,
                target: target.data().iter().map(|v| v.as_f64()).collect(),
                positive: positive.to_vec(),
            },
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates `d root / d leaf` into every `requires_grad` leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward: root must be scalar, got {:?}",
                self.dims(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&g) {
                            *a = *a + *d;
                        }
                    }
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = val(*input);
                let wt = val(*weight);
                acc(*input, &mut |dx| {
                    kernels::conv2d_backward(geom, x, wt, g, Some(dx), None, None)
                });
                acc(*weight, &mut |dw| {
                    kernels::conv2d_backward(geom, x, wt, g, None, Some(dw), None)
                });
                acc(*bias, &mut |db| {
                    kernels::conv2d_backward(geom, x, wt, g, None, None, Some(db))
                });
            }
            Op::Resize { input } => {
                let [n, c, h, w] = nodes[input.0].value.nchw().expect("nchw");
                let [_, _, oh, ow] = out.nchw().expect("nchw");
                acc(*input, &mut |dx| kernels::resize_backward(n * c, (h, w), (oh, ow), g, dx));
            }
            Op::AdaptiveAvgPool { input } => {
                let [n, c, h, w] = nodes[input.0].value.nchw().expect("nchw");
                let [_, _, oh, ow] = out.nchw().expect("nchw");
                acc(*input, &mut |dx| {
                    kernels::adaptive_avg_pool_backward(n * c, (h, w), (oh, ow), g, dx)
                });
            }
            Op::GlobalMaxPool { input, argmax } => {
                acc(*input, &mut |dx| {
                    for (p, &idx) in argmax.iter().enumerate() {
                        dx[idx] = dx[idx] + g[p];
                    }
                });
            }
            Op::SoftmaxChannels { input } => {
                let [n, c, h, w] = out.nchw().expect("nchw");
                let plane = h * w;
                let y = out.data();
                acc(*input, &mut |dx| {
                    for b in 0..n {
                        let base = b * c * plane;
                        for p in 0..plane {
                            let dot = (0..c)
                                .map(|k| y[base + k * plane + p] * g[base + k * plane + p])
                                .fold(T::zero(), |s, v| s + v);
                            for k in 0..c {
                                let j = base + k * plane + p;
                                dx[j] = dx[j] + y[j] * (g[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |d| add_into(d, g));
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * xb[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * xa[j];
                    }
                });
            }
            Op::Maximum(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        if xb[j] <= xa[j] {
                            d[j] = d[j] + g[j];
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        if xb[j] > xa[j] {
                            d[j] = d[j] + g[j];
                        }
                    }
                });
            }
            Op::Scale { input, factor } => {
                let f = T::from_f64(*factor);
                acc(*input, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * f;
                    }
                });
            }
            Op::Relu(input) => {
                let x = val(*input);
                acc(*input, &mut |d| {
                    for j in 0..d.len() {
                        if x[j] > T::zero() {
                            d[j] = d[j] + g[j];
                        }
                    }
                });
            }
            Op::Sigmoid(input) => {
                let y = out.data();
                acc(*input, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * y[j] * (T::one() - y[j]);
                    }
                });
            }
            Op::ConcatChannels(inputs) => {
                let [n, total_c, h, w] = out.nchw().expect("nchw");
                let plane = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let c = nodes[v.0].value.dims()[1];
                    acc(v, &mut |d| {
                        for b in 0..n {
                            let src = &g[(b * total_c + offset) * plane..(b * total_c + offset + c) * plane];
                            add_into(&mut d[b * c * plane..(b + 1) * c * plane], src);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceChannels { input, start } => {
                let [n, c, h, w] = nodes[input.0].value.nchw().expect("nchw");
                let len = out.dims()[1];
                let plane = h * w;
                acc(*input, &mut |d| {
                    for b in 0..n {
                        add_into(
                            &mut d[(b * c + start) * plane..(b * c + start + len) * plane],
                            &g[b * len * plane..(b + 1) * len * plane],
                        );
                    }
                });
            }
            Op::FullyConnected { input, weight, bias } => {
                let (batch, fan_in) = (nodes[input.0].value.dims()[0], nodes[input.0].value.dims()[1]);
                let fan_out = out.dims()[1];
                let (x, wt) = (val(*input), val(*weight));
                acc(*input, &mut |dx| {
                    kernels::gemm(batch, fan_out, fan_in, T::one(), g, false, wt, false, T::one(), dx)
                });
                acc(*weight, &mut |dw| {
                    kernels::gemm(fan_out, batch, fan_in, T::one(), g, true, x, false, T::one(), dw)
                });
                acc(*bias, &mut |db| {
                    for row in g.chunks(fan_out) {
                        add_into(db, row);
                    }
                });
            }
            Op::Reshape(input) => acc(*input, &mut |d| add_into(d, g)),
            Op::SpatialScale { input, map } => {
                let [_, c, h, w] = out.nchw().expect("nchw");
                let plane = h * w;
                let (x, m) = (val(*input), val(*map));
                acc(*input, &mut |d| {
                    for j in 0..d.len() {
                        let b = j / (c * plane);
                        d[j] = d[j] + g[j] * m[b * plane + j % plane];
                    }
                });
                acc(*map, &mut |d| {
                    for j in 0..g.len() {
                        let b = j / (c * plane);
                        let k = b * plane + j % plane;
                        d[k] = d[k] + g[j] * x[j];
                    }
                });
            }
            Op::ChannelScale { input, gates } => {
                let [_, _, h, w] = out.nchw().expect("nchw");
                let plane = h * w;
                let (x, s) = (val(*input), val(*gates));
                acc(*input, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * s[j / plane];
                    }
                });
                acc(*gates, &mut |d| {
                    for j in 0..g.len() {
                        d[j / plane] = d[j / plane] + g[j] * x[j];
                    }
                });
            }
            Op::Sum(input) => {
                acc(*input, &mut |d| {
                    for v in d.iter_mut() {
                        *v = *v + g[0];
                    }
                });
            }
            Op::GatherRows { sources, index } => {
                let row = out.numel() / index.len();
                for (s, &v) in sources.iter().enumerate() {
                    acc(v, &mut |d| {
                        for (r, &(src, src_row)) in index.iter().enumerate() {
                            if src == s {
                                add_into(&mut d[src_row * row..(src_row + 1) * row], &g[r * row..(r + 1) * row]);
                            }
                        }
                    });
                }
            }
            Op::RoiAlign {
                input,
                windows,
                out: size,
                ratio,
            } => {
                let [_, c, h, w] = nodes[input.0].value.nchw().expect("nchw");
                acc(*input, &mut |d| {
                    kernels::roi_align_backward(c, (h, w), windows, *size, *ratio, g, d)
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let classes = nodes[logits.0].value.dims()[1];
                let x = val(*logits);
                let scale = g[0] / T::from_f64(targets.len() as f64);
                acc(*logits, &mut |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &x[r * classes..(r + 1) * classes];
                        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let total: T = row.iter().map(|&v| (v - m).exp()).sum();
                        for k in 0..classes {
                            let p = (row[k] - m).exp() / total;
                            let onehot = if k == t { T::one() } else { T::zero() };
                            d[r * classes + k] = d[r * classes + k] + scale * (p - onehot);
                        }
                    }
                });
            }
            Op::SmoothL1 {
                pred,
                target,
                positive,
            } => {
                let npos = positive.iter().filter(|&&p| p).count();
                if npos == 0 {
                    return;
                }
                let p = val(*pred);
                let width = p.len() / positive.len();
                let scale = g[0].as_f64() / npos as f64;
                acc(*pred, &mut |d| {
                    for (r, _) in positive.iter().enumerate().filter(|(_, &p)| p) {
                        for j in r * width..(r + 1) * width {
                            let diff = p[j].as_f64() - target[j];
                            d[j] = d[j] + T::from_f64(scale * smooth_l1_slope(diff));
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_softmax_at<T: Real>(row: &[T], t: usize) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&v| (v - m).exp()).sum();
    row[t] - m - total.ln()
}

/// Smooth-L1 with transition at 1: `0.5 d^2` inside, `|d| - 0.5` outside.
pub fn smooth_l1_value(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_slope(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gives_two_x() {
        let mut tape = Tape::new();
        let data = [1.5, -2.0, 0.25];
        let x = tape.leaf(t(&[3], &data), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        for (gi, xi) in g.data().iter().zip(data) {
            assert_eq!(*gi, 2.0 * xi);
        }
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn conv_rejects_fractional_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[1, 1, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, w, b, 2, 0), Err(Error::Config(_))));
        let w_even = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(tape.conv2d(x, w_even, b, 1, 0).is_err());
        let w_bad = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
        assert!(matches!(tape.conv2d(x, w_bad, b, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f32>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn kernel_counts_skip_leaves() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.relu(a);
        let _ = tape.add(a, b).unwrap();
        let counts = tape.kernel_counts();
        assert_eq!(counts.get("relu"), Some(&1));
        assert_eq!(counts.get("add"), Some(&1));
        assert_eq!(counts.get("leaf"), None);
    }

    #[test]
    fn smooth_l1_matches_scalar_oracle() {
        assert_eq!(smooth_l1_value(0.5), 0.125);
        assert_eq!(smooth_l1_value(-2.0), 1.5);
    }
}
