//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records primitive applications during the forward pass and
//! replays them in strict reverse order in [`Tape::backward`]. Everything is
//! single-threaded and deterministic: the same tape with the same inputs
//! yields bit-identical values and gradients.

use crate::error::{Error, Result};

/// Dense n-dimensional array of f64, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Scalar value of a 0-d or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// Index of a node on a [`Tape`].
pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// beta(x) = min(x, 0). The subgradient at x == 0 is defined as 0 (not
    /// 1): an input sitting exactly at the clamp is treated as saturated
    /// and receives no gradient. Downstream this means fully saturated
    /// explanation logits cannot be trained out of saturation.
    Beta(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Concat(Vec<NodeId>),
    Slice {
        input: NodeId,
        start: usize,
    },
    ScaledSoftmax {
        input: NodeId,
        theta: f64,
    },
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Dense {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    },
    /// v_c = sum_i w_i f[i,c]
    WeightedPool {
        fmap: NodeId,
        weights: NodeId,
    },
    /// v_c = sum_i m_i f[i,c] / sum_i m_i, differentiable in both arguments
    MaskPool {
        fmap: NodeId,
        mask: NodeId,
    },
    /// v_c = mean over a fixed index set (the mask is a constant)
    SelectMean {
        fmap: NodeId,
        selected: Vec<usize>,
    },
    /// Forward: v_c = sum over `passing` of f[i,c].
    /// Backward: straight-through surrogate, as if v = sum_i (n q_i) f_i.
    ThresholdPool {
        fmap: NodeId,
        q: NodeId,
    },
    /// Elementwise max; gradient routes to the larger input (first on ties).
    Max2(NodeId, NodeId),
    /// Numerically stable binary cross-entropy on a pre-sigmoid logit.
    BceWithLogits {
        logit: NodeId,
        target: f64,
    },
    /// Nearest-neighbor block repetition of an [h,w,c] tensor by `factor`.
    UpsampleRepeat {
        input: NodeId,
        factor: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Wengert tape: append-only list of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn debug_check_finite(t: &Tensor) {
    debug_assert!(
        t.data.iter().all(|v| !v.is_nan()),
        "NaN produced by a forward operation"
    );
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        debug_check_finite(&value);
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape != tb.shape {
            return Err(Error::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", ta.shape, tb.shape),
            });
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape.clone();
        Ok(self.push(op, Tensor { shape, data }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn max2(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("max2", a, b, |x, y| if y > x { y } else { x }, Op::Max2(a, b))
    }

    fn unary(&mut self, input: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let t = &self.nodes[input].value;
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(op, value)
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        self.unary(input, |x| x * factor, Op::Scale(input, factor))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.unary(input, |x| x.max(0.0), Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        self.unary(input, sigmoid, Op::Sigmoid(input))
    }

    /// beta(x) = min(x, 0). Returns the literal constant 0.0 for x >= 0,
    /// which makes the exact-zero test in discretization safe.
    pub fn beta(&mut self, input: NodeId) -> NodeId {
        self.unary(input, |x| if x < 0.0 { x } else { 0.0 }, Op::Beta(input))
    }

    pub fn exp(&mut self, input: NodeId) -> NodeId {
        self.unary(input, f64::exp, Op::Exp(input))
    }

    pub fn log(&mut self, input: NodeId) -> NodeId {
        self.unary(input, f64::ln, Op::Log(input))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s: f64 = self.nodes[input].value.data.iter().sum();
        self.push(Op::Sum(input), Tensor::scalar(s))
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let t = &self.nodes[input].value;
        let m = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.push(Op::Mean(input), Tensor::scalar(m))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = &self.nodes[input].value;
        let numel: usize = shape.iter().product();
        if numel != t.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", t.shape, shape),
            });
        }
        let data = t.data.clone();
        Ok(self.push(Op::Reshape(input), Tensor { shape, data }))
    }

    /// Concatenates flattened inputs into one vector.
    pub fn concat(&mut self, inputs: &[NodeId]) -> NodeId {
        let mut data = Vec::new();
        for &id in inputs {
            data.extend_from_slice(&self.nodes[id].value.data);
        }
        self.push(Op::Concat(inputs.to_vec()), Tensor::vector(data))
    }

    /// Contiguous slice of the flattened input.
    pub fn slice(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = &self.nodes[input].value;
        if start + len > t.data.len() {
            return Err(Error::InvalidArgument {
                op: "slice",
                detail: format!(
                    "range {}..{} out of bounds for length {}",
                    start,
                    start + len,
                    t.data.len()
                ),
            });
        }
        let data = t.data[start..start + len].to_vec();
        Ok(self.push(Op::Slice { input, start }, Tensor::vector(data)))
    }

    /// q_i = exp(theta*l_i - m) / sum_j exp(theta*l_j - m), m = max_j theta*l_j.
    pub fn scaled_softmax(&mut self, input: NodeId, theta: f64) -> Result<NodeId> {
        let t = &self.nodes[input].value;
        if t.data.is_empty() {
            return Err(Error::InvalidArgument {
                op: "scaled_softmax",
                detail: "empty input".into(),
            });
        }
        if theta <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "scaled_softmax",
                detail: format!("theta must be positive, got {theta}"),
            });
        }
        let value = scaled_softmax_value(&t.data, theta);
        let shape = t.shape.clone();
        Ok(self.push(
            Op::ScaledSoftmax { input, theta },
            Tensor { shape, data: value },
        ))
    }

    /// Same-padded stride-1 cross-correlation.
    /// input [h,w,cin], kernels [kh,kw,cin,cout], bias [cout] -> [h,w,cout].
    pub fn conv2d_same(&mut self, input: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ti, tk, tb) = (
            &self.nodes[input].value,
            &self.nodes[kernels].value,
            &self.nodes[bias].value,
        );
        let [h, w, cin] = dims3("conv2d_same input", ti)?;
        let [kh, kw, kcin, cout] = dims4("conv2d_same kernels", tk)?;
        if kcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d_same",
                detail: format!("input has {cin} channels, kernels expect {kcin}"),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument {
                op: "conv2d_same",
                detail: format!("kernel extents must be odd, got {kh}x{kw}"),
            });
        }
        if tb.data.len() != cout {
            return Err(Error::ShapeMismatch {
                op: "conv2d_same",
                detail: format!("bias length {} vs {cout} output channels", tb.data.len()),
            });
        }
        let out = conv2d_forward(&ti.data, h, w, cin, &tk.data, kh, kw, cout, &tb.data);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernels,
                bias,
            },
            Tensor {
                shape: vec![h, w, cout],
                data: out,
            },
        ))
    }

    /// 2x2 max pooling, stride 2. Ties route the gradient to the first
    /// occurrence in row-major order.
    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let t = &self.nodes[input].value;
        let [h, w, c] = dims3("maxpool2", t)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument {
                op: "maxpool2",
                detail: format!("spatial extents must be even, got {h}x{w}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; oh * ow * c];
        let mut argmax = vec![0usize; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if t.data[idx] > best {
                                best = t.data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[(oy * ow + ox) * c + ch] = best;
                    argmax[(oy * ow + ox) * c + ch] = best_idx;
                }
            }
        }
        Ok(self.push(
            Op::MaxPool2 { input, argmax },
            Tensor {
                shape: vec![oh, ow, c],
                data: out,
            },
        ))
    }

    /// y = W^T x + b with x [d], W [d,m], b [m].
    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tw, tb) = (
            &self.nodes[input].value,
            &self.nodes[weights].value,
            &self.nodes[bias].value,
        );
        let d = tx.data.len();
        let [wd, m] = dims2("dense weights", tw)?;
        if wd != d || tb.data.len() != m {
            return Err(Error::ShapeMismatch {
                op: "dense",
                detail: format!(
                    "x has {d} entries, W is {wd}x{m}, b has {}",
                    tb.data.len()
                ),
            });
        }
        let mut out = tb.data.clone();
        for i in 0..d {
            let xi = tx.data[i];
            let row = &tw.data[i * m..(i + 1) * m];
            for j in 0..m {
                out[j] += xi * row[j];
            }
        }
        Ok(self.push(
            Op::Dense {
                input,
                weights,
                bias,
            },
            Tensor::vector(out),
        ))
    }

    /// v_c = sum_i w_i f[i,c] over the n spatial positions of fmap.
    pub fn weighted_pool(&mut self, fmap: NodeId, weights: NodeId) -> Result<NodeId> {
        let (tf, tw) = (&self.nodes[fmap].value, &self.nodes[weights].value);
        let (n, c) = positions_channels("weighted_pool", tf, tw.data.len())?;
        let mut out = vec![0.0; c];
        for i in 0..n {
            let wi = tw.data[i];
            let f = &tf.data[i * c..(i + 1) * c];
            for ch in 0..c {
                out[ch] += wi * f[ch];
            }
        }
        Ok(self.push(Op::WeightedPool { fmap, weights }, Tensor::vector(out)))
    }

    /// v_c = sum_i m_i f[i,c] / sum_i m_i.
    pub fn mask_pool(&mut self, fmap: NodeId, mask: NodeId) -> Result<NodeId> {
        let (tf, tm) = (&self.nodes[fmap].value, &self.nodes[mask].value);
        let (n, c) = positions_channels("mask_pool", tf, tm.data.len())?;
        let total: f64 = tm.data.iter().sum();
        if total == 0.0 {
            return Err(Error::InvalidArgument {
                op: "mask_pool",
                detail: "all-zero mask".into(),
            });
        }
        let mut out = vec![0.0; c];
        for i in 0..n {
            let mi = tm.data[i];
            let f = &tf.data[i * c..(i + 1) * c];
            for ch in 0..c {
                out[ch] += mi * f[ch];
            }
        }
        for v in &mut out {
            *v /= total;
        }
        Ok(self.push(Op::MaskPool { fmap, mask }, Tensor::vector(out)))
    }

    /// Mean of the feature vectors at a fixed set of positions.
    pub fn select_mean(&mut self, fmap: NodeId, selected: Vec<usize>) -> Result<NodeId> {
        let tf = &self.nodes[fmap].value;
        let c = *tf.shape.last().ok_or(Error::ShapeMismatch {
            op: "select_mean",
            detail: "scalar feature map".into(),
        })?;
        let n = tf.data.len() / c;
        if selected.is_empty() {
            return Err(Error::InvalidArgument {
                op: "select_mean",
                detail: "empty selection".into(),
            });
        }
        if let Some(&bad) = selected.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument {
                op: "select_mean",
                detail: format!("index {bad} out of range for {n} positions"),
            });
        }
        let mut out = vec![0.0; c];
        for &i in &selected {
            let f = &tf.data[i * c..(i + 1) * c];
            for ch in 0..c {
                out[ch] += f[ch];
            }
        }
        let k = selected.len() as f64;
        for v in &mut out {
            *v /= k;
        }
        Ok(self.push(Op::SelectMean { fmap, selected }, Tensor::vector(out)))
    }

    /// Thresholded pooling: forward sums feature vectors at positions with
    /// q_i > gamma (falling back to the argmax-q position when none pass).
    /// Backward uses the straight-through surrogate v ~= sum_i (n q_i) f_i.
    pub fn thresholded_pool(&mut self, fmap: NodeId, q: NodeId, gamma: f64) -> Result<NodeId> {
        let (tf, tq) = (&self.nodes[fmap].value, &self.nodes[q].value);
        let (n, c) = positions_channels("thresholded_pool", tf, tq.data.len())?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidArgument {
                op: "thresholded_pool",
                detail: format!("gamma must lie in [0,1), got {gamma}"),
            });
        }
        let mut passing: Vec<usize> = (0..n).filter(|&i| tq.data[i] > gamma).collect();
        if passing.is_empty() {
            let best = argmax_first(&tq.data);
            passing.push(best);
        }
        let mut out = vec![0.0; c];
        for &i in &passing {
            let f = &tf.data[i * c..(i + 1) * c];
            for ch in 0..c {
                out[ch] += f[ch];
            }
        }
        Ok(self.push(Op::ThresholdPool { fmap, q }, Tensor::vector(out)))
    }

    /// Binary cross-entropy of sigmoid(logit) against target, computed in the
    /// numerically stable logit form.
    pub fn bce_with_logits(&mut self, logit: NodeId, target: f64) -> Result<NodeId> {
        let t = &self.nodes[logit].value;
        if t.data.len() != 1 {
            return Err(Error::InvalidArgument {
                op: "bce_with_logits",
                detail: format!("logit must be scalar, got {} elements", t.data.len()),
            });
        }
        let z = t.data[0];
        let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
        Ok(self.push(Op::BceWithLogits { logit, target }, Tensor::scalar(loss)))
    }

    /// Nearest-neighbor block repetition of the spatial extents of [h,w,c].
    pub fn upsample_repeat(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let t = &self.nodes[input].value;
        if factor < 1 {
            return Err(Error::InvalidArgument {
                op: "upsample_repeat",
                detail: "factor must be >= 1".into(),
            });
        }
        let [h, w, c] = dims3("upsample_repeat", t)?;
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((oy / factor) * w + ox / factor) * c;
                let dst = (oy * ow + ox) * c;
                out[dst..dst + c].copy_from_slice(&t.data[src..src + c]);
            }
        }
        Ok(self.push(
            Op::UpsampleRepeat { input, factor },
            Tensor {
                shape: vec![oh, ow, c],
                data: out,
            },
        ))
    }

    /// Runs the reverse pass from a scalar loss node and returns a gradient
    /// per tape node (zero for nodes the loss does not depend on).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss].value.data.len() != 1 {
            return Err(Error::InvalidArgument {
                op: "backward",
                detail: format!(
                    "loss must be scalar, node has {} elements",
                    self.nodes[loss].value.data.len()
                ),
            });
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.data.len()])
            .collect();
        grads[loss][0] = 1.0;

        for id in (0..=loss).rev() {
            // Split off the upstream gradient so we can mutate input slots.
            let upstream = std::mem::take(&mut grads[id]);
            if upstream.iter().all(|&g| g == 0.0) {
                grads[id] = upstream;
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], &upstream);
                    accumulate(&mut grads[*b], &upstream);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*a], &upstream);
                    for (g, &u) in grads[*b].iter_mut().zip(&upstream) {
                        *g -= u;
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value.data, &self.nodes[*b].value.data);
                    for i in 0..upstream.len() {
                        grads[*a][i] += upstream[i] * vb[i];
                    }
                    for i in 0..upstream.len() {
                        grads[*b][i] += upstream[i] * va[i];
                    }
                }
                Op::Scale(a, factor) => {
                    for (g, &u) in grads[*a].iter_mut().zip(&upstream) {
                        *g += u * factor;
                    }
                }
                Op::Relu(a) => {
                    let va = &self.nodes[*a].value.data;
                    for i in 0..upstream.len() {
                        if va[i] > 0.0 {
                            grads[*a][i] += upstream[i];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let out = &self.nodes[id].value.data;
                    for i in 0..upstream.len() {
                        grads[*a][i] += upstream[i] * out[i] * (1.0 - out[i]);
                    }
                }
                Op::Beta(a) => {
                    let va = &self.nodes[*a].value.data;
                    for i in 0..upstream.len() {
                        if va[i] < 0.0 {
                            grads[*a][i] += upstream[i];
                        }
                    }
                }
                Op::Exp(a) => {
                    let out = &self.nodes[id].value.data;
                    for i in 0..upstream.len() {
                        grads[*a][i] += upstream[i] * out[i];
                    }
                }
                Op::Log(a) => {
                    let va = &self.nodes[*a].value.data;
                    for i in 0..upstream.len() {
                        grads[*a][i] += upstream[i] / va[i];
                    }
                }
                Op::Sum(a) => {
                    let u = upstream[0];
                    for g in grads[*a].iter_mut() {
                        *g += u;
                    }
                }
                Op::Mean(a) => {
                    let u = upstream[0] / self.nodes[*a].value.data.len() as f64;
                    for g in grads[*a].iter_mut() {
                        *g += u;
                    }
                }
                Op::Reshape(a) => accumulate(&mut grads[*a], &upstream),
                Op::Concat(inputs) => {
                    let mut offset = 0;
                    for &a in inputs {
                        let len = self.nodes[a].value.data.len();
                        accumulate(&mut grads[a], &upstream[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::Slice { input, start } => {
                    accumulate(&mut grads[*input][*start..*start + upstream.len()], &upstream);
                }
                Op::ScaledSoftmax { input, theta } => {
                    let q = &self.nodes[id].value.data;
                    let dot: f64 = q.iter().zip(&upstream).map(|(&qi, &u)| qi * u).sum();
                    for i in 0..upstream.len() {
                        grads[*input][i] += theta * q[i] * (upstream[i] - dot);
                    }
                }
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                } => {
                    let ti = &self.nodes[*input].value;
                    let tk = &self.nodes[*kernels].value;
                    let (h, w, cin) = (ti.shape[0], ti.shape[1], ti.shape[2]);
                    let (kh, kw, cout) = (tk.shape[0], tk.shape[1], tk.shape[3]);
                    // Reborrow trick: pull the three gradient buffers out.
                    let mut gi = std::mem::take(&mut grads[*input]);
                    let mut gk = std::mem::take(&mut grads[*kernels]);
                    let mut gb = std::mem::take(&mut grads[*bias]);
                    conv2d_backward(
                        &ti.data, h, w, cin, &tk.data, kh, kw, cout, &upstream, &mut gi, &mut gk,
                        &mut gb,
                    );
                    grads[*input] = gi;
                    grads[*kernels] = gk;
                    grads[*bias] = gb;
                }
                Op::MaxPool2 { input, argmax } => {
                    for (o, &src) in argmax.iter().enumerate() {
                        grads[*input][src] += upstream[o];
                    }
                }
                Op::Dense {
                    input,
                    weights,
                    bias,
                } => {
                    let tx = &self.nodes[*input].value;
                    let tw = &self.nodes[*weights].value;
                    let (d, m) = (tx.data.len(), upstream.len());
                    for i in 0..d {
                        let row = &tw.data[i * m..(i + 1) * m];
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += row[j] * upstream[j];
                        }
                        grads[*input][i] += acc;
                    }
                    for i in 0..d {
                        let xi = tx.data[i];
                        let grow = &mut grads[*weights][i * m..(i + 1) * m];
                        for j in 0..m {
                            grow[j] += xi * upstream[j];
                        }
                    }
                    accumulate(&mut grads[*bias], &upstream);
                }
                Op::WeightedPool { fmap, weights } => {
                    let tf = &self.nodes[*fmap].value;
                    let c = upstream.len();
                    let n = tf.data.len() / c;
                    for i in 0..n {
                        let wi = self.nodes[*weights].value.data[i];
                        let gf = &mut grads[*fmap][i * c..(i + 1) * c];
                        for ch in 0..c {
                            gf[ch] += wi * upstream[ch];
                        }
                    }
                    for i in 0..n {
                        let f = &tf.data[i * c..(i + 1) * c];
                        let mut acc = 0.0;
                        for ch in 0..c {
                            acc += f[ch] * upstream[ch];
                        }
                        grads[*weights][i] += acc;
                    }
                }
                Op::MaskPool { fmap, mask } => {
                    let tf = &self.nodes[*fmap].value;
                    let tm = &self.nodes[*mask].value;
                    let c = upstream.len();
                    let n = tm.data.len();
                    let total: f64 = tm.data.iter().sum();
                    let v = &self.nodes[id].value.data;
                    for i in 0..n {
                        let mi = tm.data[i];
                        let gf = &mut grads[*fmap][i * c..(i + 1) * c];
                        for ch in 0..c {
                            gf[ch] += mi / total * upstream[ch];
                        }
                    }
                    for i in 0..n {
                        let f = &tf.data[i * c..(i + 1) * c];
                        let mut acc = 0.0;
                        for ch in 0..c {
                            acc += (f[ch] - v[ch]) / total * upstream[ch];
                        }
                        grads[*mask][i] += acc;
                    }
                }
                Op::SelectMean { fmap, selected } => {
                    let c = upstream.len();
                    let k = selected.len() as f64;
                    for &i in selected {
                        let gf = &mut grads[*fmap][i * c..(i + 1) * c];
                        for ch in 0..c {
                            gf[ch] += upstream[ch] / k;
                        }
                    }
                }
                Op::ThresholdPool { fmap, q } => {
                    let tf = &self.nodes[*fmap].value;
                    let tq = &self.nodes[*q].value;
                    let c = upstream.len();
                    let n = tq.data.len();
                    let nf = n as f64;
                    for i in 0..n {
                        let qi = tq.data[i];
                        let gf = &mut grads[*fmap][i * c..(i + 1) * c];
                        for ch in 0..c {
                            gf[ch] += nf * qi * upstream[ch];
                        }
                    }
                    for i in 0..n {
                        let f = &tf.data[i * c..(i + 1) * c];
                        let mut acc = 0.0;
                        for ch in 0..c {
                            acc += nf * f[ch] * upstream[ch];
                        }
                        grads[*q][i] += acc;
                    }
                }
                Op::Max2(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value.data, &self.nodes[*b].value.data);
                    for i in 0..upstream.len() {
                        if vb[i] > va[i] {
                            grads[*b][i] += upstream[i];
                        } else {
                            grads[*a][i] += upstream[i];
                        }
                    }
                }
                Op::BceWithLogits { logit, target } => {
                    let z = self.nodes[*logit].value.data[0];
                    grads[*logit][0] += upstream[0] * (sigmoid(z) - target);
                }
                Op::UpsampleRepeat { input, factor } => {
                    let t = &self.nodes[*input].value;
                    let (h, w, c) = (t.shape[0], t.shape[1], t.shape[2]);
                    let ow = w * factor;
                    for oy in 0..h * factor {
                        for ox in 0..ow {
                            let src = ((oy / factor) * w + ox / factor) * c;
                            let dst = (oy * ow + ox) * c;
                            for ch in 0..c {
                                grads[*input][src + ch] += upstream[dst + ch];
                            }
                        }
                    }
                }
            }
            grads[id] = upstream;
        }
        Ok(Gradients { grads })
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> &[f64] {
        &self.grads[id]
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (g, &u) in dst.iter_mut().zip(src) {
        *g += u;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn scaled_softmax_value(l: &[f64], theta: f64) -> Vec<f64> {
    let m = l
        .iter()
        .map(|&x| theta * x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = l.iter().map(|&x| (theta * x - m).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// First index of the maximum value (ties break to the lowest index).
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn dims2(op: &'static str, t: &Tensor) -> Result<[usize; 2]> {
    match t.shape[..] {
        [a, b] => Ok([a, b]),
        _ => Err(Error::ShapeMismatch {
            op: "dense",
            detail: format!("{op} must be rank 2, got {:?}", t.shape),
        }),
    }
}

fn dims3(op: &'static str, t: &Tensor) -> Result<[usize; 3]> {
    match t.shape[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::ShapeMismatch {
            op: "conv",
            detail: format!("{op} must be rank 3 (h,w,c), got {:?}", t.shape),
        }),
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match t.shape[..] {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::ShapeMismatch {
            op: "conv",
            detail: format!("{op} must be rank 4 (kh,kw,cin,cout), got {:?}", t.shape),
        }),
    }
}

/// Interprets a feature-map tensor as n positions of c channels (c = last
/// extent) and checks the weight vector length against n.
fn positions_channels(op: &'static str, fmap: &Tensor, weights_len: usize) -> Result<(usize, usize)> {
    let c = *fmap.shape().last().ok_or(Error::ShapeMismatch {
        op: "pool",
        detail: format!("{op}: scalar feature map"),
    })?;
    let n = fmap.len() / c;
    if weights_len != n {
        return Err(Error::ShapeMismatch {
            op: "pool",
            detail: format!("{op}: {n} positions vs {weights_len} weights"),
        });
    }
    Ok((n, c))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kernels: &[f64],
    kh: usize,
    kw: usize,
    cout: usize,
    bias: &[f64],
) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; h * w * cout];
    let mut acc = vec![0.0; cout];
    for y in 0..h {
        for x in 0..w {
            acc.copy_from_slice(bias);
            for ky in 0..kh {
                let iy = y + ky;
                if iy < ph || iy - ph >= h {
                    continue;
                }
                let iy = iy - ph;
                for kx in 0..kw {
                    let ix = x + kx;
                    if ix < pw || ix - pw >= w {
                        continue;
                    }
                    let ix = ix - pw;
                    let in_base = (iy * w + ix) * cin;
                    let k_base = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let v = input[in_base + ci];
                        let krow = &kernels[k_base + ci * cout..k_base + (ci + 1) * cout];
                        for co in 0..cout {
                            acc[co] += v * krow[co];
                        }
                    }
                }
            }
            out[(y * w + x) * cout..(y * w + x + 1) * cout].copy_from_slice(&acc);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kernels: &[f64],
    kh: usize,
    kw: usize,
    cout: usize,
    upstream: &[f64],
    grad_input: &mut [f64],
    grad_kernels: &mut [f64],
    grad_bias: &mut [f64],
) {
    let (ph, pw) = (kh / 2, kw / 2);
    for y in 0..h {
        for x in 0..w {
            let u = &upstream[(y * w + x) * cout..(y * w + x + 1) * cout];
            for co in 0..cout {
                grad_bias[co] += u[co];
            }
            for ky in 0..kh {
                let iy = y + ky;
                if iy < ph || iy - ph >= h {
                    continue;
                }
                let iy = iy - ph;
                for kx in 0..kw {
                    let ix = x + kx;
                    if ix < pw || ix - pw >= w {
                        continue;
                    }
                    let ix = ix - pw;
                    let in_base = (iy * w + ix) * cin;
                    let k_base = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let v = input[in_base + ci];
                        let krow = &kernels[k_base + ci * cout..k_base + (ci + 1) * cout];
                        let mut acc = 0.0;
                        let grow = &mut grad_kernels[k_base + ci * cout..k_base + (ci + 1) * cout];
                        for co in 0..cout {
                            acc += krow[co] * u[co];
                            grow[co] += v * u[co];
                        }
                        grad_input[in_base + ci] += acc;
                    }
                }
            }
        }
    }
}

/// Central-difference gradient check for a scalar-valued tape function.
///
/// `f` builds a graph from the leaf it is handed and returns the scalar
/// output node. Returns the maximum relative error over all coordinates,
/// with relative error |a - g| / max(|a|, |g|, 1e-8).
pub fn grad_check(f: impl Fn(&mut Tape, NodeId) -> NodeId, x: &Tensor, eps: f64) -> f64 {
    assert!(eps > 0.0, "eps must be positive");
    let eval = |t: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let leaf = tape.leaf(t.clone());
        let out = f(&mut tape, leaf);
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf);
    let grads = tape.backward(out).expect("scalar output required");
    let analytic = grads.wrt(leaf).to_vec();

    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    max_rel
}
