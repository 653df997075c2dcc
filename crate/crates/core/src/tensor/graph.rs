use super::kernels::{self, ConvGeometry};
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis-aligned box `[x1, y1, x2, y2]` in the coordinate frame of a feature map.
pub type FeatureBox = [f64; 4];

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        out_channels: usize,
        cols: Vec<f64>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    BiasAdd {
        input: Var,
        bias: Var,
    },
    Concat {
        parts: Vec<(Var, Option<Var>)>,
        axis: usize,
    },
    Reshape(Var),
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    GroupMean {
        input: Var,
        groups: Vec<(usize, usize)>,
    },
    GlobalAvgPool(Var),
    RoiAlign {
        input: Var,
        taps: Vec<Vec<(usize, f64)>>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        picks: Vec<(usize, f64)>,
    },
    SmoothL1 {
        input: Var,
        picks: Vec<(usize, usize)>,
        targets: Tensor,
        beta: f64,
        norm: f64,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Sigmoid(a) | Op::Reshape(a) | Op::GlobalAvgPool(a) | Op::Sum(a) => {
                vec![*a]
            }
            Op::Softmax { input, .. }
            | Op::GatherRows { input, .. }
            | Op::GroupMean { input, .. }
            | Op::RoiAlign { input, .. }
            | Op::SmoothL1 { input, .. } => vec![*input],
            Op::BiasAdd { input, bias } => vec![*input, *bias],
            Op::Concat { parts, .. } => parts
                .iter()
                .flat_map(|(p, w)| std::iter::once(*p).chain(*w))
                .collect(),
            Op::CrossEntropy { logits, .. } | Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is always topologically sorted; [`Graph::backward`] walks it once in
/// reverse.
///
/// A graph lives for one forward/backward pair and is then dropped.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
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
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
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

    /// Gradient accumulated by the last [`Graph::backward`], if the node was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, TensorError> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(name, out, op)
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, TensorError> {
        let va = self.value(a);
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect());
        self.push(name, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        self.map("scale", a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map("relu", a, Op::Relu(a), |x| if x <= 0.0 { 0.0 } else { x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {:?}", va.shape()),
            });
        }
        let (outer, len, inner) = split_axis(va.shape(), axis);
        let src = va.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let out = Tensor::from_parts(va.shape().to_vec(), out);
        self.push("softmax", out, Op::Softmax { input: a, axis })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", left: sa.to_vec(), right: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    /// Adds a per-channel bias `[C]` to an input shaped `[N, C, ...]`.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var, TensorError> {
        let (si, sb) = (self.shape(input), self.shape(bias));
        if si.len() < 2 || sb.len() != 1 || sb[0] != si[1] {
            return Err(TensorError::ShapeMismatch { op: "bias_add", left: si.to_vec(), right: sb.to_vec() });
        }
        let (outer, channels, inner) = split_axis(si, 1);
        let b = self.value(bias).data();
        let mut out = self.value(input).data().to_vec();
        for o in 0..outer {
            for c in 0..channels {
                let start = (o * channels + c) * inner;
                for v in &mut out[start..start + inner] {
                    *v += b[c];
                }
            }
        }
        let out = Tensor::from_parts(si.to_vec(), out);
        self.push("bias_add", out, Op::BiasAdd { input, bias })
    }

    /// `x[in] -> x @ weight[in,out] + bias[out]` on a batch `[N, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, weight)?;
        self.bias_add(y, bias)
    }

    /// Direct 2-D convolution of `input[N,C,H,W]` with `kernel[O,C,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        let mismatch = || TensorError::ShapeMismatch { op: "conv2d", left: si.clone(), right: sk.clone() };
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument { op: "conv2d", msg: "stride must be at least 1".into() });
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(mismatch());
        }
        let geom = ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let cols = kernels::im2col(self.value(input).data(), &geom);
        let ncols = geom.columns();
        let mut prod = vec![0.0; o * ncols];
        kernels::gemm(self.value(kernel).data(), &cols, &mut prod, o, geom.patch_len(), ncols);
        // [O, N*L] -> [N, O, L]
        let plane = geom.out_h * geom.out_w;
        let mut out = vec![0.0; n * o * plane];
        for oc in 0..o {
            for b in 0..n {
                let src = &prod[oc * ncols + b * plane..oc * ncols + (b + 1) * plane];
                out[(b * o + oc) * plane..(b * o + oc + 1) * plane].copy_from_slice(src);
            }
        }
        let out = Tensor::from_parts(vec![n, o, geom.out_h, geom.out_w], out);
        self.push("conv2d", out, Op::Conv2d { input, kernel, geom, out_channels: o, cols })
    }

    /// Concatenates `parts` along `axis`, scaling each by its optional one-element weight.
    pub fn weighted_concat(&mut self, parts: &[(Var, Option<Var>)], axis: usize) -> Result<Var, TensorError> {
        let Some(&(first, _)) = parts.first() else {
            return Err(TensorError::EmptyInput { op: "weighted_concat" });
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "weighted_concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &(p, w) in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch { op: "weighted_concat", left: base.clone(), right: s.to_vec() });
            }
            if let Some(w) = w {
                if self.value(w).numel() != 1 {
                    return Err(TensorError::NotScalar { shape: self.shape(w).to_vec() });
                }
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for &(p, w) in parts {
            let scale = w.map_or(1.0, |w| self.value(w).data()[0]);
            let len = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let s = &src[o * len * inner..(o + 1) * len * inner];
                let d = &mut out[(o * total + offset) * inner..(o * total + offset + len) * inner];
                for (dv, &sv) in d.iter_mut().zip(s) {
                    *dv = scale * sv;
                }
            }
            offset += len;
        }
        let out = Tensor::from_parts(shape, out);
        self.push("weighted_concat", out, Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let parts: Vec<_> = parts.iter().map(|&p| (p, None)).collect();
        self.weighted_concat(&parts, axis)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(a))
    }

    /// Selects (and possibly repeats) rows along axis 0.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let va = self.value(a);
        let count = va.shape()[0];
        if rows.is_empty() {
            return Err(TensorError::EmptyInput { op: "gather_rows" });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= count) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: format!("row {bad} out of range for shape {:?}", va.shape()),
            });
        }
        let row_len = va.numel() / count;
        let mut out = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            out.extend_from_slice(&va.data()[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = va.shape().to_vec();
        shape[0] = rows.len();
        let out = Tensor::from_parts(shape, out);
        self.push("gather_rows", out, Op::GatherRows { input: a, rows: rows.to_vec() })
    }

    /// Averages consecutive row ranges `[start, end)` along axis 0; one output row per group.
    pub fn group_mean(&mut self, a: Var, groups: &[(usize, usize)]) -> Result<Var, TensorError> {
        let va = self.value(a);
        let count = va.shape()[0];
        if groups.is_empty() {
            return Err(TensorError::EmptyInput { op: "group_mean" });
        }
        for &(s, e) in groups {
            if s >= e || e > count {
                return Err(TensorError::InvalidArgument {
                    op: "group_mean",
                    msg: format!("group [{s}, {e}) invalid for {count} rows"),
                });
            }
        }
        let row_len = va.numel() / count;
        let mut out = vec![0.0; groups.len() * row_len];
        for (g, &(s, e)) in groups.iter().enumerate() {
            let dst = &mut out[g * row_len..(g + 1) * row_len];
            for r in s..e {
                for (d, &v) in dst.iter_mut().zip(&va.data()[r * row_len..(r + 1) * row_len]) {
                    *d += v;
                }
            }
            let inv = (e - s) as f64;
            for d in dst.iter_mut() {
                *d /= inv;
            }
        }
        let mut shape = va.shape().to_vec();
        shape[0] = groups.len();
        let out = Tensor::from_parts(shape, out);
        self.push("group_mean", out, Op::GroupMean { input: a, groups: groups.to_vec() })
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op: "global_avg_pool",
                msg: format!("expected rank 4, got shape {s:?}"),
            });
        }
        let plane = s[2] * s[3];
        let out: Vec<f64> = va
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::from_parts(vec![s[0], s[1]], out);
        self.push("global_avg_pool", out, Op::GlobalAvgPool(a))
    }

    /// RoIAlign over a single feature map `[C,H,W]`.
    ///
    /// Boxes are in continuous feature coordinates where cell `i` spans
    /// `[i, i+1)` and its value sits at `i + 0.5`. Each of the `pool x pool`
    /// output cells averages bilinear samples on a 2x2 grid; sample positions
    /// are clamped to the map border. Output is `[boxes, C, pool, pool]`.
    pub fn roi_align(&mut self, features: Var, boxes: &[FeatureBox], pool: usize) -> Result<Var, TensorError> {
        const SAMPLES: usize = 2;
        let vf = self.value(features);
        let s = vf.shape().to_vec();
        if s.len() != 3 {
            return Err(TensorError::InvalidArgument {
                op: "roi_align",
                msg: format!("expected features [C,H,W], got {s:?}"),
            });
        }
        if pool == 0 {
            return Err(TensorError::InvalidArgument { op: "roi_align", msg: "pool must be at least 1".into() });
        }
        if boxes.is_empty() {
            return Err(TensorError::EmptyInput { op: "roi_align" });
        }
        let (channels, h, w) = (s[0], s[1], s[2]);
        let mut taps = Vec::with_capacity(boxes.len() * pool * pool);
        for b in boxes {
            let [x1, y1, x2, y2] = *b;
            if !(x2 > x1 && y2 > y1) || !b.iter().all(|v| v.is_finite()) {
                return Err(TensorError::InvalidArgument {
                    op: "roi_align",
                    msg: format!("degenerate box {b:?}"),
                });
            }
            let bin_h = (y2 - y1) / pool as f64;
            let bin_w = (x2 - x1) / pool as f64;
            for py in 0..pool {
                for px in 0..pool {
                    let mut cell: Vec<(usize, f64)> = Vec::with_capacity(16);
                    for sy in 0..SAMPLES {
                        let y = y1 + bin_h * (py as f64 + (sy as f64 + 0.5) / SAMPLES as f64);
                        for sx in 0..SAMPLES {
                            let x = x1 + bin_w * (px as f64 + (sx as f64 + 0.5) / SAMPLES as f64);
                            let norm = (SAMPLES * SAMPLES) as f64;
                            for (idx, wt) in bilinear_taps(y, x, h, w) {
                                cell.push((idx, wt / norm));
                            }
                        }
                    }
                    taps.push(cell);
                }
            }
        }
        let src = vf.data();
        let plane = h * w;
        let cells = pool * pool;
        let mut out = vec![0.0; boxes.len() * channels * cells];
        for (bi, chunk) in taps.chunks(cells).enumerate() {
            for c in 0..channels {
                let fmap = &src[c * plane..(c + 1) * plane];
                for (k, cell) in chunk.iter().enumerate() {
                    out[(bi * channels + c) * cells + k] = cell.iter().map(|&(i, wt)| wt * fmap[i]).sum();
                }
            }
        }
        let out = Tensor::from_parts(vec![boxes.len(), channels, pool, pool], out);
        self.push("roi_align", out, Op::RoiAlign { input: features, taps })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let total = self.value(a).sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean softmax cross-entropy of `logits[R, C]` against one class index per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let vl = self.value(logits);
        let s = vl.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: s.to_vec(),
                right: vec![targets.len()],
            });
        }
        let (rows, classes) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("target {bad} out of range for {classes} classes"),
            });
        }
        let mut probs = vec![0.0; rows * classes];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &vl.data()[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for (k, v) in row.iter().enumerate() {
                probs[r * classes + k] = (v - lse).exp();
            }
            loss += lse - row[targets[r]];
        }
        let loss = loss / rows as f64;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Mean binary cross-entropy over `(flat index, label)` picks of a logit tensor.
    /// An empty pick list yields zero while keeping the input connected.
    pub fn bce_with_logits(&mut self, logits: Var, picks: &[(usize, f64)]) -> Result<Var, TensorError> {
        let vl = self.value(logits);
        if let Some(&(bad, _)) = picks.iter().find(|&&(i, _)| i >= vl.numel()) {
            return Err(TensorError::InvalidArgument {
                op: "bce_with_logits",
                msg: format!("index {bad} out of range for shape {:?}", vl.shape()),
            });
        }
        let mut loss = 0.0;
        for &(i, y) in picks {
            let x = vl.data()[i];
            // max(x,0) - x*y + ln(1 + e^-|x|)
            loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        }
        if !picks.is_empty() {
            loss /= picks.len() as f64;
        }
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, picks: picks.to_vec() },
        )
    }

    /// Smooth-L1 between selected rows of `input[R, D]` and rows of `targets[S, D]`,
    /// summed over coordinates and divided by `norm`. Each pick is `(input row, target row)`.
    pub fn smooth_l1(
        &mut self,
        input: Var,
        picks: &[(usize, usize)],
        targets: Tensor,
        beta: f64,
        norm: f64,
    ) -> Result<Var, TensorError> {
        let vi = self.value(input);
        let si = vi.shape();
        if si.len() != 2 || targets.rank() != 2 || targets.shape()[1] != si[1] {
            return Err(TensorError::ShapeMismatch {
                op: "smooth_l1",
                left: si.to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        if beta <= 0.0 || norm <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "smooth_l1",
                msg: format!("beta {beta} and norm {norm} must be positive"),
            });
        }
        let d = si[1];
        let mut loss = 0.0;
        for &(r, t) in picks {
            if r >= si[0] || t >= targets.shape()[0] {
                return Err(TensorError::InvalidArgument {
                    op: "smooth_l1",
                    msg: format!("pick ({r}, {t}) out of range"),
                });
            }
            for k in 0..d {
                let diff = vi.data()[r * d + k] - targets.data()[t * d + k];
                loss += smooth_l1_value(diff, beta);
            }
        }
        let loss = loss / norm;
        self.push(
            "smooth_l1",
            Tensor::scalar(loss),
            Op::SmoothL1 { input, picks: picks.to_vec(), targets, beta, norm },
        )
    }

    /// Populates gradients of every node that requires them and is reachable from `loss`.
    /// Gradients accumulate additively, so call [`Graph::clear_grads`] before a second pass.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyInput { op: "backward" });
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar { shape });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes[loss.0], |g| g[0] += 1.0);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else { continue };
            if !node.requires_grad {
                continue;
            }
            backprop(before, node, g);
            if let Some(g) = &node.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
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

fn smooth_l1_value(diff: f64, beta: f64) -> f64 {
    let a = diff.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(diff: f64, beta: f64) -> f64 {
    if diff.abs() < beta {
        diff / beta
    } else {
        diff.signum()
    }
}

/// `(outer, axis length, inner)` strides for iterating along one axis.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Bilinear interpolation taps at continuous feature position `(y, x)`.
pub(crate) fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let yi = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let xi = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let y0 = yi.floor() as usize;
    let x0 = xi.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ly = yi - y0 as f64;
    let lx = xi - x0 as f64;
    [
        (y0 * w + x0, (1.0 - ly) * (1.0 - lx)),
        (y0 * w + x1, (1.0 - ly) * lx),
        (y1 * w + x0, ly * (1.0 - lx)),
        (y1 * w + x1, ly * lx),
    ]
}

fn accumulate(node: &mut Node, f: impl FnOnce(&mut [f64])) {
    if !node.requires_grad {
        return;
    }
    let n = node.value.numel();
    let g = node.grad.get_or_insert_with(|| vec![0.0; n]);
    f(g);
}

fn add_into(node: &mut Node, contribution: impl Iterator<Item = f64>) {
    accumulate(node, |g| {
        for (gv, c) in g.iter_mut().zip(contribution) {
            *gv += c;
        }
    });
}

/// Pushes the output gradient `g` of `node` into its inputs, all of which live in `before`.
fn backprop(before: &mut [Node], node: &Node, g: &[f64]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(&mut before[a.0], g.iter().copied());
            add_into(&mut before[b.0], g.iter().copied());
        }
        Op::Sub(a, b) => {
            add_into(&mut before[a.0], g.iter().copied());
            add_into(&mut before[b.0], g.iter().map(|v| -v));
        }
        Op::Mul(a, b) => {
            let va = before[a.0].value.data().to_vec();
            let vb = before[b.0].value.data().to_vec();
            add_into(&mut before[a.0], g.iter().zip(&vb).map(|(gv, y)| gv * y));
            add_into(&mut before[b.0], g.iter().zip(&va).map(|(gv, x)| gv * x));
        }
        Op::Scale(a, f) => add_into(&mut before[a.0], g.iter().map(|v| v * f)),
        Op::Relu(a) => add_into(
            &mut before[a.0],
            g.iter().zip(out).map(|(gv, &y)| if y > 0.0 { *gv } else { 0.0 }),
        ),
        Op::Sigmoid(a) => add_into(&mut before[a.0], g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y))),
        Op::Softmax { input, axis } => {
            let (outer, len, inner) = split_axis(node.value.shape(), *axis);
            let mut dx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let dot: f64 = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                    for k in 0..len {
                        dx[at(k)] = out[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            add_into(&mut before[input.0], dx.into_iter());
        }
        Op::MatMul(a, b) => {
            let sa = before[a.0].value.shape().to_vec();
            let sb = before[b.0].value.shape().to_vec();
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if before[a.0].requires_grad {
                let mut da = vec![0.0; m * k];
                kernels::gemm_nt(g, before[b.0].value.data(), &mut da, m, n, k);
                add_into(&mut before[a.0], da.into_iter());
            }
            if before[b.0].requires_grad {
                let mut db = vec![0.0; k * n];
                kernels::gemm_tn(before[a.0].value.data(), g, &mut db, k, m, n);
                add_into(&mut before[b.0], db.into_iter());
            }
        }
        Op::BiasAdd { input, bias } => {
            add_into(&mut before[input.0], g.iter().copied());
            let (outer, channels, inner) = split_axis(node.value.shape(), 1);
            let mut db = vec![0.0; channels];
            for o in 0..outer {
                for (c, d) in db.iter_mut().enumerate() {
                    let start = (o * channels + c) * inner;
                    *d += g[start..start + inner].iter().sum::<f64>();
                }
            }
            add_into(&mut before[bias.0], db.into_iter());
        }
        Op::Conv2d { input, kernel, geom, out_channels, cols } => {
            let o = *out_channels;
            let ncols = geom.columns();
            let plane = geom.out_h * geom.out_w;
            // [N, O, L] -> [O, N*L]
            let mut g_r = vec![0.0; o * ncols];
            for b in 0..geom.batch {
                for oc in 0..o {
                    let src = &g[(b * o + oc) * plane..(b * o + oc + 1) * plane];
                    g_r[oc * ncols + b * plane..oc * ncols + (b + 1) * plane].copy_from_slice(src);
                }
            }
            let patch = geom.patch_len();
            if before[kernel.0].requires_grad {
                let mut dk = vec![0.0; o * patch];
                kernels::gemm_nt(&g_r, cols, &mut dk, o, ncols, patch);
                add_into(&mut before[kernel.0], dk.into_iter());
            }
            if before[input.0].requires_grad {
                let mut dcols = vec![0.0; patch * ncols];
                kernels::gemm_tn(before[kernel.0].value.data(), &g_r, &mut dcols, patch, o, ncols);
                accumulate(&mut before[input.0], |gi| kernels::col2im(&dcols, geom, gi));
            }
        }
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let (outer, total, inner) = split_axis(shape, *axis);
            let mut offset = 0;
            for &(p, w) in parts {
                let len = before[p.0].value.shape()[*axis];
                let scale = w.map_or(1.0, |w| before[w.0].value.data()[0]);
                let mut dp = vec![0.0; outer * len * inner];
                let mut dw = 0.0;
                {
                    let pv = before[p.0].value.data();
                    for o in 0..outer {
                        let gs = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let ps = &pv[o * len * inner..(o + 1) * len * inner];
                        let ds = &mut dp[o * len * inner..(o + 1) * len * inner];
                        for ((d, &gv), &pv) in ds.iter_mut().zip(gs).zip(ps) {
                            *d = scale * gv;
                            dw += gv * pv;
                        }
                    }
                }
                add_into(&mut before[p.0], dp.into_iter());
                if let Some(w) = w {
                    add_into(&mut before[w.0], std::iter::once(dw));
                }
                offset += len;
            }
        }
        Op::Reshape(a) => add_into(&mut before[a.0], g.iter().copied()),
        Op::GatherRows { input, rows } => {
            let row_len = g.len() / rows.len();
            accumulate(&mut before[input.0], |gi| {
                for (k, &r) in rows.iter().enumerate() {
                    for (d, &s) in gi[r * row_len..(r + 1) * row_len].iter_mut().zip(&g[k * row_len..(k + 1) * row_len]) {
                        *d += s;
                    }
                }
            });
        }
        Op::GroupMean { input, groups } => {
            let row_len = g.len() / groups.len();
            accumulate(&mut before[input.0], |gi| {
                for (k, &(s, e)) in groups.iter().enumerate() {
                    let inv = (e - s) as f64;
                    for r in s..e {
                        for (d, &gv) in gi[r * row_len..(r + 1) * row_len].iter_mut().zip(&g[k * row_len..(k + 1) * row_len]) {
                            *d += gv / inv;
                        }
                    }
                }
            });
        }
        Op::GlobalAvgPool(a) => {
            let s = before[a.0].value.shape().to_vec();
            let plane = s[2] * s[3];
            add_into(&mut before[a.0], g.iter().flat_map(|&gv| std::iter::repeat_n(gv / plane as f64, plane)));
        }
        Op::RoiAlign { input, taps } => {
            let s = before[input.0].value.shape().to_vec();
            let (channels, plane) = (s[0], s[1] * s[2]);
            let cells = node.value.shape()[2] * node.value.shape()[3];
            accumulate(&mut before[input.0], |gi| {
                for (bi, chunk) in taps.chunks(cells).enumerate() {
                    for c in 0..channels {
                        let fmap = &mut gi[c * plane..(c + 1) * plane];
                        for (k, cell) in chunk.iter().enumerate() {
                            let gv = g[(bi * channels + c) * cells + k];
                            for &(i, wt) in cell {
                                fmap[i] += wt * gv;
                            }
                        }
                    }
                }
            });
        }
        Op::Sum(a) => {
            let n = before[a.0].value.numel();
            add_into(&mut before[a.0], std::iter::repeat_n(g[0], n));
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let rows = targets.len();
            let classes = probs.len() / rows;
            let scale = g[0] / rows as f64;
            accumulate(&mut before[logits.0], |gl| {
                for (r, &t) in targets.iter().enumerate() {
                    for k in 0..classes {
                        let onehot = if k == t { 1.0 } else { 0.0 };
                        gl[r * classes + k] += scale * (probs[r * classes + k] - onehot);
                    }
                }
            });
        }
        Op::BceWithLogits { logits, picks } => {
            if picks.is_empty() {
                accumulate(&mut before[logits.0], |_| {});
                return;
            }
            let scale = g[0] / picks.len() as f64;
            let values = before[logits.0].value.data().to_vec();
            accumulate(&mut before[logits.0], |gl| {
                for &(i, y) in picks {
                    gl[i] += scale * (sigmoid(values[i]) - y);
                }
            });
        }
        Op::SmoothL1 { input, picks, targets, beta, norm } => {
            let d = targets.shape()[1];
            let values = before[input.0].value.data().to_vec();
            let scale = g[0] / norm;
            accumulate(&mut before[input.0], |gi| {
                for &(r, t) in picks {
                    for k in 0..d {
                        let diff = values[r * d + k] - targets.data()[t * d + k];
                        gi[r * d + k] += scale * smooth_l1_grad(diff, *beta);
                    }
                }
            });
        }
    }
}
