//! Shared backbone, single-scale region proposals and RoIAlign.

use std::cmp::Ordering;

use crate::geometry::{self, BBox, BoxCoder};
use crate::params::{Bound, Conv, ParamStore};
use crate::rng::Rng;
use crate::tensor::{sigmoid, Graph, Tensor, TensorError, Var};

/// Input channels of the backbone: RGB plus the support mask channel.
pub const INPUT_CHANNELS: usize = 4;
pub const BACKBONE_CHANNELS: [usize; 5] = [INPUT_CHANNELS, 16, 32, 64, 64];
pub const FEATURE_CHANNELS: usize = 64;
/// Pixels per feature cell.
pub const FEATURE_STRIDE: usize = 8;
/// Anchor side in units of the feature stride.
pub const ANCHOR_SCALE: usize = 4;

pub const RPN_POSITIVE_IOU: f64 = 0.6;
pub const RPN_NEGATIVE_IOU: f64 = 0.3;

/// Feature map of one image: `[C_f, H_f, W_f]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub tensor: Var,
    pub stride: usize,
}

/// Four 3x3 convolutions with ReLU; the first three halve the resolution.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub layers: Vec<Conv>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut Rng) -> Self {
        let layers = (0..4)
            .map(|i| {
                let stride = if i < 3 { 2 } else { 1 };
                Conv::new(
                    store,
                    &format!("backbone.conv{}", i + 1),
                    BACKBONE_CHANNELS[i],
                    BACKBONE_CHANNELS[i + 1],
                    3,
                    stride,
                    1,
                    None,
                    rng,
                )
            })
            .collect();
        Self { layers }
    }

    /// `[N, 4, H, W] -> [N, 64, ceil(H/8), ceil(W/8)]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, images: Var) -> Result<Var, TensorError> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != INPUT_CHANNELS {
            return Err(TensorError::InvalidArgument {
                op: "backbone",
                msg: format!("expected [N, {INPUT_CHANNELS}, H, W] input, got {shape:?}"),
            });
        }
        let mut x = images;
        for layer in &self.layers {
            x = layer.forward(g, p, x)?;
            x = g.relu(x)?;
        }
        Ok(x)
    }

    /// Runs one image and drops the batch axis.
    pub fn forward_single(&self, g: &mut Graph, p: &Bound, image: &Tensor) -> Result<FeatureMap, TensorError> {
        let s = image.shape().to_vec();
        let x = g.constant(image.clone().reshape(vec![1, s[0], s[1], s[2]])?);
        let f = self.forward(g, p, x)?;
        let fs = g.shape(f).to_vec();
        let tensor = g.reshape(f, &fs[1..])?;
        Ok(FeatureMap { tensor, stride: FEATURE_STRIDE })
    }
}

/// Zero-pads a `[3, H, W]` query image with an empty mask channel.
pub fn query_input(image: &Tensor) -> Tensor {
    let mut data = image.data().to_vec();
    let plane = image.shape()[1] * image.shape()[2];
    data.extend(std::iter::repeat_n(0.0, plane));
    Tensor::new(vec![INPUT_CHANNELS, image.shape()[1], image.shape()[2]], data).expect("consistent shape")
}

/// Box coder of the proposal stage.
pub const RPN_CODER: BoxCoder = BoxCoder::UNIT;

/// One square anchor of side `ANCHOR_SCALE * stride` per feature cell, row-major.
pub fn anchors(feat_h: usize, feat_w: usize, stride: usize) -> Vec<BBox> {
    let half = (ANCHOR_SCALE * stride) as f64 / 2.0;
    let mut out = Vec::with_capacity(feat_h * feat_w);
    for y in 0..feat_h {
        for x in 0..feat_w {
            let cx = (x as f64 + 0.5) * stride as f64;
            let cy = (y as f64 + 0.5) * stride as f64;
            out.push([cx - half, cy - half, cx + half, cy + half]);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Rpn {
    pub conv: Conv,
    pub objectness: Conv,
    pub deltas: Conv,
}

#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    /// `[H_f * W_f]` objectness logits, one per anchor.
    pub logits: Var,
    /// `[H_f * W_f, 4]` box deltas, one row per anchor.
    pub deltas: Var,
}

impl Rpn {
    pub fn new(store: &mut ParamStore, rng: &mut Rng) -> Self {
        let conv = Conv::new(store, "rpn.conv", FEATURE_CHANNELS, FEATURE_CHANNELS, 3, 1, 1, None, rng);
        let objectness = Conv::new(store, "rpn.objectness", FEATURE_CHANNELS, 1, 1, 1, 0, Some(0.01), rng);
        let deltas = Conv::new(store, "rpn.deltas", FEATURE_CHANNELS, 4, 1, 1, 0, Some(0.01), rng);
        Self { conv, objectness, deltas }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, features: &FeatureMap) -> Result<RpnOutput, TensorError> {
        let fs = g.shape(features.tensor).to_vec();
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let x = g.reshape(features.tensor, &[1, c, h, w])?;
        let x = self.conv.forward(g, p, x)?;
        let x = g.relu(x)?;
        let obj = self.objectness.forward(g, p, x)?;
        let logits = g.reshape(obj, &[h * w])?;
        // [1, 4, H, W] -> [H*W, 4]
        let d = self.deltas.forward(g, p, x)?;
        let d = g.reshape(d, &[4, h * w])?;
        let rows: Vec<usize> = (0..4).collect();
        let d = transpose_rows(g, d, &rows, h * w)?;
        Ok(RpnOutput { logits, deltas: d })
    }
}

/// `[R, C] -> [C, R]` built from differentiable primitives.
fn transpose_rows(g: &mut Graph, x: Var, rows: &[usize], cols: usize) -> Result<Var, TensorError> {
    let r = rows.len();
    let flat = g.reshape(x, &[r * cols, 1])?;
    let order: Vec<usize> = (0..cols).flat_map(|c| rows.iter().map(move |&row| row * cols + c)).collect();
    let picked = g.gather_rows(flat, &order)?;
    g.reshape(picked, &[cols, r])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<BBox>,
    pub objectness: Vec<f64>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Decodes all anchors, clips them to the image, keeps the `top_n` most
/// object-like, and (when `gt_boxes` is given) appends the ground truth.
pub fn rpn_propose(
    logits: &Tensor,
    deltas: &Tensor,
    anchors: &[BBox],
    image_size: (usize, usize),
    top_n: usize,
    gt_boxes: Option<&[BBox]>,
) -> Result<ProposalSet, TensorError> {
    if top_n == 0 {
        return Err(TensorError::InvalidArgument { op: "rpn_propose", msg: "top_n must be at least 1".into() });
    }
    if logits.numel() != anchors.len() || deltas.numel() != 4 * anchors.len() {
        return Err(TensorError::ShapeMismatch {
            op: "rpn_propose",
            left: logits.shape().to_vec(),
            right: deltas.shape().to_vec(),
        });
    }
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let mut candidates: Vec<(usize, f64, BBox)> = anchors
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let b = geometry::clip(&RPN_CODER.decode(&deltas.data()[4 * i..4 * i + 4], a), w, h);
            (b[2] - b[0] >= 1.0 && b[3] - b[1] >= 1.0).then(|| (i, sigmoid(logits.data()[i]), b))
        })
        .collect();
    candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    candidates.truncate(top_n);
    let mut set = ProposalSet {
        boxes: candidates.iter().map(|c| c.2).collect(),
        objectness: candidates.iter().map(|c| c.1).collect(),
    };
    if let Some(gt) = gt_boxes {
        for b in gt {
            set.boxes.push(geometry::clip(b, w, h));
            set.objectness.push(1.0);
        }
    }
    Ok(set)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorTarget {
    pub label: AnchorLabel,
    /// Regression target toward the matched ground truth (zeros unless positive).
    pub deltas: [f64; 4],
}

/// Labels anchors: positive at IoU >= 0.6 with some box or when the anchor is
/// a box's best match, negative when the best IoU is <= 0.3, ignored otherwise.
pub fn assign_rpn_targets(anchors: &[BBox], gt_boxes: &[BBox]) -> Vec<AnchorTarget> {
    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gt_boxes.iter().map(|g| geometry::iou_unchecked(a, g)).collect())
        .collect();
    let best_per_gt: Vec<f64> = (0..gt_boxes.len())
        .map(|j| ious.iter().map(|row| row[j]).fold(0.0, f64::max))
        .collect();
    anchors
        .iter()
        .zip(&ious)
        .map(|(a, row)| {
            let (best_j, best) = row
                .iter()
                .enumerate()
                .fold((None, 0.0), |acc, (j, &v)| if acc.0.is_none() || v > acc.1 { (Some(j), v) } else { acc });
            let best_match = (0..gt_boxes.len()).find(|&j| best_per_gt[j] > 0.0 && row[j] == best_per_gt[j]);
            let matched = if best >= RPN_POSITIVE_IOU { best_j } else { best_match };
            match matched {
                Some(j) => AnchorTarget { label: AnchorLabel::Positive, deltas: RPN_CODER.encode(&gt_boxes[j], a) },
                None if best <= RPN_NEGATIVE_IOU => AnchorTarget { label: AnchorLabel::Negative, deltas: [0.0; 4] },
                None => AnchorTarget { label: AnchorLabel::Ignore, deltas: [0.0; 4] },
            }
        })
        .collect()
}

/// RoIAlign of pixel-space boxes over a feature map: `[n, C, pool, pool]`.
pub fn roi_align(g: &mut Graph, features: &FeatureMap, boxes: &[BBox], pool: usize) -> Result<Var, TensorError> {
    let s = features.stride as f64;
    let scaled: Vec<[f64; 4]> = boxes.iter().map(|b| b.map(|v| v / s)).collect();
    g.roi_align(features.tensor, &scaled, pool)
}
