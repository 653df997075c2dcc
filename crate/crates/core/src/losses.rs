//! Detection losses, the per-task meta losses and their sum.

use rand::seq::SliceRandom;

use crate::episodes::SceneObject;
use crate::fusion::{PairPredictions, ROI_CODER};
use crate::geometry::{self, BBox};
use crate::params::{Bound, Linear, ParamStore};
use crate::perception::{AnchorLabel, AnchorTarget, RpnOutput};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const RPN_BATCH: usize = 32;
pub const RPN_MAX_POSITIVE: usize = RPN_BATCH / 4;
pub const ROI_POSITIVE_IOU: f64 = 0.5;
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Anchors contributing to the proposal losses: `(anchor index, is positive)`.
pub fn sample_anchors(targets: &[AnchorTarget], rng: &mut Rng) -> Vec<(usize, bool)> {
    let mut pos: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].label == AnchorLabel::Positive).collect();
    let mut neg: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].label == AnchorLabel::Negative).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(RPN_MAX_POSITIVE);
    neg.truncate(RPN_BATCH - pos.len());
    let mut out: Vec<(usize, bool)> = pos.into_iter().map(|i| (i, true)).chain(neg.into_iter().map(|i| (i, false))).collect();
    out.sort_unstable();
    out
}

/// Target of one RoI: `class_index` is a position in the episode's class
/// list, or `m` for background.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiTarget {
    pub class_index: usize,
    pub deltas: [f64; 4],
}

/// Matches each proposal to the highest-IoU object whose class is in
/// `class_list`; IoU >= 0.5 makes it positive for that class.
pub fn assign_roi_targets(proposals: &[BBox], objects: &[SceneObject], class_list: &[usize]) -> Vec<RoiTarget> {
    let m = class_list.len();
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(f64, usize, &SceneObject)> = None;
            for o in objects {
                let Some(j) = class_list.iter().position(|&c| c == o.class_id) else { continue };
                let v = geometry::iou_unchecked(p, &o.bbox);
                if best.is_none_or(|b| v > b.0) {
                    best = Some((v, j, o));
                }
            }
            match best {
                Some((v, j, o)) if v >= ROI_POSITIVE_IOU => RoiTarget { class_index: j, deltas: ROI_CODER.encode(&o.bbox, p) },
                _ => RoiTarget { class_index: m, deltas: [0.0; 4] },
            }
        })
        .collect()
}

/// The four detector loss terms.
#[derive(Clone, Copy, Debug)]
pub struct DetectorLosses {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub rcnn_cls: Var,
    pub rcnn_reg: Var,
}

/// Regression picks and target rows; an empty selection gets one dummy row.
fn regression_rows(rows: Vec<(usize, [f64; 4])>) -> (Vec<(usize, usize)>, Tensor, f64) {
    let count = rows.len();
    let picks = rows.iter().enumerate().map(|(t, &(r, _))| (r, t)).collect();
    let data: Vec<f64> = if count == 0 { vec![0.0; 4] } else { rows.iter().flat_map(|(_, d)| *d).collect() };
    let targets = Tensor::new(vec![count.max(1), 4], data).expect("rows of four");
    (picks, targets, count.max(1) as f64)
}

pub fn faster_rcnn_loss(
    g: &mut Graph,
    rpn: &RpnOutput,
    anchor_targets: &[AnchorTarget],
    sampled: &[(usize, bool)],
    preds: &PairPredictions,
    roi_targets: &[RoiTarget],
) -> Result<DetectorLosses, TensorError> {
    let picks: Vec<(usize, f64)> = sampled.iter().map(|&(i, pos)| (i, if pos { 1.0 } else { 0.0 })).collect();
    let rpn_cls = g.bce_with_logits(rpn.logits, &picks)?;
    let rows = sampled.iter().filter(|s| s.1).map(|&(i, _)| (i, anchor_targets[i].deltas)).collect();
    let (picks, targets, norm) = regression_rows(rows);
    let rpn_reg = g.smooth_l1(rpn.deltas, &picks, targets, SMOOTH_L1_BETA, norm)?;

    let m = g.shape(preds.cls_logits)[1] - 1;
    let classes: Vec<usize> = roi_targets.iter().map(|t| t.class_index).collect();
    let rcnn_cls = g.cross_entropy(preds.cls_logits, &classes)?;
    let rows = roi_targets
        .iter()
        .enumerate()
        .filter(|(_, t)| t.class_index < m)
        .map(|(i, t)| (i * m + t.class_index, t.deltas))
        .collect();
    let (picks, targets, norm) = regression_rows(rows);
    let rcnn_reg = g.smooth_l1(preds.deltas, &picks, targets, SMOOTH_L1_BETA, norm)?;
    Ok(DetectorLosses { rpn_cls, rpn_reg, rcnn_cls, rcnn_reg })
}

/// Linear classifier from a class-attentive vector to all class ids.
#[derive(Clone, Debug)]
pub struct MetaClassifier {
    pub linear: Linear,
    pub num_classes: usize,
}

impl MetaClassifier {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, num_classes: usize, rng: &mut Rng) -> Self {
        Self { linear: Linear::new(store, name, dim, num_classes, Some(0.01), rng), num_classes }
    }
}

/// Mean cross-entropy of `vectors[rows, d]` classified against `class_ids`.
pub fn meta_loss(
    g: &mut Graph,
    p: &Bound,
    classifier: &MetaClassifier,
    vectors: Var,
    class_ids: &[usize],
) -> Result<Var, TensorError> {
    if let Some(&bad) = class_ids.iter().find(|&&c| c >= classifier.num_classes) {
        return Err(TensorError::InvalidArgument {
            op: "meta_loss",
            msg: format!("unknown class id {bad} (world has {} classes)", classifier.num_classes),
        });
    }
    let logits = classifier.linear.forward(g, p, vectors)?;
    g.cross_entropy(logits, class_ids)
}

pub const COMPONENTS: [&str; 7] = ["rpn_cls", "rpn_reg", "rcnn_cls", "rcnn_reg", "meta_cls", "meta_reg", "total"];

/// Loss components of one step. Disabled meta losses are `None` and count as zero.
#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub rcnn_cls: Var,
    pub rcnn_reg: Var,
    pub meta_cls: Option<Var>,
    pub meta_reg: Option<Var>,
    pub total: Var,
}

impl LossReport {
    /// Values in [`COMPONENTS`] order.
    pub fn values(&self, g: &Graph) -> [f64; 7] {
        let v = |x: Var| g.value(x).data()[0];
        let o = |x: Option<Var>| x.map_or(0.0, v);
        [
            v(self.rpn_cls),
            v(self.rpn_reg),
            v(self.rcnn_cls),
            v(self.rcnn_reg),
            o(self.meta_cls),
            o(self.meta_reg),
            v(self.total),
        ]
    }
}

/// Plain sum of all enabled components.
pub fn total_loss(
    g: &mut Graph,
    det: DetectorLosses,
    meta_cls: Option<Var>,
    meta_reg: Option<Var>,
) -> Result<LossReport, TensorError> {
    let mut total = g.add(det.rpn_cls, det.rpn_reg)?;
    total = g.add(total, det.rcnn_cls)?;
    total = g.add(total, det.rcnn_reg)?;
    for extra in [meta_cls, meta_reg].into_iter().flatten() {
        total = g.add(total, extra)?;
    }
    Ok(LossReport {
        rpn_cls: det.rpn_cls,
        rpn_reg: det.rpn_reg,
        rcnn_cls: det.rcnn_cls,
        rcnn_reg: det.rcnn_reg,
        meta_cls,
        meta_reg,
        total,
    })
}
