//! Pairwise aggregation of RoI and class vectors, and the two decision heads.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dualheads::{Task, TaskVectors};
use crate::eval::Detection;
use crate::geometry::{self, BBox, BoxCoder};
use crate::params::{Bound, Linear, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const HEAD_HIDDEN: usize = 128;
/// Box coder of the detection head.
pub const ROI_CODER: BoxCoder = BoxCoder::RCNN;

/// How pair logits become class scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scoring {
    /// Softmax over the m pair logits plus a learned background logit.
    #[default]
    Softmax,
    /// Independent per-pair sigmoids. Accepted by the parser, rejected by validation.
    Binary,
}

/// Pair features of both tasks: row `k = i * m + j` holds RoI `i` against class `j`.
#[derive(Clone, Copy, Debug)]
pub struct Aggregated {
    /// `[n*m, 3*d_cls]`
    pub cls: Var,
    /// `[n*m, 3*d_reg]`
    pub reg: Var,
    pub n: usize,
    pub m: usize,
}

impl Aggregated {
    pub fn get(&self, task: Task) -> Var {
        match task {
            Task::Cls => self.cls,
            Task::Reg => self.reg,
        }
    }
}

fn aggregate_task(g: &mut Graph, r: Var, a: Var) -> Result<(Var, usize, usize), TensorError> {
    let (rs, as_) = (g.shape(r).to_vec(), g.shape(a).to_vec());
    if rs.len() != 2 || as_.len() != 2 || rs[1] != as_[1] {
        return Err(TensorError::ShapeMismatch { op: "aggregate", left: rs, right: as_ });
    }
    let (n, m) = (rs[0], as_[0]);
    let ri: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, m)).collect();
    let aj: Vec<usize> = (0..n).flat_map(|_| 0..m).collect();
    let r = g.gather_rows(r, &ri)?;
    let a = g.gather_rows(a, &aj)?;
    let prod = g.mul(r, a)?;
    let diff = g.sub(r, a)?;
    Ok((g.concat(&[prod, diff, r], 1)?, n, m))
}

/// `f = [r ⊙ a, r - a, r]` for every RoI/class pair of each task.
pub fn aggregate(g: &mut Graph, rois: &TaskVectors, attentive: &TaskVectors) -> Result<Aggregated, TensorError> {
    let (cls, n, m) = aggregate_task(g, rois.cls, attentive.cls)?;
    let (reg, n2, m2) = aggregate_task(g, rois.reg, attentive.reg)?;
    if (n, m) != (n2, m2) {
        return Err(TensorError::ShapeMismatch { op: "aggregate", left: vec![n, m], right: vec![n2, m2] });
    }
    Ok(Aggregated { cls, reg, n, m })
}

/// Head outputs for one query.
#[derive(Clone, Copy, Debug)]
pub struct PairPredictions {
    /// `[n, m+1]`: pair logits of each RoI followed by the background logit.
    pub cls_logits: Var,
    /// `[n*m, 4]` box deltas, row `i * m + j`.
    pub deltas: Var,
}

#[derive(Clone, Debug)]
pub struct DetectHeads {
    pub cls_hidden: Linear,
    pub cls_out: Linear,
    pub reg_hidden: Linear,
    pub reg_out: Linear,
    pub background: ParamId,
}

impl DetectHeads {
    pub fn new(store: &mut ParamStore, d_cls: usize, d_reg: usize, rng: &mut Rng) -> Self {
        Self {
            cls_hidden: Linear::new(store, "head.cls.fc1", 3 * d_cls, HEAD_HIDDEN, None, rng),
            cls_out: Linear::new(store, "head.cls.fc2", HEAD_HIDDEN, 1, Some(0.01), rng),
            reg_hidden: Linear::new(store, "head.reg.fc1", 3 * d_reg, HEAD_HIDDEN, None, rng),
            reg_out: Linear::new(store, "head.reg.fc2", HEAD_HIDDEN, 4, Some(0.001), rng),
            background: store.add("head.background_logit", Tensor::zeros(&[1, 1])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, f: &Aggregated) -> Result<PairPredictions, TensorError> {
        let h = self.cls_hidden.forward(g, p, f.cls)?;
        let h = g.relu(h)?;
        let logits = self.cls_out.forward(g, p, h)?;
        let logits = g.reshape(logits, &[f.n, f.m])?;
        let bg = g.gather_rows(p[self.background], &vec![0; f.n])?;
        let cls_logits = g.concat(&[logits, bg], 1)?;

        let h = self.reg_hidden.forward(g, p, f.reg)?;
        let h = g.relu(h)?;
        let deltas = self.reg_out.forward(g, p, h)?;
        Ok(PairPredictions { cls_logits, deltas })
    }
}

/// Softmax of each row of `[n, C]` logits.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Turns head outputs into detections: per RoI, the arg-max of the
/// `(m+1)`-way softmax wins; background winners and scores below
/// `score_thresh` are dropped; survivors are decoded with their class's deltas.
pub fn decode_detections(
    cls_logits: &Tensor,
    deltas: &Tensor,
    proposals: &[BBox],
    class_list: &[usize],
    image_size: (usize, usize),
    score_thresh: f64,
) -> Result<Vec<Detection>, TensorError> {
    let m = class_list.len();
    let n = proposals.len();
    if cls_logits.shape() != [n, m + 1] || deltas.shape() != [n * m, 4] {
        return Err(TensorError::ShapeMismatch {
            op: "decode_detections",
            left: cls_logits.shape().to_vec(),
            right: deltas.shape().to_vec(),
        });
    }
    if !(0.0..1.0).contains(&score_thresh) {
        return Err(TensorError::InvalidArgument {
            op: "decode_detections",
            msg: format!("score threshold {score_thresh} outside [0, 1)"),
        });
    }
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let mut out = Vec::new();
    for (i, probs) in softmax_rows(cls_logits).into_iter().enumerate() {
        // first maximum wins ties
        let (j, &score) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(Ordering::Equal).then(b.0.cmp(&a.0)))
            .expect("m + 1 >= 1 scores");
        if j == m || score < score_thresh {
            continue;
        }
        let row = &deltas.data()[4 * (i * m + j)..4 * (i * m + j + 1)];
        let bbox = geometry::clip(&ROI_CODER.decode(row, &proposals[i]), w, h);
        if geometry::is_valid(&bbox) {
            out.push(Detection { scene: 0, class_id: class_list[j], bbox, score });
        }
    }
    Ok(out)
}
