//! Non-maximum suppression, AP50 and the evaluation protocol.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::episodes::{gen_scene, ClassSplit, Scene, SupportPool, WorldConfig};
use crate::geometry::{iou_unchecked, BBox};
use crate::model::AfdNet;
use crate::rng;
use crate::tensor::TensorError;

pub use crate::geometry::iou;

/// Offset mixed into the master seed for evaluation scenes.
pub const EVAL_SEED_MASK: u64 = 0x5EED;
pub const SCORE_THRESH: f64 = 0.05;
pub const NMS_IOU: f64 = 0.5;
pub const AP_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    /// Index of the scene the detection belongs to.
    pub scene: usize,
    pub class_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Score descending, then box coordinates ascending.
fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| {
        a.bbox
            .iter()
            .zip(&b.bbox)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Greedy per-(scene, class) suppression of boxes overlapping a kept,
/// better-ranked box by IoU above `iou_thresh`. Output is ordered by scene,
/// class, then rank.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| a.scene.cmp(&b.scene).then(a.class_id.cmp(&b.class_id)).then_with(|| rank_order(a, b)));
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    let mut group_start = 0;
    for d in sorted {
        if kept.get(group_start).is_some_and(|k| (k.scene, k.class_id) != (d.scene, d.class_id)) {
            group_start = kept.len();
        }
        if kept[group_start..].iter().all(|k| iou_unchecked(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Precision/recall steps of ranked detections of one class.
///
/// Detections are ranked by score (ties keep input order). Each is a true
/// positive when some not-yet-matched ground-truth box of the class in the
/// same scene has IoU >= `iou_thresh`; the highest-IoU such box is consumed.
fn match_ranked(dets: &[Detection], gt: &[Scene], class_id: usize, iou_thresh: f64) -> (Vec<bool>, usize) {
    let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class_id).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut used: Vec<Vec<bool>> = gt.iter().map(|s| vec![false; s.objects.len()]).collect();
    let total = gt.iter().flat_map(|s| &s.objects).filter(|o| o.class_id == class_id).count();
    let flags = ranked
        .iter()
        .map(|d| {
            let Some(scene) = gt.get(d.scene) else { return false };
            let mut best: Option<(usize, f64)> = None;
            for (k, o) in scene.objects.iter().enumerate() {
                if o.class_id != class_id || used[d.scene][k] {
                    continue;
                }
                let v = iou_unchecked(&d.bbox, &o.bbox);
                if v >= iou_thresh && best.is_none_or(|b| v > b.1) {
                    best = Some((k, v));
                }
            }
            match best {
                Some((k, _)) => {
                    used[d.scene][k] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (flags, total)
}

/// All-point interpolated average precision of `class_id`. `None` when the
/// class has no ground-truth instance.
pub fn average_precision(dets: &[Detection], gt: &[Scene], class_id: usize, iou_thresh: f64) -> Option<f64> {
    let (flags, total) = match_ranked(dets, gt, class_id, iou_thresh);
    if total == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(flags.len());
    for (rank, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / total as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut envelope = vec![0.0; points.len()];
    let mut best: f64 = 0.0;
    for k in (0..points.len()).rev() {
        best = best.max(points[k].1);
        envelope[k] = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(recall, _)) in points.iter().enumerate() {
        ap += (recall - prev_recall) * envelope[k];
        prev_recall = recall;
    }
    Some(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Base,
    Novel,
    All,
}

impl Subset {
    pub fn classes(self, split: &ClassSplit) -> Vec<usize> {
        match self {
            Subset::Base => split.base.clone(),
            Subset::Novel => split.novel.clone(),
            Subset::All => split.all(),
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::Base => "base",
            Subset::Novel => "novel",
            Subset::All => "all",
        })
    }
}

impl FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "base" => Ok(Subset::Base),
            "novel" => Ok(Subset::Novel),
            "all" => Ok(Subset::All),
            other => Err(format!("unknown subset {other:?} (expected base, novel or all)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub num_scenes: usize,
    pub repeats: usize,
    pub score_thresh: f64,
    pub nms_iou: f64,
    /// Draw scene objects from every class rather than only the evaluated
    /// subset's. Objects of classes the model never trained on then count
    /// against it whenever it mistakes them for an evaluated class.
    pub mixed_scenes: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { num_scenes: 50, repeats: 10, score_thresh: SCORE_THRESH, nms_iou: NMS_IOU, mixed_scenes: false }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_scenes == 0 || self.repeats == 0 {
            return Err("eval.num_scenes and eval.repeats must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.score_thresh) {
            return Err(format!("eval.score_thresh must be in [0, 1), got {}", self.score_thresh));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(format!("eval.nms_iou must be in (0, 1), got {}", self.nms_iou));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAp {
    pub class_id: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub subset: Subset,
    pub per_class: Vec<ClassAp>,
    pub map_mean: f64,
    pub map_std: f64,
    /// mAP of each repeat.
    pub runs: Vec<f64>,
}

pub const EVAL_CSV_HEADER: &str = "subset,class_id,ap50_mean,ap50_std,map_mean,map_std";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{EVAL_CSV_HEADER}\n");
        for c in &self.per_class {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                self.subset, c.class_id, c.mean, c.std, self.map_mean, self.map_std
            ));
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<8} {:>6} {:>10} {:>10}\n", "subset", "class", "AP50", "std");
        for c in &self.per_class {
            out.push_str(&format!("{:<8} {:>6} {:>10.4} {:>10.4}\n", self.subset, c.class_id, c.mean, c.std));
        }
        out.push_str(&format!(
            "mAP50 {:.4} +/- {:.4} over {} repeats\n",
            self.map_mean,
            self.map_std,
            self.runs.len()
        ));
        out
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Held-out scenes of one evaluation repeat.
pub fn eval_scenes(master_seed: u64, repeat: usize, classes: &[usize], count: usize, world: &WorldConfig) -> Vec<Scene> {
    let seed = (master_seed ^ EVAL_SEED_MASK).wrapping_add(repeat as u64);
    (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, "eval-scene", i as u64);
            gen_scene(&mut r, classes, world.max_objects, world.scene_size).expect("validated world config")
        })
        .collect()
}

/// Detections of `model` over `scenes`, all classes of `classes` at once,
/// after thresholding and NMS.
pub fn detect_scenes(
    model: &AfdNet,
    scenes: &[Scene],
    classes: &[usize],
    pool: &SupportPool,
    cfg: &EvalConfig,
) -> Result<Vec<Detection>, TensorError> {
    let support: Vec<_> = classes
        .iter()
        .map(|c| {
            pool.images.get(c).cloned().ok_or_else(|| TensorError::InvalidArgument {
                op: "evaluate",
                msg: format!("support pool has no images of class {c}"),
            })
        })
        .collect::<Result<_, _>>()?;
    let attention = model.encode_support(&support)?;
    let mut all = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let mut dets = model.detect(scene, classes, &attention, cfg.score_thresh)?;
        for d in &mut dets {
            d.scene = i;
        }
        all.extend(nms(&dets, cfg.nms_iou));
    }
    Ok(all)
}

/// AP50 of each class of `subset` over `repeats` fresh sets of held-out
/// scenes. Scenes hold objects of the subset's classes (of every class with
/// `mixed_scenes`); the model detects all classes at once, with the support
/// images of `pool`.
pub fn evaluate(
    model: &AfdNet,
    split: &ClassSplit,
    world: &WorldConfig,
    pool: &SupportPool,
    subset: Subset,
    cfg: &EvalConfig,
    master_seed: u64,
) -> Result<EvalReport, TensorError> {
    let classes = subset.classes(split);
    let all = split.all();
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); classes.len()];
    let mut runs = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let scene_classes = if cfg.mixed_scenes { &all } else { &classes };
        let scenes = eval_scenes(master_seed, r, scene_classes, cfg.num_scenes, world);
        let dets = detect_scenes(model, &scenes, &all, pool, cfg)?;
        let mut aps = Vec::new();
        for (k, &c) in classes.iter().enumerate() {
            match average_precision(&dets, &scenes, c, AP_IOU) {
                Some(ap) => {
                    per_class[k].push(ap);
                    aps.push(ap);
                }
                None => log::warn!("class {c} has no ground truth in repeat {r}; excluded from mAP"),
            }
        }
        runs.push(if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 });
    }
    let per_class = classes
        .iter()
        .zip(&per_class)
        .filter(|(_, v)| !v.is_empty())
        .map(|(&class_id, v)| {
            let (mean, std) = mean_std(v);
            ClassAp { class_id, mean, std }
        })
        .collect();
    let (map_mean, map_std) = mean_std(&runs);
    Ok(EvalReport { subset, per_class, map_mean, map_std, runs })
}
