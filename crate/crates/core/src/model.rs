//! The assembled detector: backbone, proposals, dual encoders, aggregation,
//! heads and meta classifiers over one parameter store.

use serde::{Deserialize, Serialize};

use crate::dualheads::{dag_encode, DualEncoder, FusionPaths, FusionWeights, Task, LAMBDA_NAMES};
use crate::episodes::{Episode, Scene, SupportImage, WorldConfig};
use crate::eval::Detection;
use crate::fusion::{aggregate, decode_detections, DetectHeads, PairPredictions, Scoring};
use crate::geometry::BBox;
use crate::losses::{
    assign_roi_targets, faster_rcnn_loss, meta_loss, sample_anchors, total_loss, LossReport, MetaClassifier, RoiTarget,
};
use crate::params::{Bound, ParamStore};
use crate::perception::{
    anchors, assign_rpn_targets, query_input, roi_align, rpn_propose, AnchorTarget, Backbone, FeatureMap, Rpn,
    FEATURE_STRIDE,
};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// RoIAlign output side.
    pub pool: usize,
    pub paths: FusionPaths,
    pub meta_cls: bool,
    pub meta_reg: bool,
    /// Apply the meta losses to class-averaged vectors instead of per-support ones.
    pub meta_on_class_mean: bool,
    /// Keep all four fusion weights at their initial value.
    pub fixed_lambdas: bool,
    pub scoring: Scoring,
    /// Proposals kept per query while training (ground truth is added on top).
    pub train_top_n: usize,
    /// Proposals kept per query at inference.
    pub eval_top_n: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pool: 4,
            paths: FusionPaths::default(),
            meta_cls: true,
            meta_reg: true,
            meta_on_class_mean: false,
            fixed_lambdas: false,
            scoring: Scoring::Softmax,
            train_top_n: 16,
            eval_top_n: 20,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, world: &WorldConfig) -> Result<(), String> {
        if self.pool == 0 {
            return Err("model.pool must be at least 1".into());
        }
        self.paths.validate().map_err(|e| format!("model.{e}"))?;
        if self.scoring != Scoring::Softmax {
            return Err("model.scoring: only \"softmax\" is implemented".into());
        }
        if self.train_top_n == 0 || self.eval_top_n == 0 {
            return Err("model.train_top_n and model.eval_top_n must be at least 1".into());
        }
        let side = self.pool * FEATURE_STRIDE;
        if world.support_size != (side, side) {
            return Err(format!(
                "world.support_size must be ({side}, {side}) so support feature maps match the RoI pool size, got {:?}",
                world.support_size
            ));
        }
        let (h, w) = world.scene_size;
        if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
            return Err(format!("world.scene_size must be multiples of {FEATURE_STRIDE}, got {:?}", world.scene_size));
        }
        Ok(())
    }
}

/// Detached decisions of a training step: which proposals, anchors and
/// targets the losses use.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub proposals: Vec<BBox>,
    pub anchor_targets: Vec<AnchorTarget>,
    pub sampled_anchors: Vec<(usize, bool)>,
    pub roi_targets: Vec<RoiTarget>,
}

/// Graph handles produced by one training forward pass.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub report: LossReport,
    pub plan: StepPlan,
    pub preds: PairPredictions,
}

#[derive(Clone, Debug)]
pub struct AfdNet {
    pub config: ModelConfig,
    pub num_classes: usize,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub rpn: Rpn,
    pub fusion: FusionWeights,
    pub dqe: DualEncoder,
    pub dag: DualEncoder,
    pub heads: DetectHeads,
    pub meta_cls: Option<MetaClassifier>,
    pub meta_reg: Option<MetaClassifier>,
}

impl AfdNet {
    pub fn new(config: &ModelConfig, world: &WorldConfig, seed: u64) -> Result<Self, String> {
        config.validate(world)?;
        let mut rng = rng::stream(seed, "init", 0);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, rng);
        let rpn = Rpn::new(&mut store, rng);
        let fusion = FusionWeights::new(&mut store);
        let dqe = DualEncoder::new(&mut store, "dqe", &config.paths, config.pool, rng);
        let dag = DualEncoder::new(&mut store, "dag", &config.paths, config.pool, rng);
        let (d_cls, d_reg) = (config.paths.dim(Task::Cls), config.paths.dim(Task::Reg));
        let heads = DetectHeads::new(&mut store, d_cls, d_reg, rng);
        let n = world.num_classes;
        let meta_cls = config.meta_cls.then(|| MetaClassifier::new(&mut store, "meta.cls", d_cls, n, rng));
        let meta_reg = config.meta_reg.then(|| MetaClassifier::new(&mut store, "meta.reg", d_reg, n, rng));
        Ok(Self {
            config: config.clone(),
            num_classes: n,
            store,
            backbone,
            rpn,
            fusion,
            dqe,
            dag,
            heads,
            meta_cls,
            meta_reg,
        })
    }

    /// Whether the optimizer may update a parameter, before any freeze options.
    /// Fusion weights of disabled paths are never used and stay fixed.
    pub fn is_learnable(&self, name: &str) -> bool {
        let Some(pos) = LAMBDA_NAMES.iter().position(|&n| n == name) else { return true };
        if self.config.fixed_lambdas {
            return false;
        }
        let p = &self.config.paths;
        [p.cls_conv, p.cls_fc, p.reg_conv, p.reg_fc][pos]
    }

    pub fn lambdas(&self) -> [f64; 4] {
        self.fusion.values(&self.store)
    }

    fn support_batch(support: &[Vec<SupportImage>]) -> Result<(Tensor, Vec<usize>), TensorError> {
        let first = &support
            .first()
            .and_then(|c| c.first())
            .ok_or(TensorError::EmptyInput { op: "support_batch" })?
            .image_with_mask;
        let s = first.shape().to_vec();
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(support.len());
        for cluster in support {
            if cluster.is_empty() {
                return Err(TensorError::EmptyInput { op: "support_batch" });
            }
            for img in cluster {
                if img.image_with_mask.shape() != s.as_slice() {
                    return Err(TensorError::ShapeMismatch {
                        op: "support_batch",
                        left: s.clone(),
                        right: img.image_with_mask.shape().to_vec(),
                    });
                }
                data.extend_from_slice(img.image_with_mask.data());
            }
            sizes.push(cluster.len());
        }
        let total: usize = sizes.iter().sum();
        Ok((Tensor::new(vec![total, s[0], s[1], s[2]], data)?, sizes))
    }

    fn query_features(&self, g: &mut Graph, p: &Bound, scene: &Scene) -> Result<FeatureMap, TensorError> {
        self.backbone.forward_single(g, p, &query_input(&scene.image))
    }

    /// Loss of one episode. With `plan` set, proposals and sampled anchors
    /// are taken from it instead of being derived from this pass.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        p: &Bound,
        episode: &Episode,
        plan: Option<&StepPlan>,
        rng: &mut Rng,
    ) -> Result<TrainOutput, TensorError> {
        let scene = &episode.query;
        let features = self.query_features(g, p, scene)?;
        let rpn_out = self.rpn.forward(g, p, &features)?;
        let plan = match plan {
            Some(plan) => plan.clone(),
            None => {
                let fs = g.shape(features.tensor).to_vec();
                let anchor_boxes = anchors(fs[1], fs[2], features.stride);
                let gt: Vec<BBox> = scene.objects.iter().map(|o| o.bbox).collect();
                let proposals = rpn_propose(
                    g.value(rpn_out.logits),
                    g.value(rpn_out.deltas),
                    &anchor_boxes,
                    (scene.height(), scene.width()),
                    self.config.train_top_n,
                    Some(&gt),
                )?
                .boxes;
                let anchor_targets = assign_rpn_targets(&anchor_boxes, &gt);
                let sampled_anchors = sample_anchors(&anchor_targets, rng);
                let roi_targets = assign_roi_targets(&proposals, &scene.objects, &episode.class_list);
                StepPlan { proposals, anchor_targets, sampled_anchors, roi_targets }
            }
        };

        let patches = roi_align(g, &features, &plan.proposals, self.config.pool)?;
        let rois = self.dqe.encode(g, p, &self.fusion, patches)?;
        let (batch, sizes) = Self::support_batch(&episode.support)?;
        let support_in = g.constant(batch);
        let support_features = self.backbone.forward(g, p, support_in)?;
        let attention = dag_encode(g, p, &self.dag, &self.fusion, support_features, &sizes)?;
        let agg = aggregate(g, &rois, &attention.per_class)?;
        let preds = self.heads.forward(g, p, &agg)?;
        let det = faster_rcnn_loss(g, &rpn_out, &plan.anchor_targets, &plan.sampled_anchors, &preds, &plan.roi_targets)?;

        let (meta_vectors, meta_ids) = if self.config.meta_on_class_mean {
            (attention.per_class, episode.class_list.clone())
        } else {
            let ids = episode.support.iter().flat_map(|c| c.iter().map(|s| s.class_id)).collect();
            (attention.per_support, ids)
        };
        let meta_cls = match &self.meta_cls {
            Some(c) => Some(meta_loss(g, p, c, meta_vectors.cls, &meta_ids)?),
            None => None,
        };
        let meta_reg = match &self.meta_reg {
            Some(c) => Some(meta_loss(g, p, c, meta_vectors.reg, &meta_ids)?),
            None => None,
        };
        let report = total_loss(g, det, meta_cls, meta_reg)?;
        Ok(TrainOutput { report, plan, preds })
    }

    /// Class-averaged attention vectors `(cls [m, d_cls], reg [m, d_reg])` of a support set.
    pub fn encode_support(&self, support: &[Vec<SupportImage>]) -> Result<(Tensor, Tensor), TensorError> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, |_| false);
        let (batch, sizes) = Self::support_batch(support)?;
        let x = g.constant(batch);
        let f = self.backbone.forward(&mut g, &p, x)?;
        let att = dag_encode(&mut g, &p, &self.dag, &self.fusion, f, &sizes)?;
        Ok((g.value(att.per_class.cls).clone(), g.value(att.per_class.reg).clone()))
    }

    /// Raw head outputs for a query against precomputed attention vectors:
    /// `(proposals, cls_logits [n, m+1], deltas [n*m, 4])`.
    pub fn predict(&self, scene: &Scene, attention: &(Tensor, Tensor)) -> Result<(Vec<BBox>, Tensor, Tensor), TensorError> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, |_| false);
        let features = self.query_features(&mut g, &p, scene)?;
        let rpn_out = self.rpn.forward(&mut g, &p, &features)?;
        let fs = g.shape(features.tensor).to_vec();
        let anchor_boxes = anchors(fs[1], fs[2], features.stride);
        let proposals = rpn_propose(
            g.value(rpn_out.logits),
            g.value(rpn_out.deltas),
            &anchor_boxes,
            (scene.height(), scene.width()),
            self.config.eval_top_n,
            None,
        )?
        .boxes;
        if proposals.is_empty() {
            let m = attention.0.shape()[0];
            return Ok((proposals, Tensor::zeros(&[1, m + 1]), Tensor::zeros(&[m, 4])));
        }
        let patches = roi_align(&mut g, &features, &proposals, self.config.pool)?;
        let rois = self.dqe.encode(&mut g, &p, &self.fusion, patches)?;
        let cls = g.constant(attention.0.clone());
        let reg = g.constant(attention.1.clone());
        let att = crate::dualheads::TaskVectors { cls, reg };
        let agg = aggregate(&mut g, &rois, &att)?;
        let preds = self.heads.forward(&mut g, &p, &agg)?;
        Ok((proposals, g.value(preds.cls_logits).clone(), g.value(preds.deltas).clone()))
    }

    /// Detections in one scene for the classes of `class_list`, whose support
    /// encodings are `attention`.
    pub fn detect(
        &self,
        scene: &Scene,
        class_list: &[usize],
        attention: &(Tensor, Tensor),
        score_thresh: f64,
    ) -> Result<Vec<Detection>, TensorError> {
        let (proposals, logits, deltas) = self.predict(scene, attention)?;
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        decode_detections(&logits, &deltas, &proposals, class_list, (scene.height(), scene.width()), score_thresh)
    }

    /// Binds every parameter as a trainable leaf.
    pub fn bind_all(&self, g: &mut Graph) -> Bound {
        self.store.bind(g, |_| true)
    }

    pub fn lambda_vars(&self, p: &Bound) -> [Var; 4] {
        [self.fusion.cls_conv, self.fusion.cls_fc, self.fusion.reg_conv, self.fusion.reg_fc].map(|id| p[id])
    }
}
