//! Dual query encoder, dual attention generator and the adaptive fusion
//! weights shared between them.

use serde::{Deserialize, Serialize};

use crate::params::{Bound, Conv, Linear, ParamId, ParamStore};
use crate::perception::FEATURE_CHANNELS;
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const CONV_DIM: usize = 64;
pub const FC_HIDDEN: usize = 128;
pub const FC_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cls,
    Reg,
}

impl Task {
    pub const BOTH: [Task; 2] = [Task::Cls, Task::Reg];

    pub fn name(self) -> &'static str {
        match self {
            Task::Cls => "cls",
            Task::Reg => "reg",
        }
    }
}

/// Which encoder paths are active for each task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionPaths {
    pub cls_conv: bool,
    pub cls_fc: bool,
    pub reg_conv: bool,
    pub reg_fc: bool,
}

impl Default for FusionPaths {
    fn default() -> Self {
        Self { cls_conv: true, cls_fc: true, reg_conv: true, reg_fc: true }
    }
}

impl FusionPaths {
    /// `(conv, fc)` flags of `task`.
    pub fn of(&self, task: Task) -> (bool, bool) {
        match task {
            Task::Cls => (self.cls_conv, self.cls_fc),
            Task::Reg => (self.reg_conv, self.reg_fc),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for task in Task::BOTH {
            if self.of(task) == (false, false) {
                return Err(format!("fusion paths: the {} branch needs at least one of conv or fc", task.name()));
            }
        }
        Ok(())
    }

    pub fn dim(&self, task: Task) -> usize {
        let (conv, fc) = self.of(task);
        conv as usize * CONV_DIM + fc as usize * FC_DIM
    }
}

/// The four fusion weights. Both encoders read them through the same
/// parameter ids, so within one graph they are the same nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionWeights {
    pub cls_conv: ParamId,
    pub cls_fc: ParamId,
    pub reg_conv: ParamId,
    pub reg_fc: ParamId,
}

pub const LAMBDA_NAMES: [&str; 4] =
    ["fusion.lambda_cls_conv", "fusion.lambda_cls_fc", "fusion.lambda_reg_conv", "fusion.lambda_reg_fc"];

impl FusionWeights {
    pub fn new(store: &mut ParamStore) -> Self {
        let [a, b, c, d] = LAMBDA_NAMES.map(|n| store.add(n, Tensor::scalar(1.0)));
        Self { cls_conv: a, cls_fc: b, reg_conv: c, reg_fc: d }
    }

    pub fn pair(&self, task: Task) -> (ParamId, ParamId) {
        match task {
            Task::Cls => (self.cls_conv, self.cls_fc),
            Task::Reg => (self.reg_conv, self.reg_fc),
        }
    }

    /// Values in log order: cls_conv, cls_fc, reg_conv, reg_fc.
    pub fn values(&self, store: &ParamStore) -> [f64; 4] {
        [self.cls_conv, self.cls_fc, self.reg_conv, self.reg_fc].map(|id| store.get(id).data()[0])
    }
}

/// `[λ_conv · conv, λ_fc · fc]` along the feature axis. Either side may be
/// absent when its path is disabled.
pub fn afm_fuse(
    g: &mut Graph,
    conv_feat: Option<Var>,
    fc_feat: Option<Var>,
    lambdas: (Var, Var),
) -> Result<Var, TensorError> {
    let mut parts = Vec::with_capacity(2);
    if let Some(c) = conv_feat {
        parts.push((c, Some(lambdas.0)));
    }
    if let Some(f) = fc_feat {
        parts.push((f, Some(lambdas.1)));
    }
    let axis = parts.first().map(|&(v, _)| g.shape(v).len() - 1).unwrap_or(0);
    g.weighted_concat(&parts, axis)
}

/// Conv and fc sub-encoders of one task.
#[derive(Clone, Debug)]
pub struct TaskEncoder {
    pub conv: Option<Conv>,
    pub fc: Option<(Linear, Linear)>,
}

impl TaskEncoder {
    fn new(store: &mut ParamStore, prefix: &str, paths: (bool, bool), pool: usize, rng: &mut Rng) -> Self {
        let conv = paths
            .0
            .then(|| Conv::new(store, &format!("{prefix}.conv"), FEATURE_CHANNELS, CONV_DIM, 3, 1, 1, None, rng));
        let fc = paths.1.then(|| {
            let flat = FEATURE_CHANNELS * pool * pool;
            (
                Linear::new(store, &format!("{prefix}.fc1"), flat, FC_HIDDEN, None, rng),
                Linear::new(store, &format!("{prefix}.fc2"), FC_HIDDEN, FC_DIM, None, rng),
            )
        });
        Self { conv, fc }
    }

    /// Layer shapes, for comparing encoder structure.
    pub fn layer_shapes(&self, store: &ParamStore) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        if let Some(c) = &self.conv {
            out.push(store.get(c.weight).shape().to_vec());
            out.push(store.get(c.bias).shape().to_vec());
        }
        if let Some((a, b)) = &self.fc {
            for l in [a, b] {
                out.push(store.get(l.weight).shape().to_vec());
                out.push(store.get(l.bias).shape().to_vec());
            }
        }
        out
    }

    fn forward(&self, g: &mut Graph, p: &Bound, patches: Var, lambdas: (Var, Var)) -> Result<Var, TensorError> {
        let conv = match &self.conv {
            Some(c) => {
                let x = c.forward(g, p, patches)?;
                let x = g.relu(x)?;
                Some(g.global_avg_pool(x)?)
            }
            None => None,
        };
        let fc = match &self.fc {
            Some((l1, l2)) => {
                let s = g.shape(patches).to_vec();
                let x = g.reshape(patches, &[s[0], s[1..].iter().product()])?;
                let x = l1.forward(g, p, x)?;
                let x = g.relu(x)?;
                Some(l2.forward(g, p, x)?)
            }
            None => None,
        };
        afm_fuse(g, conv, fc, lambdas)
    }
}

/// Per-task vectors, one row per RoI or per class: `cls` is `[rows, d_cls]`,
/// `reg` is `[rows, d_reg]`.
#[derive(Clone, Copy, Debug)]
pub struct TaskVectors {
    pub cls: Var,
    pub reg: Var,
}

impl TaskVectors {
    pub fn get(&self, task: Task) -> Var {
        match task {
            Task::Cls => self.cls,
            Task::Reg => self.reg,
        }
    }
}

/// A pair of task encoders over `[n, C_f, P, P]` inputs. Used with prefix
/// `dqe` on RoI patches and `dag` on support feature maps.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub cls: TaskEncoder,
    pub reg: TaskEncoder,
}

impl DualEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, paths: &FusionPaths, pool: usize, rng: &mut Rng) -> Self {
        let cls = TaskEncoder::new(store, &format!("{prefix}.cls"), paths.of(Task::Cls), pool, rng);
        let reg = TaskEncoder::new(store, &format!("{prefix}.reg"), paths.of(Task::Reg), pool, rng);
        Self { cls, reg }
    }

    pub fn task(&self, task: Task) -> &TaskEncoder {
        match task {
            Task::Cls => &self.cls,
            Task::Reg => &self.reg,
        }
    }

    pub fn encode(&self, g: &mut Graph, p: &Bound, weights: &FusionWeights, input: Var) -> Result<TaskVectors, TensorError> {
        let pair = |t: Task| {
            let (a, b) = weights.pair(t);
            (p[a], p[b])
        };
        let cls = self.cls.forward(g, p, input, pair(Task::Cls))?;
        let reg = self.reg.forward(g, p, input, pair(Task::Reg))?;
        Ok(TaskVectors { cls, reg })
    }
}

/// Output of the attention generator.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    /// One row per support image, in class-major order.
    pub per_support: TaskVectors,
    /// One row per class: the mean over that class's supports.
    pub per_class: TaskVectors,
}

/// Encodes support feature maps `[m*K_j, C_f, P, P]` (grouped by class, in
/// class order) and averages each class's rows.
pub fn dag_encode(
    g: &mut Graph,
    p: &Bound,
    encoder: &DualEncoder,
    weights: &FusionWeights,
    support_features: Var,
    group_sizes: &[usize],
) -> Result<Attention, TensorError> {
    if group_sizes.is_empty() || group_sizes.contains(&0) {
        return Err(TensorError::EmptyInput { op: "dag_encode" });
    }
    let per_support = encoder.encode(g, p, weights, support_features)?;
    let mut groups = Vec::with_capacity(group_sizes.len());
    let mut start = 0;
    for &k in group_sizes {
        groups.push((start, start + k));
        start += k;
    }
    let cls = g.group_mean(per_support.cls, &groups)?;
    let reg = g.group_mean(per_support.reg, &groups)?;
    Ok(Attention { per_support, per_class: TaskVectors { cls, reg } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn validation_rejects_empty_branch() {
        let mut p = FusionPaths::default();
        assert!(p.validate().is_ok());
        p.reg_conv = false;
        p.reg_fc = false;
        assert!(p.validate().unwrap_err().contains("reg"));
    }

    #[test]
    fn disabled_paths_have_no_parameters() {
        let mut store = ParamStore::new();
        let paths = FusionPaths { cls_fc: false, ..Default::default() };
        DualEncoder::new(&mut store, "dqe", &paths, 4, &mut seeded(0));
        assert!(store.id("dqe.cls.fc1.weight").is_none());
        assert!(store.id("dqe.cls.conv.weight").is_some());
        assert!(store.id("dqe.reg.fc2.bias").is_some());
    }
}
