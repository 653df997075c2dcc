//! Two-phase episodic training, SGD, and checkpoints.

use std::io::Write;
use std::path::Path;
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{self, ArchiveError};
use crate::episodes::{
    build_episode, make_split, ClassSplit, Episode, EpisodeError, EpisodeRequest, Phase, SupportPool, WorldConfig,
    STANDARD_SHOTS,
};
use crate::eval::{self, EvalConfig, EvalReport, Subset};
use crate::losses::COMPONENTS;
use crate::model::{AfdNet, ModelConfig};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite value in {phase} iteration {iteration} (episode seed {episode_seed:#018x}): {detail}")]
    NonFinite { phase: &'static str, iteration: usize, episode_seed: u64, detail: String },
    #[error("trainable parameter {0} received no gradient")]
    MissingGrad(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Parameter-name prefixes kept fixed in each phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezeConfig {
    pub base: Vec<String>,
    pub finetune: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub base_episodes: usize,
    pub finetune_episodes: usize,
    pub base_shots: usize,
    pub finetune_shots: usize,
    /// Classes per base-phase episode.
    pub m: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub base_lr_decay_interval: usize,
    pub finetune_lr_decay_interval: usize,
    /// Episodes whose gradients are averaged into one update.
    pub accumulate: usize,
    pub log_interval: usize,
    pub freeze: FreezeConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            base_episodes: 2000,
            finetune_episodes: 400,
            base_shots: 5,
            finetune_shots: 5,
            m: 3,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_decay_factor: 0.1,
            base_lr_decay_interval: 500,
            finetune_lr_decay_interval: 150,
            accumulate: 1,
            log_interval: 1,
            freeze: FreezeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |msg: String| Err(PipelineError::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return err(format!("lr_decay_factor must be in (0, 1], got {}", self.lr_decay_factor));
        }
        if self.base_shots == 0 || self.finetune_shots == 0 {
            return err("base_shots and finetune_shots must be at least 1".into());
        }
        for (name, v) in [
            ("base_lr_decay_interval", self.base_lr_decay_interval),
            ("finetune_lr_decay_interval", self.finetune_lr_decay_interval),
            ("accumulate", self.accumulate),
            ("log_interval", self.log_interval),
        ] {
            if v == 0 {
                return err(format!("{name} must be at least 1"));
            }
        }
        let w = &self.world;
        if w.num_novel == 0 || w.num_novel >= w.num_classes {
            return err(format!(
                "world.num_novel must be in [1, num_classes), got {} of {}",
                w.num_novel, w.num_classes
            ));
        }
        if w.max_objects == 0 || w.support_max_objects == 0 {
            return err("world.max_objects and world.support_max_objects must be at least 1".into());
        }
        let base = w.num_classes - w.num_novel;
        if self.m == 0 || self.m > base {
            return err(format!("m must be in [1, {base}] (the number of base classes), got {}", self.m));
        }
        self.model.validate(w).map_err(PipelineError::Config)?;
        self.eval.validate().map_err(PipelineError::Config)?;
        Ok(())
    }

    /// Reads a TOML file, or JSON when the extension is `.json`.
    pub fn from_path(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn split(&self) -> ClassSplit {
        make_split(self.world.num_classes, self.world.num_novel, self.seed).expect("validated split")
    }

    /// The run's fixed K-shot support images for every class.
    pub fn shot_pool(&self, k: usize) -> Result<SupportPool, EpisodeError> {
        let mut r = rng::stream(self.seed, "shot-pool", k as u64);
        SupportPool::sample(&self.split().all(), k, &self.world, &mut r)
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor>,
    /// Which parameters are updated, indexed like the store.
    pub trainable: Vec<bool>,
}

impl Sgd {
    pub fn new(store: &ParamStore, trainable: Vec<bool>, momentum: f64, weight_decay: f64) -> Self {
        assert_eq!(trainable.len(), store.len());
        let velocity = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { momentum, weight_decay, velocity, trainable }
    }

    /// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`,
    /// then clears `grads`. Frozen parameters are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut [Option<Tensor>], lr: f64) -> Result<(), PipelineError> {
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            if !self.trainable[i] {
                continue;
            }
            let Some(grad) = grads[i].as_ref() else {
                return Err(PipelineError::MissingGrad(store.name(id).to_string()));
            };
            let param = store.get_mut(id);
            let v = self.velocity[i].data_mut();
            for ((v, p), g) in v.iter_mut().zip(param.data_mut()).zip(grad.data()) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p -= lr * *v;
            }
        }
        grads.iter_mut().for_each(|g| *g = None);
        Ok(())
    }
}

/// Convenience wrapper matching the update rule on a single store.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &mut [Option<Tensor>],
    state: &mut Sgd,
    lr: f64,
) -> Result<(), PipelineError> {
    state.step(store, grads, lr)
}

pub const LOG_HEADER: &str = "iteration,lr,rpn_cls,rpn_reg,rcnn_cls,rcnn_reg,meta_cls,meta_reg,total,\
lambda_cls_conv,lambda_cls_fc,lambda_reg_conv,lambda_reg_fc";

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    /// In the order rpn_cls, rpn_reg, rcnn_cls, rcnn_reg, meta_cls, meta_reg, total.
    pub losses: [f64; 7],
    /// cls_conv, cls_fc, reg_conv, reg_fc as used by this iteration's forward pass.
    pub lambdas: [f64; 4],
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{}", self.iteration, self.lr);
        for v in self.losses.iter().chain(&self.lambdas) {
            s.push_str(&format!(",{v}"));
        }
        s
    }
}

const _: () = assert!(COMPONENTS.len() == 7);

/// Model, optimizer state and progress of a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: AfdNet,
    pub optimizer: Sgd,
    /// Episodes trained so far across both phases.
    pub iteration: usize,
}

fn trainable_mask(model: &AfdNet, frozen: &[String]) -> Vec<bool> {
    model
        .store
        .iter()
        .map(|(_, name, _)| model.is_learnable(name) && !frozen.iter().any(|p| name.starts_with(p.as_str())))
        .collect()
}

impl Checkpoint {
    /// Freshly initialized model for `config`.
    pub fn init(config: &TrainConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let model = AfdNet::new(&config.model, &config.world, config.seed).map_err(PipelineError::Config)?;
        let optimizer = Sgd::new(&model.store, trainable_mask(&model, &config.freeze.base), config.momentum, config.weight_decay);
        Ok(Self { config: config.clone(), model, optimizer, iteration: 0 })
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.model.store.to_named();
        for ((_, name, _), v) in self.model.store.iter().zip(&self.optimizer.velocity) {
            out.push((format!("momentum/{name}"), v.clone()));
        }
        out.push(("meta.iteration".into(), Tensor::scalar(self.iteration as f64)));
        let json = self.config.to_json();
        out.push(("meta.config_json".into(), Tensor::from_vec(json.bytes().map(f64::from).collect())));
        out
    }

    /// Rebuilds a checkpoint from archive tensors. With `expected` given, the
    /// stored tensors must match that config's model exactly.
    pub fn from_tensors(tensors: Vec<(String, Tensor)>, expected: Option<&TrainConfig>) -> Result<Self, PipelineError> {
        let bad = |msg: String| PipelineError::Checkpoint(msg);
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let json = find("meta.config_json").ok_or_else(|| bad("missing tensor meta.config_json".into()))?;
        let bytes: Vec<u8> = json.data().iter().map(|&b| b as u8).collect();
        let stored: TrainConfig = serde_json::from_slice(&bytes).map_err(|e| bad(format!("meta.config_json: {e}")))?;
        let config = expected.cloned().unwrap_or(stored);
        let mut ckpt = Self::init(&config)?;
        let iteration = find("meta.iteration").ok_or_else(|| bad("missing tensor meta.iteration".into()))?;
        ckpt.iteration = iteration.data()[0] as usize;

        let known = ckpt.model.store.len() * 2 + 2;
        if tensors.len() != known {
            let extra = tensors
                .iter()
                .find(|(n, _)| {
                    let base = n.strip_prefix("momentum/").unwrap_or(n);
                    ckpt.model.store.id(base).is_none() && !n.starts_with("meta.")
                })
                .map(|(n, _)| n.clone());
            return Err(bad(match extra {
                Some(n) => format!("tensor {n} does not exist in the configured model"),
                None => format!("expected {known} tensors, archive has {}", tensors.len()),
            }));
        }
        for id in ckpt.model.store.ids().collect::<Vec<_>>() {
            let name = ckpt.model.store.name(id).to_string();
            for (key, is_momentum) in [(name.clone(), false), (format!("momentum/{name}"), true)] {
                let t = find(&key).ok_or_else(|| bad(format!("missing tensor {key}")))?;
                let want = ckpt.model.store.get(id).shape().to_vec();
                if t.shape() != want.as_slice() {
                    return Err(bad(format!(
                        "tensor {key} has shape {:?} but the configured model expects {want:?}",
                        t.shape()
                    )));
                }
                if is_momentum {
                    ckpt.optimizer.velocity[id.index()] = t.clone();
                } else {
                    *ckpt.model.store.get_mut(id) = t.clone();
                }
            }
        }
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), PipelineError> {
    archive::save(path, &ckpt.to_tensors())?;
    Ok(())
}

/// Loads a checkpoint; nothing is returned unless the whole file validates.
pub fn load_checkpoint(path: &Path, expected: Option<&TrainConfig>) -> Result<Checkpoint, PipelineError> {
    Checkpoint::from_tensors(archive::load(path)?, expected)
}

/// Learning rate at phase-local episode `index`.
pub fn lr_at(base_lr: f64, factor: f64, interval: usize, index: usize) -> f64 {
    base_lr * factor.powi((index / interval) as i32)
}

/// Worker threads for episode generation, from `AFD_THREADS` (default 1).
pub fn worker_threads() -> usize {
    std::env::var("AFD_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n: &usize| n >= 1).unwrap_or(1)
}

struct PhasePlan<'a> {
    phase: Phase,
    label: &'static str,
    episodes: usize,
    k: usize,
    m: usize,
    decay_interval: usize,
    pool: Option<&'a SupportPool>,
}

fn episode_seed(master: u64, label: &str, index: usize) -> u64 {
    rng::derive_seed(master, label, index as u64)
}

fn make_episode(cfg: &TrainConfig, split: &ClassSplit, plan: &PhasePlan, index: usize) -> Result<Episode, EpisodeError> {
    let req = EpisodeRequest { phase: plan.phase, split, m: plan.m, k: plan.k, world: &cfg.world, pool: plan.pool };
    let mut r = rng::seeded(episode_seed(cfg.seed, plan.label, index));
    build_episode(&req, index, &mut r)
}

fn run_phase(ckpt: &mut Checkpoint, plan: &PhasePlan, log: &mut dyn Write) -> Result<(), PipelineError> {
    let cfg = ckpt.config.clone();
    let split = cfg.split();
    let threads = worker_threads();
    thread::scope(|scope| -> Result<(), PipelineError> {
        let (tx, rx) = mpsc::sync_channel::<Result<Episode, EpisodeError>>(8);
        if threads > 1 {
            let (cfg, split) = (&cfg, &split);
            scope.spawn(move || {
                for i in 0..plan.episodes {
                    if tx.send(make_episode(cfg, split, plan, i)).is_err() {
                        break;
                    }
                }
            });
        } else {
            drop(tx);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; ckpt.model.store.len()];
        let mut pending = 0usize;
        for i in 0..plan.episodes {
            let episode = if threads > 1 { rx.recv().expect("producer alive")? } else { make_episode(&cfg, &split, plan, i)? };
            let lr = lr_at(cfg.lr, cfg.lr_decay_factor, plan.decay_interval, i);
            let iteration = ckpt.iteration;
            let seed = episode_seed(cfg.seed, plan.label, i);
            let numeric = |e: TensorError| PipelineError::NonFinite {
                phase: plan.label,
                iteration,
                episode_seed: seed,
                detail: e.to_string(),
            };
            let mut g = Graph::new();
            let p = ckpt.model.store.bind_masked(&mut g, &ckpt.optimizer.trainable);
            let mut sample_rng = rng::stream(seed, "anchor-sample", 0);
            let out = ckpt.model.forward_train(&mut g, &p, &episode, None, &mut sample_rng).map_err(|e| match e {
                TensorError::NonFinite { .. } => numeric(e),
                other => PipelineError::Tensor(other),
            })?;
            let losses = out.report.values(&g);
            if losses.iter().any(|v| !v.is_finite()) {
                return Err(numeric(TensorError::NonFinite { op: "loss" }));
            }
            if i % cfg.log_interval == 0 {
                let row = LogRow { iteration, lr, losses, lambdas: ckpt.model.lambdas() };
                writeln!(log, "{}", row.to_csv())?;
            }
            g.backward(out.report.total).map_err(numeric)?;
            let scale = 1.0 / cfg.accumulate as f64;
            for (slot, &v) in grads.iter_mut().zip(p.vars()) {
                if let Some(mut gv) = g.grad(v) {
                    if cfg.accumulate > 1 {
                        gv.data_mut().iter_mut().for_each(|x| *x *= scale);
                    }
                    match slot {
                        Some(acc) => acc.data_mut().iter_mut().zip(gv.data()).for_each(|(a, b)| *a += b),
                        None => *slot = Some(gv),
                    }
                }
            }
            pending += 1;
            ckpt.iteration += 1;
            if pending == cfg.accumulate || i + 1 == plan.episodes {
                ckpt.optimizer.step(&mut ckpt.model.store, &mut grads, lr)?;
                pending = 0;
                if !ckpt.model.store.values().iter().all(Tensor::is_finite) {
                    return Err(numeric(TensorError::NonFinite { op: "sgd_step" }));
                }
            }
            if i % 100 == 0 {
                log::info!("{} episode {i}: total loss {:.4}", plan.label, losses[6]);
            }
        }
        Ok(())
    })
}

/// Base phase from a fresh initialization. Writes the CSV header and one
/// row per logged iteration to `log`.
pub fn train_base(config: &TrainConfig, log: &mut dyn Write) -> Result<Checkpoint, PipelineError> {
    let mut ckpt = Checkpoint::init(config)?;
    writeln!(log, "{LOG_HEADER}")?;
    let plan = PhasePlan {
        phase: Phase::Base,
        label: "base-episode",
        episodes: config.base_episodes,
        k: config.base_shots,
        m: config.m,
        decay_interval: config.base_lr_decay_interval,
        pool: None,
    };
    run_phase(&mut ckpt, &plan, log)?;
    Ok(ckpt)
}

/// Fine-tune phase on all classes with the run's fixed `k`-shot pool.
/// Continues the checkpoint's iteration count and writes its own header.
pub fn finetune(from: &Checkpoint, k: usize, log: &mut dyn Write) -> Result<Checkpoint, PipelineError> {
    if k == 0 {
        return Err(PipelineError::Config("K must be at least 1".into()));
    }
    if !STANDARD_SHOTS.contains(&k) {
        log::warn!("fine-tuning with K = {k}, outside the standard {STANDARD_SHOTS:?}");
    }
    let mut ckpt = from.clone();
    ckpt.config.finetune_shots = k;
    ckpt.optimizer.trainable = trainable_mask(&ckpt.model, &ckpt.config.freeze.finetune);
    let pool = ckpt.config.shot_pool(k)?;
    let split = ckpt.config.split();
    writeln!(log, "{LOG_HEADER}")?;
    let plan = PhasePlan {
        phase: Phase::Finetune,
        label: "finetune-episode",
        episodes: ckpt.config.finetune_episodes,
        k,
        m: split.num_classes(),
        decay_interval: ckpt.config.finetune_lr_decay_interval,
        pool: Some(&pool),
    };
    run_phase(&mut ckpt, &plan, log)?;
    Ok(ckpt)
}

/// AP50 of `subset` for a checkpoint, with the run's fixed `shots`-shot
/// support pool and scenes seeded from the run seed.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    subset: Subset,
    shots: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport, PipelineError> {
    cfg.validate().map_err(PipelineError::Config)?;
    if shots == 0 {
        return Err(PipelineError::Config("shots must be at least 1".into()));
    }
    let c = &ckpt.config;
    let pool = c.shot_pool(shots)?;
    Ok(eval::evaluate(&ckpt.model, &c.split(), &c.world, &pool, subset, cfg, c.seed)?)
}
