use std::io::Write;

use afdnet::dualheads::LAMBDA_NAMES;
use afdnet::episodes::WorldConfig;
use afdnet::params::ParamStore;
use afdnet::pipeline::*;
use afdnet::rng::seeded;
use afdnet::tensor::Tensor;

fn tiny(base: usize, finetune: usize) -> TrainConfig {
    TrainConfig { base_episodes: base, finetune_episodes: finetune, base_shots: 2, finetune_shots: 2, ..Default::default() }
}

fn store_with(values: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("w", Tensor::from_vec(values.to_vec()));
    s
}

#[test]
fn vanilla_step_subtracts_the_gradient() {
    let mut s = store_with(&[1.0, -2.0, 0.5]);
    let mut opt = Sgd::new(&s, vec![true], 0.0, 0.0);
    let mut grads = vec![Some(Tensor::from_vec(vec![0.25, 1.0, -3.0]))];
    sgd_step(&mut s, &mut grads, &mut opt, 1.0).unwrap();
    assert_eq!(s.values()[0].data(), [0.75, -3.0, 3.5]);
    assert!(grads[0].is_none(), "grads are cleared after the step");
}

#[test]
fn zero_gradient_is_a_fixed_point() {
    let mut s = store_with(&[1.5, -0.25]);
    let mut opt = Sgd::new(&s, vec![true], 0.9, 0.0);
    for _ in 0..3 {
        let mut grads = vec![Some(Tensor::zeros(&[2]))];
        sgd_step(&mut s, &mut grads, &mut opt, 0.3).unwrap();
    }
    assert_eq!(s.values()[0].data(), [1.5, -0.25]);
}

#[test]
fn two_momentum_steps_follow_the_recurrence() {
    let (p0, g1, g2, lr, mu, wd) = (0.8, 0.3, -0.7, 0.05, 0.9, 0.01);
    let mut s = store_with(&[p0]);
    let mut opt = Sgd::new(&s, vec![true], mu, wd);
    for g in [g1, g2] {
        let mut grads = vec![Some(Tensor::from_vec(vec![g]))];
        sgd_step(&mut s, &mut grads, &mut opt, lr).unwrap();
    }
    let v1 = g1 + wd * p0;
    let p1 = p0 - lr * v1;
    let v2 = mu * v1 + g2 + wd * p1;
    let p2 = p1 - lr * v2;
    assert!((s.values()[0].data()[0] - p2).abs() <= 1e-12);
    assert!((opt.velocity[0].data()[0] - v2).abs() <= 1e-12);
}

#[test]
fn missing_gradient_on_a_trainable_parameter_is_an_error() {
    let mut s = store_with(&[1.0]);
    s.add("frozen", Tensor::scalar(2.0));
    let mut opt = Sgd::new(&s, vec![true, false], 0.9, 0.0);
    let mut grads = vec![None, None];
    assert!(matches!(opt.step(&mut s, &mut grads, 0.1), Err(PipelineError::MissingGrad(n)) if n == "w"));
    let mut grads = vec![Some(Tensor::scalar(1.0)), None];
    opt.step(&mut s, &mut grads, 0.1).unwrap();
    assert_eq!(s.values()[1].data(), [2.0]);
}

#[test]
fn learning_rate_schedule_decays_stepwise() {
    assert_eq!(lr_at(0.01, 0.1, 500, 0), 0.01);
    assert_eq!(lr_at(0.01, 0.1, 500, 499), 0.01);
    assert!((lr_at(0.01, 0.1, 500, 500) - 0.001).abs() < 1e-18);
    assert!((lr_at(0.01, 0.1, 500, 1999) - 1e-5).abs() < 1e-18);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { lr: 0.0, ..Default::default() },
        TrainConfig { momentum: 1.0, ..Default::default() },
        TrainConfig { weight_decay: -1.0, ..Default::default() },
        TrainConfig { base_shots: 0, ..Default::default() },
        TrainConfig { m: 4, ..Default::default() },
        TrainConfig { world: WorldConfig { support_size: (16, 16), ..Default::default() }, ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(PipelineError::Config(_))), "{bad:?}");
    }
}

#[test]
fn config_files_parse_and_reject_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("run.toml");
    std::fs::write(&good, "seed = 4\nlr = 0.002\n[model]\nmeta_reg = false\n[model.paths]\ncls_fc = false\n").unwrap();
    let cfg = TrainConfig::from_path(&good).unwrap();
    assert_eq!((cfg.seed, cfg.lr, cfg.model.meta_reg, cfg.model.paths.cls_fc), (4, 0.002, false, false));
    assert_eq!(cfg.base_episodes, 2000);

    let json = dir.path().join("run.json");
    std::fs::write(&json, cfg.to_json()).unwrap();
    assert_eq!(TrainConfig::from_path(&json).unwrap(), cfg);

    let typo = dir.path().join("typo.toml");
    std::fs::write(&typo, "learning_rate = 0.1\n").unwrap();
    assert!(TrainConfig::from_path(&typo).is_err());

    let empty_branch = dir.path().join("branch.toml");
    std::fs::write(&empty_branch, "[model.paths]\nreg_conv = false\nreg_fc = false\n").unwrap();
    let err = TrainConfig::from_path(&empty_branch).unwrap_err().to_string();
    assert!(err.contains("reg"), "{err}");
}

fn same_params(a: &Checkpoint, b: &Checkpoint) -> bool {
    a.model.store.values().iter().zip(b.model.store.values()).all(|(x, y)| {
        x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
    })
}

#[test]
fn zero_episodes_return_the_initialization() {
    let cfg = tiny(0, 0);
    let mut log = Vec::new();
    let trained = train_base(&cfg, &mut log).unwrap();
    assert!(same_params(&trained, &Checkpoint::init(&cfg).unwrap()));
    assert_eq!(String::from_utf8(log).unwrap(), format!("{LOG_HEADER}\n"));
    assert_eq!(trained.iteration, 0);
}

#[test]
fn training_is_deterministic_and_logs_every_component() {
    let cfg = tiny(6, 0);
    let (mut log_a, mut log_b) = (Vec::new(), Vec::new());
    let a = train_base(&cfg, &mut log_a).unwrap();
    let b = train_base(&cfg, &mut log_b).unwrap();
    assert_eq!(log_a, log_b);
    assert!(same_params(&a, &b));
    assert!(!same_params(&a, &Checkpoint::init(&cfg).unwrap()));

    let text = String::from_utf8(log_a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 7);
    for (i, line) in lines[1..].iter().enumerate() {
        let fields: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields.len(), 13);
        assert_eq!(fields[0], i as f64);
        let parts: f64 = fields[2..8].iter().sum();
        assert!((parts - fields[8]).abs() <= 1e-12 * fields[8].max(1.0));
        if i == 0 {
            assert_eq!(&fields[9..], [1.0; 4]);
        }
    }
    assert_eq!(a.iteration, 6);
}

#[test]
fn log_interval_thins_rows() {
    let cfg = TrainConfig { log_interval: 3, ..tiny(7, 0) };
    let mut log = Vec::new();
    train_base(&cfg, &mut log).unwrap();
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 1 + 3);
}

#[test]
fn gradient_accumulation_runs_one_update_per_group() {
    let cfg = TrainConfig { accumulate: 4, ..tiny(4, 0) };
    let mut log = Vec::new();
    let ckpt = train_base(&cfg, &mut log).unwrap();
    // rows 1..3 are logged before the single update, so they share λ
    let text = String::from_utf8(log).unwrap();
    let lambdas: Vec<String> = text.lines().skip(1).map(|l| l.split(',').skip(9).collect::<Vec<_>>().join(",")).collect();
    assert!(lambdas.iter().all(|l| l == &lambdas[0]));
    assert_ne!(ckpt.model.lambdas(), [1.0; 4]);
}

#[test]
fn frozen_prefixes_stay_bit_identical() {
    let mut cfg = tiny(3, 2);
    cfg.freeze.base = vec!["backbone.".into(), "fusion.".into()];
    cfg.freeze.finetune = vec!["backbone.".into(), "rpn.".into()];
    let init = Checkpoint::init(&cfg).unwrap();
    let base = train_base(&cfg, &mut Vec::new()).unwrap();
    let ft = finetune(&base, 2, &mut Vec::new()).unwrap();
    let changed = |a: &Checkpoint, b: &Checkpoint, prefix: &str| {
        a.model.store.iter().zip(b.model.store.iter()).filter(|((_, n, _), _)| n.starts_with(prefix)).any(|((_, _, x), (_, _, y))| x != y)
    };
    assert!(!changed(&init, &base, "backbone."));
    assert!(!changed(&init, &base, "fusion."));
    assert!(changed(&init, &base, "rpn."));
    assert!(!changed(&base, &ft, "backbone."));
    assert!(!changed(&base, &ft, "rpn."));
    assert!(changed(&base, &ft, "fusion."));
}

#[test]
fn fixed_lambdas_never_move() {
    let mut cfg = tiny(3, 0);
    cfg.model.fixed_lambdas = true;
    let ckpt = train_base(&cfg, &mut Vec::new()).unwrap();
    assert_eq!(ckpt.model.lambdas(), [1.0; 4]);
    for name in LAMBDA_NAMES {
        assert!(!ckpt.model.is_learnable(name));
    }
}

#[test]
fn finetune_continues_iterations_and_rejects_zero_shots() {
    let cfg = tiny(2, 3);
    let base = train_base(&cfg, &mut Vec::new()).unwrap();
    let mut log = Vec::new();
    let ft = finetune(&base, 4, &mut log).unwrap();
    assert_eq!(ft.iteration, 5);
    let text = String::from_utf8(log).unwrap();
    let first: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first[0], "2");
    assert_eq!(ft.config.finetune_shots, 4);
    assert!(matches!(finetune(&base, 0, &mut Vec::new()), Err(PipelineError::Config(_))));
}

#[test]
fn divergence_aborts_with_the_episode_seed() {
    let cfg = TrainConfig { lr: 1e9, momentum: 0.0, ..tiny(30, 0) };
    match train_base(&cfg, &mut Vec::new()) {
        Err(e @ PipelineError::NonFinite { .. }) => assert!(e.to_string().contains("episode seed 0x")),
        other => panic!("expected a non-finite abort, got {:?}", other.map(|c| c.iteration)),
    }
}

fn forward_fingerprint(ckpt: &Checkpoint) -> Vec<u64> {
    let cfg = &ckpt.config;
    let split = cfg.split();
    let pool = cfg.shot_pool(2).unwrap();
    let support: Vec<_> = split.all().iter().map(|c| pool.images[c].clone()).collect();
    let att = ckpt.model.encode_support(&support).unwrap();
    let scene = afdnet::episodes::gen_scene(&mut seeded(99), &split.all(), 3, cfg.world.scene_size).unwrap();
    let (props, logits, deltas) = ckpt.model.predict(&scene, &att).unwrap();
    props.iter().flatten().chain(logits.data()).chain(deltas.data()).map(|v| v.to_bits()).collect()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = tiny(3, 0);
    let ckpt = train_base(&cfg, &mut Vec::new()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.afdn");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path, None).unwrap();
    assert!(same_params(&ckpt, &back));
    assert_eq!(back.optimizer.velocity, ckpt.optimizer.velocity);
    assert_eq!(back.iteration, 3);
    assert_eq!(back.config, cfg);
    assert_eq!(forward_fingerprint(&ckpt), forward_fingerprint(&back));
    assert_eq!(std::fs::read(&path).unwrap()[..4], *b"AFDN");
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let ckpt = Checkpoint::init(&tiny(0, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.afdn");
    save_checkpoint(&ckpt, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [3, 12, bytes.len() / 2, bytes.len() - 1] {
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(&bytes[..cut]).unwrap();
        drop(f);
        assert!(load_checkpoint(&path, None).is_err(), "cut at {cut}");
    }
}

#[test]
fn mismatched_config_names_tensor_and_shapes() {
    let ckpt = Checkpoint::init(&tiny(0, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.afdn");
    save_checkpoint(&ckpt, &path).unwrap();

    let mut other = tiny(0, 0);
    other.model.pool = 2;
    other.world.support_size = (16, 16);
    let err = load_checkpoint(&path, Some(&other)).unwrap_err().to_string();
    assert!(err.contains("dqe.cls.fc1.weight"), "{err}");
    assert!(err.contains("[1024, 128]") && err.contains("[256, 128]"), "{err}");

    let mut fewer = tiny(0, 0);
    fewer.model.meta_reg = false;
    let err = load_checkpoint(&path, Some(&fewer)).unwrap_err().to_string();
    assert!(err.contains("meta.reg"), "{err}");
}

#[test]
fn episode_producer_thread_does_not_change_the_log() {
    let cfg = tiny(5, 0);
    let mut single = Vec::new();
    std::env::set_var("AFD_THREADS", "1");
    train_base(&cfg, &mut single).unwrap();
    std::env::set_var("AFD_THREADS", "3");
    let mut threaded = Vec::new();
    train_base(&cfg, &mut threaded).unwrap();
    std::env::remove_var("AFD_THREADS");
    assert_eq!(single, threaded);
}
