use afdnet::dualheads::TaskVectors;
use afdnet::episodes::{build_episode, make_split, EpisodeRequest, Phase, WorldConfig};
use afdnet::fusion::*;
use afdnet::model::{AfdNet, ModelConfig};
use afdnet::params::ParamStore;
use afdnet::rng::{seeded, stream};
use afdnet::tensor::{Graph, Tensor, Var};
use rand::Rng as _;

fn vectors(g: &mut Graph, cls: Tensor, reg: Tensor) -> TaskVectors {
    TaskVectors { cls: g.constant(cls), reg: g.constant(reg) }
}

/// Scalar-loop pair feature of one RoI row and one class row.
fn oracle_pair(r: &[f64], a: &[f64]) -> Vec<f64> {
    let d = r.len();
    let mut f = vec![0.0; 3 * d];
    for c in 0..d {
        f[c] = r[c] * a[c];
        f[d + c] = r[c] - a[c];
        f[2 * d + c] = r[c];
    }
    f
}

#[test]
fn aggregate_matches_scalar_oracle() {
    let mut rng = seeded(0);
    let mut pairs = 0;
    let mut worst: f64 = 0.0;
    while pairs < 1000 {
        let (n, m) = (rng.random_range(1..6), rng.random_range(1..5));
        let (dc, dr) = (rng.random_range(1..9), rng.random_range(1..9));
        let rc = Tensor::randn(&[n, dc], 2.0, &mut rng);
        let rr = Tensor::randn(&[n, dr], 2.0, &mut rng);
        let ac = Tensor::randn(&[m, dc], 2.0, &mut rng);
        let ar = Tensor::randn(&[m, dr], 2.0, &mut rng);
        let mut g = Graph::new();
        let rois = vectors(&mut g, rc.clone(), rr.clone());
        let att = vectors(&mut g, ac.clone(), ar.clone());
        let agg = aggregate(&mut g, &rois, &att).unwrap();
        assert_eq!((agg.n, agg.m), (n, m));
        for (out, r, a, d) in [(agg.cls, &rc, &ac, dc), (agg.reg, &rr, &ar, dr)] {
            let v = g.value(out);
            assert_eq!(v.shape(), [n * m, 3 * d]);
            for i in 0..n {
                for j in 0..m {
                    let want = oracle_pair(&r.data()[i * d..(i + 1) * d], &a.data()[j * d..(j + 1) * d]);
                    let k = i * m + j;
                    for (x, y) in v.data()[k * 3 * d..(k + 1) * 3 * d].iter().zip(&want) {
                        worst = worst.max((x - y).abs());
                    }
                }
            }
        }
        pairs += n * m;
    }
    assert!(worst <= 1e-12, "max deviation {worst}");
}

#[test]
fn hand_worked_pair() {
    let mut g = Graph::new();
    let r = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let a = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
    let rois = vectors(&mut g, r.clone(), r);
    let att = vectors(&mut g, a.clone(), a);
    let agg = aggregate(&mut g, &rois, &att).unwrap();
    assert_eq!(g.value(agg.cls).data(), [3.0, 8.0, -2.0, -2.0, 1.0, 2.0]);
    assert_eq!(g.value(agg.reg).data(), [3.0, 8.0, -2.0, -2.0, 1.0, 2.0]);
}

#[test]
fn unit_attention_passes_roi_through() {
    let mut rng = seeded(1);
    let r = Tensor::randn(&[1, 5], 1.0, &mut rng);
    let mut g = Graph::new();
    let rois = vectors(&mut g, r.clone(), r.clone());
    let att = vectors(&mut g, Tensor::ones(&[1, 5]), Tensor::ones(&[1, 5]));
    let agg = aggregate(&mut g, &rois, &att).unwrap();
    let v = g.value(agg.cls).data();
    for c in 0..5 {
        assert_eq!(v[c], r.data()[c]);
        assert_eq!(v[5 + c], r.data()[c] - 1.0);
        assert_eq!(v[10 + c], r.data()[c]);
    }
}

#[test]
fn pair_count_is_n_times_m() {
    let mut rng = seeded(2);
    let mut g = Graph::new();
    let rois = vectors(&mut g, Tensor::randn(&[2, 4], 1.0, &mut rng), Tensor::randn(&[2, 6], 1.0, &mut rng));
    let att = vectors(&mut g, Tensor::randn(&[3, 4], 1.0, &mut rng), Tensor::randn(&[3, 6], 1.0, &mut rng));
    let agg = aggregate(&mut g, &rois, &att).unwrap();
    assert_eq!(g.shape(agg.cls)[0] + g.shape(agg.reg)[0], 12);
}

#[test]
fn dimension_mismatch_is_an_error() {
    let mut g = Graph::new();
    let rois = vectors(&mut g, Tensor::zeros(&[2, 4]), Tensor::zeros(&[2, 4]));
    let att = vectors(&mut g, Tensor::zeros(&[3, 5]), Tensor::zeros(&[3, 4]));
    assert!(aggregate(&mut g, &rois, &att).is_err());
}

#[test]
fn heads_emit_one_prediction_per_pair_and_ignore_the_other_task() {
    let mut store = ParamStore::new();
    let heads = DetectHeads::new(&mut store, 4, 6, &mut seeded(3));
    let mut rng = seeded(4);
    let cls_in = Tensor::randn(&[6, 12], 1.0, &mut rng);
    let run = |reg_in: Tensor| {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let agg = Aggregated { cls: g.constant(cls_in.clone()), reg: g.constant(reg_in), n: 2, m: 3 };
        let out = heads.forward(&mut g, &p, &agg).unwrap();
        (g.value(out.cls_logits).clone(), g.value(out.deltas).clone())
    };
    let (l1, d1) = run(Tensor::randn(&[6, 18], 1.0, &mut rng));
    let (l2, d2) = run(Tensor::randn(&[6, 18], 1.0, &mut rng));
    assert_eq!(l1.shape(), [2, 4]);
    assert_eq!(d1.shape(), [6, 4]);
    assert_eq!(l1, l2);
    assert_ne!(d1, d2);
}

#[test]
fn uniform_scores_fall_below_a_half() {
    let logits = Tensor::zeros(&[3, 4]);
    let deltas = Tensor::zeros(&[9, 4]);
    let props = vec![[0.0, 0.0, 10.0, 10.0]; 3];
    let probs = softmax_rows(&logits);
    assert!(probs.iter().flatten().all(|&p| (p - 0.25).abs() < 1e-15));
    assert!(decode_detections(&logits, &deltas, &props, &[0, 1, 2], (64, 64), 0.5).unwrap().is_empty());
}

#[test]
fn dominant_logit_selects_its_class_and_zero_deltas_keep_the_proposal() {
    let logits = Tensor::new(vec![2, 3], vec![9.0, 0.0, 0.0, 0.0, 0.0, 9.0]).unwrap();
    let deltas = Tensor::zeros(&[4, 4]);
    let props = vec![[4.0, 6.0, 20.0, 30.0], [1.0, 1.0, 9.0, 9.0]];
    let dets = decode_detections(&logits, &deltas, &props, &[3, 7], (64, 64), 0.05).unwrap();
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0].class_id, 3);
    for (a, b) in dets[0].bbox.iter().zip(&props[0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn winning_class_is_shift_invariant() {
    let mut rng = seeded(5);
    for _ in 0..200 {
        let mut logits = Tensor::randn(&[1, 4], 3.0, &mut rng);
        let deltas = Tensor::zeros(&[3, 4]);
        let props = [[2.0, 2.0, 30.0, 30.0]];
        let before = decode_detections(&logits, &deltas, &props, &[0, 1, 2], (64, 64), 0.0).unwrap();
        let shift = rng.random_range(-20.0..20.0);
        logits.data_mut().iter_mut().for_each(|v| *v += shift);
        let after = decode_detections(&logits, &deltas, &props, &[0, 1, 2], (64, 64), 0.0).unwrap();
        assert_eq!(before.len(), after.len());
        if let (Some(a), Some(b)) = (before.first(), after.first()) {
            assert_eq!(a.class_id, b.class_id);
        }
    }
}

#[test]
fn score_threshold_outside_unit_interval_is_an_error() {
    let logits = Tensor::zeros(&[1, 2]);
    let deltas = Tensor::zeros(&[1, 4]);
    assert!(decode_detections(&logits, &deltas, &[[0.0, 0.0, 4.0, 4.0]], &[0], (8, 8), 1.0).is_err());
}

fn param_grads_are_zero(g: &Graph, model: &AfdNet, p: &afdnet::params::Bound, prefixes: &[&str]) -> usize {
    let mut checked = 0;
    for (id, name, _) in model.store.iter() {
        if prefixes.iter().any(|pre| name.starts_with(pre)) {
            if let Some(grad) = g.grad(p[id]) {
                assert!(grad.data().iter().all(|&v| v == 0.0), "{name} received a gradient");
            }
            checked += 1;
        }
    }
    checked
}

#[test]
fn task_losses_do_not_reach_the_other_task() {
    let world = WorldConfig::default();
    let split = make_split(world.num_classes, world.num_novel, 0).unwrap();
    let model = AfdNet::new(&ModelConfig::default(), &world, 0).unwrap();
    let req = EpisodeRequest { phase: Phase::Base, split: &split, m: 3, k: 2, world: &world, pool: None };
    let episode = build_episode(&req, 0, &mut stream(0, "e", 0)).unwrap();
    let reg_side = ["dqe.reg.", "dag.reg.", "head.reg.", "meta.reg."];
    let cls_side = ["dqe.cls.", "dag.cls.", "head.cls.", "head.background_logit", "meta.cls."];
    let pick_cls = |r: &afdnet::losses::LossReport| -> Vec<Var> { vec![r.rcnn_cls, r.meta_cls.unwrap()] };
    let pick_reg = |r: &afdnet::losses::LossReport| -> Vec<Var> { vec![r.rcnn_reg, r.meta_reg.unwrap()] };
    for (pick, other, own) in [(pick_cls as fn(&_) -> Vec<Var>, &reg_side[..], &cls_side[..]), (pick_reg, &cls_side[..], &reg_side[..])] {
        let mut g = Graph::new();
        let p = model.bind_all(&mut g);
        let out = model.forward_train(&mut g, &p, &episode, None, &mut seeded(1)).unwrap();
        let terms = pick(&out.report);
        let loss = g.add(terms[0], terms[1]).unwrap();
        g.backward(loss).unwrap();
        assert!(param_grads_are_zero(&g, &model, &p, other) >= 8);
        let reached = model
            .store
            .iter()
            .filter(|(_, n, _)| own.iter().any(|pre| n.starts_with(pre)))
            .any(|(id, _, _)| g.grad(p[id]).is_some_and(|t| t.data().iter().any(|&v| v != 0.0)));
        assert!(reached, "loss does not reach its own branch");
    }
}
