use afdnet::dualheads::*;
use afdnet::params::{Bound, ParamStore};
use afdnet::perception::FEATURE_CHANNELS;
use afdnet::rng::seeded;
use afdnet::tensor::{Graph, Tensor, Var};

const POOL: usize = 4;

struct Fixture {
    store: ParamStore,
    weights: FusionWeights,
    dqe: DualEncoder,
    dag: DualEncoder,
}

fn fixture(paths: FusionPaths, seed: u64) -> Fixture {
    let mut store = ParamStore::new();
    let mut rng = seeded(seed);
    let weights = FusionWeights::new(&mut store);
    let dqe = DualEncoder::new(&mut store, "dqe", &paths, POOL, &mut rng);
    let dag = DualEncoder::new(&mut store, "dag", &paths, POOL, &mut rng);
    Fixture { store, weights, dqe, dag }
}

fn patches(n: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, FEATURE_CHANNELS, POOL, POOL], 1.0, &mut seeded(seed))
}

#[test]
fn lambdas_start_at_exactly_one() {
    let f = fixture(FusionPaths::default(), 0);
    assert_eq!(f.weights.values(&f.store), [1.0; 4]);
    for name in LAMBDA_NAMES {
        let t = f.store.get(f.store.id(name).unwrap());
        assert_eq!(t.shape(), [1]);
        assert_eq!(t.data()[0].to_bits(), 1.0f64.to_bits());
    }
}

#[test]
fn fuse_at_unit_weights_is_plain_concatenation() {
    let mut rng = seeded(1);
    let conv = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let fc = Tensor::randn(&[3, 7], 1.0, &mut rng);
    let mut g = Graph::new();
    let (c, f) = (g.constant(conv.clone()), g.constant(fc.clone()));
    let one_a = g.constant(Tensor::scalar(1.0));
    let one_b = g.constant(Tensor::scalar(1.0));
    let out = afm_fuse(&mut g, Some(c), Some(f), (one_a, one_b)).unwrap();
    assert_eq!(g.shape(out), [3, 12]);
    let v = g.value(out).data();
    for r in 0..3 {
        for k in 0..5 {
            assert_eq!(v[r * 12 + k].to_bits(), conv.data()[r * 5 + k].to_bits());
        }
        for k in 0..7 {
            assert_eq!(v[r * 12 + 5 + k].to_bits(), fc.data()[r * 7 + k].to_bits());
        }
    }
}

#[test]
fn zero_conv_weight_annihilates_conv_channels() {
    let mut rng = seeded(2);
    let mut g = Graph::new();
    let c = g.constant(Tensor::randn(&[2, 4], 1.0, &mut rng));
    let f = g.constant(Tensor::randn(&[2, 3], 1.0, &mut rng));
    let zero = g.constant(Tensor::scalar(0.0));
    let one = g.constant(Tensor::scalar(1.0));
    let out = afm_fuse(&mut g, Some(c), Some(f), (zero, one)).unwrap();
    let v = g.value(out).data();
    for r in 0..2 {
        assert!(v[r * 7..r * 7 + 4].iter().all(|&x| x == 0.0));
        assert!(v[r * 7 + 4..r * 7 + 7].iter().all(|&x| x != 0.0));
    }
}

#[test]
fn fc_weight_gradient_is_sum_of_fc_features() {
    let mut rng = seeded(3);
    let conv = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let fc = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let fused_sum = |lc: f64, lf: f64| {
        let mut g = Graph::new();
        let (c, f) = (g.constant(conv.clone()), g.constant(fc.clone()));
        let a = g.leaf(Tensor::scalar(lc), true);
        let b = g.leaf(Tensor::scalar(lf), true);
        let out = afm_fuse(&mut g, Some(c), Some(f), (a, b)).unwrap();
        let s = g.sum(out).unwrap();
        g.backward(s).unwrap();
        (g.value(s).data()[0], g.grad(a).unwrap().data()[0], g.grad(b).unwrap().data()[0])
    };
    let (_, d_conv, d_fc) = fused_sum(0.7, 1.3);
    assert!((d_fc - fc.sum()).abs() <= 1e-12);
    assert!((d_conv - conv.sum()).abs() <= 1e-12);
    let eps = 1e-5;
    let numeric = (fused_sum(0.7, 1.3 + eps).0 - fused_sum(0.7, 1.3 - eps).0) / (2.0 * eps);
    assert!((numeric - d_fc).abs() <= 1e-6 * d_fc.abs().max(1.0));
}

#[test]
fn one_vector_pair_per_patch() {
    let f = fixture(FusionPaths::default(), 4);
    let mut g = Graph::new();
    let p = f.store.bind(&mut g, |_| false);
    let x = g.constant(patches(7, 5));
    let v = f.dqe.encode(&mut g, &p, &f.weights, x).unwrap();
    assert_eq!(g.shape(v.cls), [7, CONV_DIM + FC_DIM]);
    assert_eq!(g.shape(v.reg), [7, CONV_DIM + FC_DIM]);
}

#[test]
fn disabled_path_leaves_only_the_other_channels() {
    let paths = FusionPaths { cls_fc: false, reg_conv: false, ..Default::default() };
    let f = fixture(paths, 6);
    assert_eq!(paths.dim(Task::Cls), CONV_DIM);
    assert_eq!(paths.dim(Task::Reg), FC_DIM);
    let mut g = Graph::new();
    let p = f.store.bind(&mut g, |_| false);
    let x = g.constant(patches(3, 7));
    let v = f.dqe.encode(&mut g, &p, &f.weights, x).unwrap();
    assert_eq!(g.shape(v.cls), [3, CONV_DIM]);
    assert_eq!(g.shape(v.reg), [3, FC_DIM]);
}

#[test]
fn zero_patch_gives_the_same_bias_response_every_call() {
    let f = fixture(FusionPaths::default(), 8);
    let run = || {
        let mut g = Graph::new();
        let p = f.store.bind(&mut g, |_| false);
        let x = g.constant(Tensor::zeros(&[2, FEATURE_CHANNELS, POOL, POOL]));
        let v = f.dqe.encode(&mut g, &p, &f.weights, x).unwrap();
        (g.value(v.cls).clone(), g.value(v.reg).clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    // biases start at zero, so the response is zero
    assert!(a.0.data().iter().chain(a.1.data()).all(|&v| v == 0.0));
}

#[test]
fn attention_has_one_vector_per_class() {
    let f = fixture(FusionPaths::default(), 9);
    let mut g = Graph::new();
    let p = f.store.bind(&mut g, |_| false);
    let x = g.constant(patches(2 + 3 + 1, 10));
    let att = dag_encode(&mut g, &p, &f.dag, &f.weights, x, &[2, 3, 1]).unwrap();
    assert_eq!(g.shape(att.per_class.cls)[0], 3);
    assert_eq!(g.shape(att.per_class.reg)[0], 3);
    assert_eq!(g.shape(att.per_support.cls)[0], 6);
}

#[test]
fn identical_supports_average_to_the_single_vector() {
    let f = fixture(FusionPaths::default(), 11);
    let one = patches(1, 12);
    let mut five = Vec::new();
    for _ in 0..5 {
        five.extend_from_slice(one.data());
    }
    let five = Tensor::new(vec![5, FEATURE_CHANNELS, POOL, POOL], five).unwrap();

    let mut g = Graph::new();
    let p = f.store.bind(&mut g, |_| false);
    let x1 = g.constant(one);
    let x5 = g.constant(five);
    let single = dag_encode(&mut g, &p, &f.dag, &f.weights, x1, &[1]).unwrap();
    let avg = dag_encode(&mut g, &p, &f.dag, &f.weights, x5, &[5]).unwrap();
    for t in Task::BOTH {
        let d = g.value(single.per_class.get(t)).max_abs_diff(g.value(avg.per_class.get(t))).unwrap();
        assert!(d <= 1e-12, "{t:?}: {d}");
    }
}

#[test]
fn empty_support_cluster_is_an_error() {
    let f = fixture(FusionPaths::default(), 13);
    let mut g = Graph::new();
    let p = f.store.bind(&mut g, |_| false);
    let x = g.constant(patches(2, 14));
    assert!(dag_encode(&mut g, &p, &f.dag, &f.weights, x, &[2, 0]).is_err());
    assert!(dag_encode(&mut g, &p, &f.dag, &f.weights, x, &[]).is_err());
}

#[test]
fn attention_generator_mirrors_query_encoder_structure() {
    for paths in [
        FusionPaths::default(),
        FusionPaths { cls_conv: false, ..Default::default() },
        FusionPaths { reg_fc: false, ..Default::default() },
    ] {
        let f = fixture(paths, 15);
        for t in Task::BOTH {
            assert_eq!(f.dqe.task(t).layer_shapes(&f.store), f.dag.task(t).layer_shapes(&f.store));
        }
        let dqe_ids: Vec<_> = f.store.iter().filter(|(_, n, _)| n.starts_with("dqe.")).map(|(id, _, _)| id).collect();
        let dag_ids: Vec<_> = f.store.iter().filter(|(_, n, _)| n.starts_with("dag.")).map(|(id, _, _)| id).collect();
        assert_eq!(dqe_ids.len(), dag_ids.len());
        assert!(dqe_ids.iter().all(|id| !dag_ids.contains(id)));
    }
}

/// λ gradients of `c_q * sum(dqe) + c_s * sum(dag)` over both tasks.
fn lambda_grads(f: &Fixture, c_q: f64, c_s: f64) -> [f64; 4] {
    let mut g = Graph::new();
    let p: Bound = f.store.bind(&mut g, |_| true);
    let q = g.constant(patches(3, 20));
    let s = g.constant(patches(4, 21));
    let rois = f.dqe.encode(&mut g, &p, &f.weights, q).unwrap();
    let att = dag_encode(&mut g, &p, &f.dag, &f.weights, s, &[2, 2]).unwrap();
    let mut terms: Vec<Var> = Vec::new();
    for (v, c) in [(rois.cls, c_q), (rois.reg, c_q), (att.per_class.cls, c_s), (att.per_class.reg, c_s)] {
        let s = g.sum(v).unwrap();
        terms.push(g.scale(s, c).unwrap());
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = g.add(loss, t).unwrap();
    }
    g.backward(loss).unwrap();
    [f.weights.cls_conv, f.weights.cls_fc, f.weights.reg_conv, f.weights.reg_fc]
        .map(|id| g.grad(p[id]).unwrap().data()[0])
}

#[test]
fn shared_lambdas_accumulate_both_encoders() {
    let f = fixture(FusionPaths::default(), 16);
    let both = lambda_grads(&f, 1.0, 1.0);
    let query_only = lambda_grads(&f, 1.0, 0.0);
    let support_only = lambda_grads(&f, 0.0, 1.0);
    for k in 0..4 {
        assert!((both[k] - (query_only[k] + support_only[k])).abs() <= 1e-9 * both[k].abs().max(1.0));
        assert!((both[k] - query_only[k]).abs() > 1e-6, "support branch has no effect on λ {k}");
        assert!((both[k] - support_only[k]).abs() > 1e-6, "query branch has no effect on λ {k}");
    }
}

#[test]
fn both_encoders_read_one_lambda_node() {
    let f = fixture(FusionPaths::default(), 17);
    let mut g = Graph::new();
    let p = f.store.bind(&mut g, |_| true);
    let before = g.len();
    let s = g.constant(patches(2, 22));
    let att = dag_encode(&mut g, &p, &f.dag, &f.weights, s, &[2]).unwrap();
    let loss = g.sum(att.per_class.cls).unwrap();
    g.backward(loss).unwrap();
    let lam = p[f.weights.cls_conv];
    assert!(lam.index() < before, "λ must be a bound leaf, not a copy");
    let grad = g.grad(lam).unwrap().data()[0];
    assert!(grad != 0.0);
}
