use std::collections::BTreeSet;

use afdnet::episodes::*;
use afdnet::geometry::iou;
use afdnet::rng::{seeded, stream};
use afdnet::tensor::Tensor;

/// Tight box of pixels whose brightest channel clearly exceeds the noise floor.
fn measure_box(image: &Tensor, region: [usize; 4]) -> Option<[f64; 4]> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let d = image.data();
    let mut b: Option<[f64; 4]> = None;
    for y in region[1].saturating_sub(2)..(region[3] + 2).min(h) {
        for x in region[0].saturating_sub(2)..(region[2] + 2).min(w) {
            let bright = (0..3).map(|c| d[c * plane + y * w + x]).fold(0.0, f64::max);
            if bright > 0.3 {
                let (xf, yf) = (x as f64, y as f64);
                b = Some(match b {
                    None => [xf, yf, xf + 1.0, yf + 1.0],
                    Some(c) => [c[0].min(xf), c[1].min(yf), c[2].max(xf + 1.0), c[3].max(yf + 1.0)],
                });
            }
        }
    }
    b
}

#[test]
fn splits_are_disjoint_and_cover_all_classes() {
    for seed in 0..50 {
        let s = make_split(7, 3, seed).unwrap();
        let base: BTreeSet<_> = s.base.iter().collect();
        let novel: BTreeSet<_> = s.novel.iter().collect();
        assert!(base.is_disjoint(&novel));
        assert_eq!(base.len() + novel.len(), 7);
        assert_eq!(s.all(), (0..7).collect::<Vec<_>>());
    }
}

#[test]
fn single_class_scene() {
    let scene = gen_scene(&mut seeded(3), &[0], 1, (64, 64)).unwrap();
    assert_eq!(scene.objects.len(), 1);
    assert_eq!(scene.objects[0].class_id, 0);
}

#[test]
fn scene_invariants_and_rendered_extent_match_boxes() {
    for seed in 0..200 {
        let scene = gen_scene(&mut seeded(seed), &[0, 1, 2, 3, 4], 3, (64, 64)).unwrap();
        assert!(!scene.objects.is_empty() && scene.objects.len() <= 3);
        assert!(scene.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for o in &scene.objects {
            let [x1, y1, x2, y2] = o.bbox;
            assert!(0.0 <= x1 && x1 < x2 && x2 <= 64.0 && 0.0 <= y1 && y1 < y2 && y2 <= 64.0);
            assert!(x2 - x1 >= MIN_OBJECT_SIDE as f64 && y2 - y1 >= MIN_OBJECT_SIDE as f64);
            let region = o.bbox.map(|v| v as usize);
            let measured = measure_box(&scene.image, region).expect("object is visible");
            for (m, b) in measured.iter().zip(&o.bbox) {
                assert!((m - b).abs() <= 1.0, "seed {seed}: measured {measured:?} stored {:?}", o.bbox);
            }
        }
    }
}

#[test]
fn scenes_are_deterministic() {
    let a = gen_scene(&mut seeded(11), &[1, 2], 3, (64, 64)).unwrap();
    let b = gen_scene(&mut seeded(11), &[1, 2], 3, (64, 64)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn full_frame_object_gives_all_ones_mask() {
    let scene = Scene {
        image: Tensor::full(&[3, 64, 64], 0.5),
        objects: vec![SceneObject { class_id: 2, bbox: [0.0, 0.0, 64.0, 64.0] }],
    };
    let s = render_support(&scene, 0, (32, 32)).unwrap();
    assert!(s.image_with_mask.data()[3 * 1024..].iter().all(|&v| v == 1.0));
    assert_eq!(s.class_id, 2);
}

#[test]
fn support_masks_match_boxes() {
    for seed in 0..200 {
        let mut r = seeded(seed);
        let scene = gen_scene(&mut r, &[0, 1, 2, 3, 4], 3, (64, 64)).unwrap();
        for (i, o) in scene.objects.iter().enumerate() {
            let s = render_support(&scene, i, (32, 32)).unwrap();
            assert_eq!(s.class_id, o.class_id);
            let mask = &s.image_with_mask.data()[3 * 1024..];
            assert!(mask.iter().all(|&v| v == 0.0 || v == 1.0));
            let scaled = o.bbox.map(|v| v / 2.0);
            let area = (scaled[2] - scaled[0]) * (scaled[3] - scaled[1]);
            let perimeter = 2.0 * ((scaled[2] - scaled[0]) + (scaled[3] - scaled[1]));
            let sum: f64 = mask.iter().sum();
            assert!((sum - area).abs() <= perimeter, "mask sum {sum} vs area {area}");
            let mb = mask_bbox(&s).unwrap();
            assert!(iou(&mb, &scaled).unwrap() >= 0.95, "{mb:?} vs {scaled:?}");
        }
    }
}

#[test]
fn bad_object_index_is_an_error() {
    let scene = gen_scene(&mut seeded(0), &[0], 1, (64, 64)).unwrap();
    assert!(matches!(render_support(&scene, 5, (32, 32)), Err(EpisodeError::BadObjectIndex { index: 5, .. })));
}

#[test]
fn base_episode_with_many_shots() {
    let split = make_split(5, 2, 7).unwrap();
    let world = WorldConfig::default();
    let req = EpisodeRequest { phase: Phase::Base, split: &split, m: 3, k: 200, world: &world, pool: None };
    let ep = build_episode(&req, 0, &mut seeded(1)).unwrap();
    assert_eq!(ep.support.len(), 3);
    for (cluster, &c) in ep.support.iter().zip(&ep.class_list) {
        assert_eq!(cluster.len(), 200);
        assert!(split.base.contains(&c));
        assert!(cluster.iter().all(|s| s.class_id == c));
    }
}

#[test]
fn finetune_episode_covers_all_classes() {
    let split = make_split(5, 2, 7).unwrap();
    let world = WorldConfig::default();
    let req = EpisodeRequest { phase: Phase::Finetune, split: &split, m: 5, k: 1, world: &world, pool: None };
    let ep = build_episode(&req, 3, &mut seeded(2)).unwrap();
    assert_eq!(ep.support.len(), 5);
    assert!(ep.support.iter().all(|c| c.len() == 1));
    let mut classes = ep.class_list.clone();
    classes.sort_unstable();
    assert_eq!(classes, split.all());
}

#[test]
fn too_many_classes_is_an_error() {
    let split = make_split(5, 2, 7).unwrap();
    let world = WorldConfig::default();
    let req = EpisodeRequest { phase: Phase::Base, split: &split, m: 4, k: 1, world: &world, pool: None };
    assert!(matches!(build_episode(&req, 0, &mut seeded(0)), Err(EpisodeError::NotEnoughClasses { .. })));
}

#[test]
fn query_classes_always_in_class_list() {
    let split = make_split(5, 2, 3).unwrap();
    let world = WorldConfig::default();
    for (phase, m) in [(Phase::Base, 3), (Phase::Finetune, 5)] {
        let req = EpisodeRequest { phase, split: &split, m, k: 1, world: &world, pool: None };
        for i in 0..500 {
            let ep = build_episode(&req, i, &mut stream(9, "t", i as u64)).unwrap();
            assert!(ep.query.objects.iter().all(|o| ep.class_list.contains(&o.class_id)));
        }
    }
}

#[test]
fn finetune_queries_alternate_base_and_novel() {
    let split = make_split(5, 2, 3).unwrap();
    let world = WorldConfig::default();
    let req = EpisodeRequest { phase: Phase::Finetune, split: &split, m: 5, k: 1, world: &world, pool: None };
    for i in 0..40 {
        let ep = build_episode(&req, i, &mut stream(1, "alt", i as u64)).unwrap();
        let side = if i % 2 == 0 { &split.base } else { &split.novel };
        assert!(ep.query.objects.iter().all(|o| side.contains(&o.class_id)));
    }
}

#[test]
fn fixed_pool_supplies_every_finetune_support() {
    let split = make_split(5, 2, 3).unwrap();
    let world = WorldConfig::default();
    let pool = SupportPool::sample(&split.all(), 2, &world, &mut seeded(4)).unwrap();
    let req = EpisodeRequest { phase: Phase::Finetune, split: &split, m: 5, k: 2, world: &world, pool: Some(&pool) };
    for i in 0..20 {
        let ep = build_episode(&req, i, &mut stream(2, "pool", i as u64)).unwrap();
        for (cluster, c) in ep.support.iter().zip(&ep.class_list) {
            assert_eq!(cluster, &pool.images[c]);
        }
    }
}

#[test]
fn episode_stream_is_reproducible() {
    let split = make_split(5, 2, 3).unwrap();
    let world = WorldConfig::default();
    let req = EpisodeRequest { phase: Phase::Base, split: &split, m: 3, k: 2, world: &world, pool: None };
    let a = build_episode(&req, 4, &mut stream(5, "e", 4)).unwrap();
    let b = build_episode(&req, 4, &mut stream(5, "e", 4)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn scene_cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scenes: Vec<Scene> = (0..5).map(|i| gen_scene(&mut seeded(i), &[0, 1, 2], 3, (64, 64)).unwrap()).collect();
    save_scene_cache(dir.path(), &scenes).unwrap();
    let index = std::fs::read_to_string(dir.path().join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 5);
    assert_eq!(load_scene_cache(dir.path()).unwrap(), scenes);
}
