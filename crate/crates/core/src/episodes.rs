//! Synthetic shapes world and meta-learning task assembly.
//!
//! A class id fixes both the shape kind and the color family of an object.
//! Scenes are rendered on a low-amplitude noise background; support images are
//! downscaled scenes with a fourth channel marking exactly one object.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{self, ArchiveError};
use crate::geometry::BBox;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Smallest object side, in pixels.
pub const MIN_OBJECT_SIDE: usize = 8;
/// Amplitude of the uniform background noise.
pub const BACKGROUND_NOISE: f64 = 0.1;
/// Default number of fine-tune shots considered standard.
pub const STANDARD_SHOTS: [usize; 5] = [1, 2, 3, 5, 10];

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("empty class pool")]
    EmptyPool,
    #[error("max_objects must be at least 1")]
    NoObjects,
    #[error("image size {0}x{1} is too small to place a shape")]
    TooSmall(usize, usize),
    #[error("object index {index} out of range for scene with {count} objects")]
    BadObjectIndex { index: usize, count: usize },
    #[error("episode needs {needed} classes but only {available} are available in this phase")]
    NotEnoughClasses { needed: usize, available: usize },
    #[error("support pool has {have} images of class {class}, episode needs {need}")]
    PoolTooSmall { class: usize, have: usize, need: usize },
    #[error("K must be at least 1")]
    ZeroShots,
    #[error("scene cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

impl ClassSplit {
    pub fn num_classes(&self) -> usize {
        self.base.len() + self.novel.len()
    }

    pub fn all(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.base.iter().chain(&self.novel).copied().collect();
        all.sort_unstable();
        all
    }
}

/// Picks `num_novel` of `num_classes` ids as novel; the rest are base.
pub fn make_split(num_classes: usize, num_novel: usize, seed: u64) -> Result<ClassSplit, EpisodeError> {
    if num_novel == 0 || num_novel >= num_classes {
        return Err(EpisodeError::InvalidSplit(format!(
            "need 1 <= num_novel < num_classes, got {num_novel} of {num_classes}"
        )));
    }
    let mut ids: Vec<usize> = (0..num_classes).collect();
    ids.shuffle(&mut rng::stream(seed, "split", 0));
    let mut novel = ids[..num_novel].to_vec();
    let mut base = ids[num_novel..].to_vec();
    novel.sort_unstable();
    base.sort_unstable();
    Ok(ClassSplit { base, novel })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class_id: usize,
    /// Integer pixel box, tight to the rendered shape.
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl ShapeKind {
    pub fn of_class(class_id: usize) -> Self {
        match class_id % 5 {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            2 => ShapeKind::Triangle,
            3 => ShapeKind::Cross,
            _ => ShapeKind::Ring,
        }
    }

    /// Whether the pixel at column `px`, row `py` of a `w x h` box is covered.
    /// Every shape touches all four sides of its box.
    pub fn covers(self, px: usize, py: usize, w: usize, h: usize) -> bool {
        let u = (px as f64 + 0.5) / w as f64;
        let v = (py as f64 + 0.5) / h as f64;
        let (du, dv) = (u - 0.5, v - 0.5);
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => du * du + dv * dv <= 0.25,
            ShapeKind::Ring => {
                let r2 = du * du + dv * dv;
                (0.09..=0.25).contains(&r2)
            }
            // apex at the top center, base along the bottom edge
            ShapeKind::Triangle => du.abs() <= v / 2.0 + 0.5 / w as f64,
            ShapeKind::Cross => du.abs() <= 1.0 / 6.0 || dv.abs() <= 1.0 / 6.0,
        }
    }
}

/// RGB color family of a class.
pub fn class_color(class_id: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 5] = [
        [0.95, 0.25, 0.2],
        [0.25, 0.85, 0.3],
        [0.3, 0.4, 0.95],
        [0.95, 0.85, 0.25],
        [0.85, 0.3, 0.9],
    ];
    if class_id < PALETTE.len() {
        return PALETTE[class_id];
    }
    // further classes: golden-ratio hue walk at fixed saturation/value
    let hue = (class_id as f64 * 0.618_033_988_75).fract();
    hsv_to_rgb(hue, 0.7, 0.9)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Object side range `(min, max)` for an image of the given size; both even.
fn side_range(height: usize, width: usize) -> Result<(usize, usize), EpisodeError> {
    let short = height.min(width);
    if short < MIN_OBJECT_SIDE {
        return Err(EpisodeError::TooSmall(height, width));
    }
    let even = |v: usize| v & !1;
    let lo = even(short / 5).max(MIN_OBJECT_SIDE);
    let hi = even((short as f64 * 0.45) as usize).max(lo).min(even(short));
    Ok((lo, hi))
}

fn random_even(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + 2 * rng.random_range(0..=(hi - lo) / 2)
}

/// Renders a scene with `1..=max_objects` non-overlapping shapes drawn from `class_pool`.
///
/// Boxes lie on the even pixel grid and are separated by at least two pixels,
/// so every stored box is exactly the extent of its rendered shape.
pub fn gen_scene(rng: &mut Rng, class_pool: &[usize], max_objects: usize, size: (usize, usize)) -> Result<Scene, EpisodeError> {
    if class_pool.is_empty() {
        return Err(EpisodeError::EmptyPool);
    }
    if max_objects == 0 {
        return Err(EpisodeError::NoObjects);
    }
    let (height, width) = size;
    let (lo, hi) = side_range(height, width)?;

    let count = rng.random_range(1..=max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = *class_pool.choose(rng).expect("non-empty pool");
        for _attempt in 0..64 {
            let w = random_even(rng, lo, hi);
            let h = (w as isize + 2 * rng.random_range(-2..=2i64) as isize).clamp(lo as isize, hi as isize) as usize;
            let x1 = 2 * rng.random_range(0..=(width - w) / 2);
            let y1 = 2 * rng.random_range(0..=(height - h) / 2);
            let bbox = [x1 as f64, y1 as f64, (x1 + w) as f64, (y1 + h) as f64];
            let clear = objects.iter().all(|o| {
                let b = &o.bbox;
                bbox[0] >= b[2] + 2.0 || b[0] >= bbox[2] + 2.0 || bbox[1] >= b[3] + 2.0 || b[1] >= bbox[3] + 2.0
            });
            if clear {
                objects.push(SceneObject { class_id, bbox });
                break;
            }
        }
    }

    let plane = height * width;
    let mut data = vec![0.0; 3 * plane];
    for v in data.iter_mut() {
        *v = rng.random_range(0.0..BACKGROUND_NOISE);
    }
    for obj in &objects {
        let base = class_color(obj.class_id);
        let tint: [f64; 3] = std::array::from_fn(|c| (base[c] + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0));
        let kind = ShapeKind::of_class(obj.class_id);
        let [x1, y1, x2, y2] = obj.bbox.map(|v| v as usize);
        let (w, h) = (x2 - x1, y2 - y1);
        for py in 0..h {
            for px in 0..w {
                if !kind.covers(px, py, w, h) {
                    continue;
                }
                let at = (y1 + py) * width + x1 + px;
                for (c, &t) in tint.iter().enumerate() {
                    data[c * plane + at] = (t + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(Scene { image: Tensor::new(vec![3, height, width], data).expect("consistent shape"), objects })
}

/// Bilinear resize of a `[C, H, W]` image with half-pixel centers.
/// An exact 2x reduction averages each 2x2 block.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = vec![0.0; c * out_h * out_w];
    for oy in 0..out_h {
        let y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ly = y - y0 as f64;
        for ox in 0..out_w {
            let x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let lx = x - x0 as f64;
            for ch in 0..c {
                let p = |yy: usize, xx: usize| image.data()[(ch * h + yy) * w + xx];
                let top = p(y0, x0) * (1.0 - lx) + p(y0, x1) * lx;
                let bottom = p(y1, x0) * (1.0 - lx) + p(y1, x1) * lx;
                out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - ly) + bottom * ly;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).expect("consistent shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportImage {
    /// `[4, H_s, W_s]`: RGB plus a binary mask of the chosen object.
    pub image_with_mask: Tensor,
    pub class_id: usize,
}

/// Downscales `scene` to `target_size` and marks object `object_index` in a mask channel.
///
/// A mask pixel is set when its center lies inside the rescaled box.
pub fn render_support(scene: &Scene, object_index: usize, target_size: (usize, usize)) -> Result<SupportImage, EpisodeError> {
    let obj = scene.objects.get(object_index).ok_or(EpisodeError::BadObjectIndex {
        index: object_index,
        count: scene.objects.len(),
    })?;
    let (th, tw) = target_size;
    if th == 0 || tw == 0 {
        return Err(EpisodeError::TooSmall(th, tw));
    }
    let rgb = resize_bilinear(&scene.image, th, tw);
    let fy = th as f64 / scene.height() as f64;
    let fx = tw as f64 / scene.width() as f64;
    let [x1, y1, x2, y2] = obj.bbox;
    let (x1, x2, y1, y2) = (x1 * fx, x2 * fx, y1 * fy, y2 * fy);
    let plane = th * tw;
    let mut data = rgb.into_data();
    data.reserve(plane);
    for py in 0..th {
        let cy = py as f64 + 0.5;
        for px in 0..tw {
            let cx = px as f64 + 0.5;
            let inside = cx >= x1 && cx <= x2 && cy >= y1 && cy <= y2;
            data.push(if inside { 1.0 } else { 0.0 });
        }
    }
    Ok(SupportImage {
        image_with_mask: Tensor::new(vec![4, th, tw], data).expect("consistent shape"),
        class_id: obj.class_id,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Base,
    Finetune,
}

/// Sizes of the synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub num_novel: usize,
    pub scene_size: (usize, usize),
    pub support_size: (usize, usize),
    pub max_objects: usize,
    /// Objects in a scene a support image is cut from.
    pub support_max_objects: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            num_novel: 2,
            scene_size: (64, 64),
            support_size: (32, 32),
            max_objects: 3,
            support_max_objects: 2,
        }
    }
}

/// One support image of `class_id`, cut from a freshly generated scene.
pub fn gen_support(rng: &mut Rng, class_id: usize, world: &WorldConfig) -> Result<SupportImage, EpisodeError> {
    let scene = gen_scene(rng, &[class_id], world.support_max_objects, world.scene_size)?;
    let index = rng.random_range(0..scene.objects.len());
    render_support(&scene, index, world.support_size)
}

/// Fixed K-shot support images per class, sampled once per run.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportPool {
    pub k: usize,
    pub images: BTreeMap<usize, Vec<SupportImage>>,
}

impl SupportPool {
    pub fn sample(classes: &[usize], k: usize, world: &WorldConfig, rng: &mut Rng) -> Result<Self, EpisodeError> {
        if k == 0 {
            return Err(EpisodeError::ZeroShots);
        }
        let mut images = BTreeMap::new();
        for &c in classes {
            let shots = (0..k).map(|_| gen_support(rng, c, world)).collect::<Result<Vec<_>, _>>()?;
            images.insert(c, shots);
        }
        Ok(Self { k, images })
    }
}

/// One meta-learning task: a query scene plus `m` clusters of `K` support images.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub query: Scene,
    /// `support[j]` holds the K images of `class_list[j]`.
    pub support: Vec<Vec<SupportImage>>,
    pub class_list: Vec<usize>,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpisodeRequest<'a> {
    pub phase: Phase,
    pub split: &'a ClassSplit,
    pub m: usize,
    pub k: usize,
    pub world: &'a WorldConfig,
    /// Fixed shots; classes without an entry get fresh support images.
    pub pool: Option<&'a SupportPool>,
}

/// Builds task number `index` of a phase.
///
/// Base tasks draw `m` classes from the base set. Fine-tune tasks draw from
/// base and novel classes together, and the query scene alternates between
/// base-only and novel-only class pools on even and odd indices.
pub fn build_episode(req: &EpisodeRequest, index: usize, rng: &mut Rng) -> Result<Episode, EpisodeError> {
    if req.k == 0 {
        return Err(EpisodeError::ZeroShots);
    }
    let available = match req.phase {
        Phase::Base => req.split.base.clone(),
        Phase::Finetune => req.split.all(),
    };
    if req.m == 0 || req.m > available.len() {
        return Err(EpisodeError::NotEnoughClasses { needed: req.m, available: available.len() });
    }
    let mut class_list: Vec<usize> = available.choose_multiple(rng, req.m).copied().collect();
    class_list.shuffle(rng);

    let query_pool: Vec<usize> = match req.phase {
        Phase::Base => class_list.clone(),
        Phase::Finetune => {
            let side = if index % 2 == 0 { &req.split.base } else { &req.split.novel };
            let pool: Vec<usize> = class_list.iter().copied().filter(|c| side.contains(c)).collect();
            if pool.is_empty() {
                class_list.clone()
            } else {
                pool
            }
        }
    };
    let query = gen_scene(rng, &query_pool, req.world.max_objects, req.world.scene_size)?;

    let mut support = Vec::with_capacity(class_list.len());
    for &c in &class_list {
        let cluster = match req.pool.and_then(|p| p.images.get(&c)) {
            Some(shots) => {
                if shots.len() < req.k {
                    return Err(EpisodeError::PoolTooSmall { class: c, have: shots.len(), need: req.k });
                }
                shots[..req.k].to_vec()
            }
            None => (0..req.k).map(|_| gen_support(rng, c, req.world)).collect::<Result<_, _>>()?,
        };
        support.push(cluster);
    }
    Ok(Episode { query, support, class_list })
}

/// Bounding box of the set mask pixels of a support image, in support pixels.
pub fn mask_bbox(support: &SupportImage) -> Option<BBox> {
    let (h, w) = (support.image_with_mask.shape()[1], support.image_with_mask.shape()[2]);
    let mask = &support.image_with_mask.data()[3 * h * w..];
    let mut b: Option<BBox> = None;
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] > 0.5 {
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

const CACHE_ARCHIVE: &str = "scenes.afdn";
const CACHE_INDEX: &str = "index.csv";

/// Stores scenes in `dir` as a named-tensor archive plus a text index with one
/// line per scene: `scene_id,class_id,x1,y1,x2,y2[,class_id,x1,y1,x2,y2...]`.
pub fn save_scene_cache(dir: &Path, scenes: &[Scene]) -> Result<(), EpisodeError> {
    fs::create_dir_all(dir)?;
    let tensors: Vec<(String, Tensor)> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("scene/{i}"), s.image.clone()))
        .collect();
    archive::save(&dir.join(CACHE_ARCHIVE), &tensors)?;
    let mut index = String::new();
    for (i, s) in scenes.iter().enumerate() {
        write!(index, "{i}").unwrap();
        for o in &s.objects {
            let [x1, y1, x2, y2] = o.bbox.map(|v| v as i64);
            write!(index, ",{},{x1},{y1},{x2},{y2}", o.class_id).unwrap();
        }
        index.push('\n');
    }
    fs::write(dir.join(CACHE_INDEX), index)?;
    Ok(())
}

pub fn load_scene_cache(dir: &Path) -> Result<Vec<Scene>, EpisodeError> {
    let tensors: BTreeMap<String, Tensor> = archive::load(&dir.join(CACHE_ARCHIVE))?.into_iter().collect();
    let index = fs::read_to_string(dir.join(CACHE_INDEX))?;
    let mut scenes = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in index.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |msg: &str| EpisodeError::Cache(format!("line {}: {msg}", lineno + 1));
        let fields: Vec<i64> = line
            .split(',')
            .map(|f| f.trim().parse::<i64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad("non-integer field"))?;
        if fields.len() < 6 || (fields.len() - 1) % 5 != 0 {
            return Err(bad("expected id followed by groups of class,x1,y1,x2,y2"));
        }
        let id = fields[0];
        if !seen.insert(id) {
            return Err(bad("duplicate scene id"));
        }
        let image = tensors
            .get(&format!("scene/{id}"))
            .ok_or_else(|| bad("scene missing from archive"))?
            .clone();
        let objects = fields[1..]
            .chunks(5)
            .map(|g| SceneObject { class_id: g[0] as usize, bbox: [g[1] as f64, g[2] as f64, g[3] as f64, g[4] as f64] })
            .collect();
        scenes.push(Scene { image, objects });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_contract() {
        let s = make_split(5, 2, 7).unwrap();
        assert_eq!((s.base.len(), s.novel.len()), (3, 2));
        assert!(s.base.iter().all(|c| !s.novel.contains(c)));
        assert_eq!(s.all(), vec![0, 1, 2, 3, 4]);
        assert_eq!(make_split(5, 2, 7).unwrap(), s);
        assert!(make_split(5, 5, 1).is_err());
        assert!(make_split(5, 0, 1).is_err());
    }

    #[test]
    fn too_small_images_are_rejected() {
        let mut r = rng::seeded(1);
        assert!(matches!(gen_scene(&mut r, &[0], 1, (6, 64)), Err(EpisodeError::TooSmall(6, 64))));
        assert!(matches!(gen_scene(&mut r, &[], 1, (64, 64)), Err(EpisodeError::EmptyPool)));
    }

    #[test]
    fn exact_downscale_averages_blocks() {
        let img = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(resize_bilinear(&img, 1, 1).data(), &[1.5]);
    }
}
