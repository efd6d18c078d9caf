//! Synthetic co-salient groups and the on-disk dataset layout.
//!
//! Every image of a group holds one instance of the group's shape class at a
//! random scale, position, rotation and colour, plus distractors drawn from
//! the other classes. Masks cover only the shared instance and use hard
//! pixel-centre edges; the images themselves are rendered with 4x4
//! supersampling.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pnm;
use crate::tensorlab::Tensor;
use crate::{DcfmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Disk,
    Square,
    Triangle,
    Ring,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [ShapeClass::Disk, ShapeClass::Square, ShapeClass::Triangle, ShapeClass::Ring];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Disk => "disk",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Ring => "ring",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| DcfmError::Config(format!("unknown shape class {s:?}")))
    }

    fn index(self) -> u64 {
        Self::ALL.iter().position(|&c| c == self).expect("listed") as u64
    }
}

/// Inner radius of a ring relative to its outer radius.
pub const RING_INNER: f64 = 0.55;
/// Half side of a square relative to its radius.
pub const SQUARE_HALF: f64 = 0.85;

/// Geometry and colour of one rendered shape, in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub class: ShapeClass,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub rotation: f64,
    pub color: [f64; 3],
}

impl Placement {
    /// Whether the point `(x, y)` lies inside the shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let d2 = dx * dx + dy * dy;
        let r = self.radius;
        match self.class {
            ShapeClass::Disk => d2 <= r * r,
            ShapeClass::Ring => d2 <= r * r && d2 >= (RING_INNER * r).powi(2),
            ShapeClass::Square => {
                let (s, c) = self.rotation.sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                u.abs().max(v.abs()) <= SQUARE_HALF * r
            }
            ShapeClass::Triangle => {
                let v = self.triangle_vertices();
                (0..3).all(|i| {
                    let (a, b) = (v[i], v[(i + 1) % 3]);
                    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0) >= 0.0
                })
            }
        }
    }

    /// Vertices on the circumscribed circle, counter-clockwise in image
    /// coordinates (y down), so inside points sit on the non-negative side
    /// of every edge.
    pub fn triangle_vertices(&self) -> [(f64, f64); 3] {
        std::array::from_fn(|k| {
            let a = self.rotation + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
            (self.cx + self.radius * a.cos(), self.cy + self.radius * a.sin())
        })
    }

    /// Hard mask `[1,size,size]` sampled at pixel centres.
    pub fn rasterize(&self, size: usize) -> Tensor {
        Tensor::from_fn(&[1, size, size], |i| {
            let (y, x) = (i / size, i % size);
            self.contains(x as f64 + 0.5, y as f64 + 0.5) as u8 as f64
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub group_size: usize,
    pub image_size: usize,
    pub classes: Vec<ShapeClass>,
    /// Inclusive range of distractors per image.
    pub distractors: (usize, usize),
    /// Shape radius as a fraction of the image side.
    pub radius_range: (f64, f64),
    /// Amplitude of uniform background noise.
    pub noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            image_size: 64,
            classes: ShapeClass::ALL.to_vec(),
            distractors: (0, 2),
            radius_range: (0.14, 0.24),
            noise: 0.03,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(DcfmError::Config(format!("group size must be at least 2, got {}", self.group_size)));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return Err(DcfmError::Config(format!(
                "image size must be a positive multiple of 16, got {}",
                self.image_size
            )));
        }
        if self.classes.is_empty() {
            return Err(DcfmError::Config("no shape classes configured".into()));
        }
        if self.distractors.0 > self.distractors.1 {
            return Err(DcfmError::Config(format!("bad distractor range {:?}", self.distractors)));
        }
        let (lo, hi) = self.radius_range;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return Err(DcfmError::Config(format!("bad radius range {:?}", self.radius_range)));
        }
        Ok(())
    }
}

/// One co-salient group: images `[3,H,W]`, masks `[1,H,W]` and the
/// placements they were rendered from.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSample {
    pub group_id: String,
    pub class: ShapeClass,
    pub images: Vec<Tensor>,
    pub masks: Vec<Tensor>,
    pub targets: Vec<Placement>,
    pub distractors: Vec<Vec<Placement>>,
}

impl GroupSample {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[N,3,H,W]`
    pub fn image_batch(&self) -> Tensor {
        Tensor::stack(&self.images).expect("equal image shapes")
    }

    /// `[N,1,H,W]`
    pub fn mask_batch(&self) -> Tensor {
        Tensor::stack(&self.masks).expect("equal mask shapes")
    }
}

fn random_placement(rng: &mut ChaCha8Rng, cfg: &GenConfig, class: ShapeClass, background: [f64; 3]) -> Placement {
    let size = cfg.image_size as f64;
    let radius = rng.gen_range(cfg.radius_range.0..=cfg.radius_range.1) * size;
    let margin = radius + 1.0;
    let color = loop {
        let c: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let contrast = c.iter().zip(&background).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if contrast >= 0.4 {
            break c;
        }
    };
    Placement {
        class,
        cx: rng.gen_range(margin..size - margin),
        cy: rng.gen_range(margin..size - margin),
        radius,
        rotation: rng.gen_range(0.0..std::f64::consts::TAU),
        color,
    }
}

fn disjoint(a: &Placement, b: &Placement) -> bool {
    let d = ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt();
    d >= a.radius + b.radius + 2.0
}

const SUPERSAMPLE: usize = 4;

fn render(rng: &mut ChaCha8Rng, cfg: &GenConfig, bg: ([f64; 3], [f64; 3]), shapes: &[Placement]) -> Tensor {
    let size = cfg.image_size;
    let plane = size * size;
    let mut img = Tensor::zeros(&[3, size, size]);
    let d = img.data_mut();
    for y in 0..size {
        for x in 0..size {
            let t = (x + y) as f64 / (2 * size - 2).max(1) as f64;
            let mut px: [f64; 3] = std::array::from_fn(|c| bg.0[c] * (1.0 - t) + bg.1[c] * t);
            for shape in shapes {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let fx = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let fy = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        hits += shape.contains(fx, fy) as usize;
                    }
                }
                let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - cover) + shape.color[c] * cover;
                }
            }
            for c in 0..3 {
                let noise = rng.gen_range(-cfg.noise..=cfg.noise);
                d[c * plane + y * size + x] = (px[c] + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Render a group. Deterministic in `(cfg, class, seed)`.
pub fn generate_group(cfg: &GenConfig, class: ShapeClass, seed: u64) -> Result<GroupSample> {
    cfg.validate()?;
    if !cfg.classes.contains(&class) {
        return Err(DcfmError::Config(format!("shape class {} not enabled", class.name())));
    }
    let others: Vec<ShapeClass> = cfg.classes.iter().copied().filter(|&c| c != class).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(4).wrapping_add(class.index()));
    let mut sample = GroupSample {
        group_id: format!("{}_{seed:06}", class.name()),
        class,
        images: Vec::with_capacity(cfg.group_size),
        masks: Vec::with_capacity(cfg.group_size),
        targets: Vec::with_capacity(cfg.group_size),
        distractors: Vec::with_capacity(cfg.group_size),
    };
    for _ in 0..cfg.group_size {
        let bg0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.35));
        let bg1: [f64; 3] = std::array::from_fn(|c| (bg0[c] + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0));
        let mean_bg: [f64; 3] = std::array::from_fn(|c| 0.5 * (bg0[c] + bg1[c]));
        let target = random_placement(&mut rng, cfg, class, mean_bg);
        let count = rng.gen_range(cfg.distractors.0..=cfg.distractors.1);
        let mut distractors: Vec<Placement> = Vec::with_capacity(count);
        if !others.is_empty() {
            for _ in 0..count {
                for _attempt in 0..100 {
                    let other = *others.choose(&mut rng).expect("non-empty");
                    let p = random_placement(&mut rng, cfg, other, mean_bg);
                    if disjoint(&p, &target) && distractors.iter().all(|q| disjoint(&p, q)) {
                        distractors.push(p);
                        break;
                    }
                }
            }
        }
        let mut shapes = distractors.clone();
        shapes.push(target);
        sample.images.push(render(&mut rng, cfg, (bg0, bg1), &shapes));
        sample.masks.push(target.rasterize(cfg.image_size));
        sample.targets.push(target);
        sample.distractors.push(distractors);
    }
    Ok(sample)
}

/// Training seeds stay below this; validation seeds start here.
pub const VALIDATION_SEED_BASE: u64 = 1 << 40;

/// Group ids of one epoch in shuffled order as `(class, seed)`.
///
/// Id `i` always has class `classes[i % len]`, so every class appears equally
/// often when `groups_per_epoch` is a multiple of the class count.
pub fn epoch_plan(classes: &[ShapeClass], groups_per_epoch: usize, epoch: usize, rng: &mut impl Rng) -> Vec<(ShapeClass, u64)> {
    let mut ids: Vec<usize> = (0..groups_per_epoch).collect();
    ids.shuffle(rng);
    ids.into_iter()
        .map(|i| (classes[i % classes.len()], (epoch * groups_per_epoch + i) as u64))
        .collect()
}

/// Class-balanced held-out groups from the validation seed range.
pub fn validation_groups(cfg: &GenConfig, count: usize) -> Result<Vec<GroupSample>> {
    (0..count)
        .map(|i| generate_group(cfg, cfg.classes[i % cfg.classes.len()], VALIDATION_SEED_BASE + i as u64))
        .collect()
}

/// Write groups as `<root>/<group_id>/<idx>.ppm` and `<idx>_gt.pgm`.
pub fn write_dataset(root: &Path, groups: &[GroupSample]) -> Result<()> {
    for g in groups {
        let dir = root.join(&g.group_id);
        std::fs::create_dir_all(&dir).map_err(|e| DcfmError::io(&dir, e))?;
        for (i, (img, mask)) in g.images.iter().zip(&g.masks).enumerate() {
            pnm::write_ppm(&dir.join(format!("{i:03}.ppm")), img)?;
            pnm::write_pgm(&dir.join(format!("{i:03}_gt.pgm")), mask)?;
        }
    }
    Ok(())
}

/// Group directories under `root`, sorted by name.
pub fn list_groups(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| DcfmError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Image stems in a group directory: `<idx>.ppm` files, sorted.
pub fn list_images(dir: &Path) -> Result<Vec<String>> {
    let mut stems: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| DcfmError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".ppm").map(str::to_string)
        })
        .collect();
    stems.sort();
    Ok(stems)
}

/// A group read back from disk; masks are present when every `_gt.pgm` exists.
#[derive(Clone, Debug)]
pub struct LoadedGroup {
    pub group_id: String,
    pub stems: Vec<String>,
    pub images: Vec<Tensor>,
    pub masks: Option<Vec<Tensor>>,
}

pub fn load_group(dir: &Path) -> Result<LoadedGroup> {
    let stems = list_images(dir)?;
    let images = stems.iter().map(|s| pnm::read(&dir.join(format!("{s}.ppm")))).collect::<Result<Vec<_>>>()?;
    let mask_paths: Vec<PathBuf> = stems.iter().map(|s| dir.join(format!("{s}_gt.pgm"))).collect();
    let masks = if mask_paths.iter().all(|p| p.exists()) {
        Some(mask_paths.iter().map(|p| pnm::read(p)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let group_id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(LoadedGroup { group_id, stems, images, masks })
}

/// Bilinear resize of a `[C,H,W]` tensor (pixel-centre aligned).
pub fn resize(img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [c, h, w] = *img.shape() else { panic!("resize expects [C,H,W], got {:?}", img.shape()) };
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let sample = |ci: usize, y: f64, x: f64| {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let at = |yy: usize, xx: usize| img.data()[(ci * h + yy) * w + xx];
        (at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx) * (1.0 - fy) + (at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx) * fy
    };
    Tensor::from_fn(&[c, out_h, out_w], |i| {
        let (ci, rest) = (i / (out_h * out_w), i % (out_h * out_w));
        let (oy, ox) = (rest / out_w, rest % out_w);
        let sy = (oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
        let sx = (ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
        sample(ci, sy, sx)
    })
}
