//! Procedural benchmark: an analytic scene rendered clean, then corrupted with
//! screen-space distractor sprites whose tight boxes become YOLO labels.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Mat3, Vec3};
use crate::image::{write_png, Image};
use crate::scene_io::{write_label_file, write_transforms, BBox, CameraModel, FrameEntry, Pose, TransformsFile};
use crate::volume_renderer::{camera_ray, ray_seed};

const HIT_EPS: f64 = 1e-9;
const AMBIENT: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64, albedo: [f64; 3] },
    Cuboid { min: Vec3, max: Vec3, albedo: [f64; 3] },
}

/// A ray hit: distance along the unit direction, outward normal (zero when the origin is inside).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
    pub albedo: [f64; 3],
}

impl Primitive {
    pub fn albedo(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { albedo, .. } | Primitive::Cuboid { albedo, .. } => *albedo,
        }
    }

    pub fn bounds(&self) -> Aabb {
        match *self {
            Primitive::Sphere { center, radius, .. } => Aabb { min: center - Vec3::splat(radius), max: center + Vec3::splat(radius) },
            Primitive::Cuboid { min, max, .. } => Aabb { min, max },
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        match *self {
            Primitive::Sphere { center, radius, .. } => (*p - center).norm() < radius,
            Primitive::Cuboid { min, max, .. } => (0..3).all(|i| p[i] > min[i] && p[i] < max[i]),
        }
    }

    /// Nearest intersection in front of `origin`; `dir` must be unit length.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        let albedo = self.albedo();
        if self.contains(origin) {
            return Some(Hit { t: 0.0, normal: Vec3::ZERO, albedo });
        }
        match *self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = *origin - center;
                let b = oc.dot(dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                (t > HIT_EPS).then(|| Hit { t, normal: (*origin + *dir * t - center).normalized(), albedo })
            }
            Primitive::Cuboid { min, max, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for i in 0..3 {
                    if dir[i].abs() < 1e-300 {
                        if origin[i] < min[i] || origin[i] > max[i] {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = ((min[i] - origin[i]) / dir[i], (max[i] - origin[i]) / dir[i]);
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                    }
                    if a > t0 {
                        t0 = a;
                        axis = i;
                    }
                    t1 = t1.min(b);
                }
                if t0 > t1 || t0 <= HIT_EPS {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis] = -dir[axis].signum();
                Some(Hit { t: t0, normal: Vec3(n), albedo })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    /// Direction towards the light.
    pub light: Vec3,
}

impl Default for SyntheticScene {
    /// Three spheres and one box in the unit cube, on white.
    fn default() -> Self {
        SyntheticScene {
            primitives: vec![
                Primitive::Sphere { center: Vec3::new(0.35, 0.4, 0.35), radius: 0.2, albedo: [0.85, 0.25, 0.2] },
                Primitive::Sphere { center: Vec3::new(0.68, 0.64, 0.3), radius: 0.17, albedo: [0.2, 0.55, 0.85] },
                Primitive::Sphere { center: Vec3::new(0.45, 0.68, 0.66), radius: 0.14, albedo: [0.3, 0.8, 0.35] },
                Primitive::Cuboid { min: Vec3::new(0.55, 0.18, 0.12), max: Vec3::new(0.85, 0.45, 0.42), albedo: [0.9, 0.75, 0.3] },
            ],
            background: [1.0; 3],
            light: Vec3::new(0.4, 0.3, 0.85).normalized(),
        }
    }
}

impl SyntheticScene {
    pub fn empty(background: [f64; 3]) -> Self {
        SyntheticScene { primitives: Vec::new(), background, light: Vec3::new(0.0, 0.0, 1.0) }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = Aabb::UNIT;
        for (i, p) in self.primitives.iter().enumerate() {
            let b = p.bounds();
            if (0..3).any(|k| b.min[k] < unit.min[k] || b.max[k] > unit.max[k]) {
                return Err(Error::invalid(format!("primitive {i} leaves the unit cube")));
            }
            if p.albedo().iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::invalid(format!("primitive {i} albedo outside [0,1]")));
            }
        }
        if !(self.light.norm() > 0.0) {
            return Err(Error::invalid("light direction is zero"));
        }
        Ok(())
    }

    pub fn trace(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(origin, dir))
            .min_by(|a, b| a.t.total_cmp(&b.t))
    }

    /// Flat Lambert shading; a hit from inside a solid shows the bare albedo.
    pub fn shade(&self, hit: &Hit) -> [f64; 3] {
        let k = if hit.normal == Vec3::ZERO {
            1.0
        } else {
            AMBIENT + (1.0 - AMBIENT) * hit.normal.dot(&self.light.normalized()).max(0.0)
        };
        hit.albedo.map(|a| a * k)
    }
}

/// Clean image plus per-pixel hit distance (`∞` on background).
pub fn render_oracle(scene: &SyntheticScene, camera: &CameraModel, pose: &Pose) -> (Image, Vec<f64>) {
    let mut img = Image::filled(camera.width, camera.height, scene.background);
    let mut depth = vec![f64::INFINITY; camera.width * camera.height];
    for y in 0..camera.height {
        for x in 0..camera.width {
            let ray = camera_ray(camera, pose, (x, y), 0, &[]);
            if let Some(hit) = scene.trace(&ray.origin, &ray.direction) {
                img.set(x, y, scene.shade(&hit));
                depth[y * camera.width + x] = hit.t;
            }
        }
    }
    (img, depth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistractorKind {
    #[default]
    SnowBlob,
    ConfettiQuad,
    PetalEllipse,
}

impl DistractorKind {
    fn palette(self) -> &'static [[f64; 3]] {
        match self {
            DistractorKind::SnowBlob => &[[0.97, 0.97, 0.98], [0.9, 0.92, 0.95], [0.85, 0.87, 0.9]],
            DistractorKind::ConfettiQuad => &[[0.95, 0.1, 0.6], [0.1, 0.8, 0.9], [0.95, 0.85, 0.05], [0.5, 0.1, 0.9]],
            DistractorKind::PetalEllipse => &[[0.98, 0.7, 0.8], [0.95, 0.55, 0.7], [0.9, 0.8, 0.85]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorSpec {
    pub kind: DistractorKind,
    pub count: usize,
    /// Sprite radius range in pixels.
    pub size_min: f64,
    pub size_max: f64,
    /// Per-channel uniform jitter added to the kind's palette colors.
    pub color_jitter: f64,
    pub seed: u64,
}

impl Default for DistractorSpec {
    fn default() -> Self {
        DistractorSpec { kind: DistractorKind::SnowBlob, count: 25, size_min: 2.0, size_max: 6.0, color_jitter: 0.03, seed: 0 }
    }
}

/// One sprite in screen space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sprite {
    pub center: (f64, f64),
    pub radius: f64,
    pub angle: f64,
    pub color: [f64; 3],
}

impl Sprite {
    fn covers(&self, kind: DistractorKind, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let r = self.radius;
        match kind {
            DistractorKind::SnowBlob => dx * dx + dy * dy <= r * r,
            DistractorKind::ConfettiQuad => u.abs() <= r && v.abs() <= 0.6 * r,
            DistractorKind::PetalEllipse => (u / r).powi(2) + (v / (0.5 * r)).powi(2) <= 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedView {
    pub image: Image,
    pub boxes: Vec<BBox>,
    pub sprites: Vec<Sprite>,
    /// True where any sprite covers the pixel.
    pub sprite_mask: Vec<bool>,
}

/// Paints independent sprites into every view and returns their tight boxes.
pub fn inject_distractors(clean: &[Image], spec: &DistractorSpec) -> Result<Vec<CorruptedView>> {
    if !(spec.size_min > 0.0 && spec.size_max >= spec.size_min) {
        return Err(Error::invalid("distractor sizes must be positive and ordered"));
    }
    clean
        .iter()
        .enumerate()
        .map(|(v, img)| {
            if 2.0 * spec.size_max >= img.width.min(img.height) as f64 {
                return Err(Error::invalid(format!("distractor size {} does not fit a {}x{} view", spec.size_max, img.width, img.height)));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(ray_seed(spec.seed, v, (0, 0)));
            let mut out = img.clone();
            let mut mask = vec![false; img.pixel_count()];
            let mut boxes = Vec::new();
            let mut sprites = Vec::new();
            let palette = spec.kind.palette();
            for _ in 0..spec.count {
                let radius = rng.gen_range(spec.size_min..=spec.size_max);
                let center = (
                    rng.gen_range(radius..img.width as f64 - radius),
                    rng.gen_range(radius..img.height as f64 - radius),
                );
                let angle = rng.gen_range(0.0..std::f64::consts::PI);
                let base = palette[rng.gen_range(0..palette.len())];
                let color = base.map(|c| (c + rng.gen_range(-1.0..=1.0) * spec.color_jitter).clamp(0.0, 1.0));
                let sprite = Sprite { center, radius, angle, color };
                let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
                let lo_x = (center.0 - radius - 1.0).floor().max(0.0) as usize;
                let hi_x = ((center.0 + radius + 1.0).ceil() as usize).min(img.width - 1);
                let lo_y = (center.1 - radius - 1.0).floor().max(0.0) as usize;
                let hi_y = ((center.1 + radius + 1.0).ceil() as usize).min(img.height - 1);
                for y in lo_y..=hi_y {
                    for x in lo_x..=hi_x {
                        if sprite.covers(spec.kind, x as f64, y as f64) {
                            out.set(x, y, color);
                            mask[y * img.width + x] = true;
                            x0 = x0.min(x);
                            y0 = y0.min(y);
                            x1 = x1.max(x + 1);
                            y1 = y1.max(y + 1);
                        }
                    }
                }
                if x0 != usize::MAX {
                    boxes.push(BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64, spec.kind as u32));
                    sprites.push(sprite);
                }
            }
            Ok(CorruptedView { image: out, boxes, sprites, sprite_mask: mask })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RigLayout {
    Circle,
    #[default]
    Hemisphere,
}

/// Camera-to-world pose at `eye` looking at `target`, world up +z.
pub fn look_at(eye: Vec3, target: Vec3) -> Result<Pose> {
    let f = (target - eye).normalized();
    if !f.is_finite() {
        return Err(Error::invalid("look-at with coincident eye and target"));
    }
    let up = if f.cross(&Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-6 { Vec3::new(0.0, 1.0, 0.0) } else { Vec3::new(0.0, 0.0, 1.0) };
    let right = f.cross(&up).normalized();
    let cam_up = right.cross(&f);
    Pose::new(Mat3::from_columns(right, cam_up, -f), eye)
}

/// `n_views` poses at distance `radius` from `target`, all looking at it.
pub fn make_rig(n_views: usize, radius: f64, target: Vec3, layout: RigLayout) -> Result<Vec<Pose>> {
    if n_views < 2 {
        return Err(Error::invalid("a rig needs at least two views"));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid(format!("rig radius must be positive, got {radius}")));
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n_views)
        .map(|i| {
            let (azimuth, elevation) = match layout {
                RigLayout::Circle => (std::f64::consts::TAU * i as f64 / n_views as f64, 0.0),
                RigLayout::Hemisphere => {
                    let s = i as f64 / (n_views - 1) as f64;
                    (golden * i as f64, (10.0 + 50.0 * s).to_radians())
                }
            };
            let offset = Vec3::new(elevation.cos() * azimuth.cos(), elevation.cos() * azimuth.sin(), elevation.sin());
            look_at(target + offset * radius, target)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_views: usize,
    pub resolution: usize,
    pub camera_angle_x: f64,
    pub radius: f64,
    pub layout: RigLayout,
    pub distractor: DistractorSpec,
    pub scene: SyntheticScene,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_views: 20,
            resolution: 128,
            camera_angle_x: 0.8,
            radius: 2.2,
            layout: RigLayout::Hemisphere,
            distractor: DistractorSpec::default(),
            scene: SyntheticScene::default(),
        }
    }
}

/// Everything generated for a benchmark, in memory.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub camera: CameraModel,
    pub poses: Vec<Pose>,
    pub clean: Vec<Image>,
    pub depth: Vec<Vec<f64>>,
    pub corrupted: Vec<CorruptedView>,
}

impl Benchmark {
    /// Fraction of pixels inside at least one sprite.
    pub fn sprite_coverage(&self) -> f64 {
        let hit: usize = self.corrupted.iter().map(|c| c.sprite_mask.iter().filter(|m| **m).count()).sum();
        hit as f64 / (self.corrupted.len() * self.camera.width * self.camera.height) as f64
    }

    /// Fraction of pixels inside at least one label box.
    pub fn box_coverage(&self) -> f64 {
        let (w, h) = (self.camera.width, self.camera.height);
        let hit: usize = self
            .corrupted
            .iter()
            .map(|c| (0..w * h).filter(|p| crate::scene_io::pixel_in_boxes((p % w) as f64, (p / w) as f64, &c.boxes)).count())
            .sum();
        hit as f64 / (self.corrupted.len() * w * h) as f64
    }
}

pub fn generate(config: &GenConfig) -> Result<Benchmark> {
    config.scene.validate()?;
    let camera = CameraModel::from_fov_x(config.camera_angle_x, config.resolution, config.resolution)?;
    let poses = make_rig(config.n_views, config.radius, Aabb::UNIT.center(), config.layout)?;
    let (clean, depth): (Vec<_>, Vec<_>) = poses.iter().map(|p| render_oracle(&config.scene, &camera, p)).unzip();
    let corrupted = inject_distractors(&clean, &config.distractor)?;
    Ok(Benchmark { camera, poses, clean, depth, corrupted })
}

pub fn frame_name(i: usize) -> String {
    format!("r_{i:03}")
}

/// Paths inside a generated dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetLayout { root: root.into() }
    }
    pub fn transforms(&self) -> PathBuf {
        self.root.join("transforms.json")
    }
    pub fn clean_transforms(&self) -> PathBuf {
        self.root.join("transforms_clean.json")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("labels")
    }
    pub fn clean(&self) -> PathBuf {
        self.root.join("clean")
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    generator: &'static str,
    version: &'static str,
    config: &'a GenConfig,
    focal_length: f64,
    sprite_coverage: f64,
    box_coverage: f64,
    boxes_per_view: Vec<usize>,
}

/// Writes `transforms.json`, `clean/`, `corrupted/`, `labels/`, `masks/` and `spec.json` under `out`.
pub fn write_dataset(out: &Path, config: &GenConfig, force: bool) -> Result<Benchmark> {
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::invalid(format!("{} exists and is not empty (use --force)", out.display())));
        }
    }
    let bench = generate(config)?;
    let layout = DatasetLayout::new(out);
    for sub in ["clean", "corrupted", "labels", "masks"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let (w, h) = (bench.camera.width, bench.camera.height);
    let mut frames = Vec::new();
    let mut clean_frames = Vec::new();
    for (i, pose) in bench.poses.iter().enumerate() {
        let name = frame_name(i);
        write_png(&out.join("clean").join(format!("{name}.png")), &bench.clean[i])?;
        let cv = &bench.corrupted[i];
        write_png(&out.join("corrupted").join(format!("{name}.png")), &cv.image)?;
        write_label_file(&layout.labels().join(format!("{name}.txt")), &cv.boxes, w, h)?;
        let mask = Image { width: w, height: h, data: cv.sprite_mask.iter().flat_map(|m| [if *m { 1.0 } else { 0.0 }; 3]).collect() };
        write_png(&out.join("masks").join(format!("{name}.png")), &mask)?;
        frames.push(FrameEntry { file_path: format!("./corrupted/{name}"), transform_matrix: pose.to_matrix4() });
        clean_frames.push(FrameEntry { file_path: format!("./clean/{name}"), transform_matrix: pose.to_matrix4() });
    }
    write_transforms(&layout.transforms(), &TransformsFile { camera_angle_x: bench.camera.camera_angle_x(), frames })?;
    write_transforms(&layout.clean_transforms(), &TransformsFile { camera_angle_x: bench.camera.camera_angle_x(), frames: clean_frames })?;
    let prov = Provenance {
        generator: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config,
        focal_length: bench.camera.focal_length,
        sprite_coverage: bench.sprite_coverage(),
        box_coverage: bench.box_coverage(),
        boxes_per_view: bench.corrupted.iter().map(|c| c.boxes.len()).collect(),
    };
    let text = serde_json::to_string_pretty(&prov).map_err(|e| Error::Serde(e.to_string()))?;
    let spec_path = out.join("spec.json");
    fs::write(&spec_path, text).map_err(|e| Error::io(&spec_path, e))?;
    Ok(bench)
}
