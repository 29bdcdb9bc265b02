//! Posed multi-view datasets: NeRF-style `transforms.json`, YOLO label files, and mask images.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::image::{read_png, Image};

/// Gray level written over every detected distractor region.
pub const MASK_VALUE: u8 = 96;

const POSE_TOLERANCE: f64 = 1e-6;

/// Pinhole intrinsics in pixels. Rays are cast through integer pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal_length: f64,
    pub principal_point: (f64, f64),
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(focal_length: f64, principal_point: (f64, f64), width: usize, height: usize) -> Result<Self> {
        if !(focal_length > 0.0 && focal_length.is_finite()) {
            return Err(Error::invalid(format!("focal length must be positive, got {focal_length}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be at least 1"));
        }
        let (cx, cy) = principal_point;
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::invalid(format!("principal point ({cx}, {cy}) outside {width}x{height}")));
        }
        Ok(CameraModel { focal_length, principal_point, width, height })
    }

    /// Camera with the principal point at the image center and the given horizontal field of view.
    pub fn from_fov_x(camera_angle_x: f64, width: usize, height: usize) -> Result<Self> {
        let focal = 0.5 * width as f64 / (0.5 * camera_angle_x).tan();
        CameraModel::new(focal, (width as f64 / 2.0, height as f64 / 2.0), width, height)
    }

    pub fn camera_angle_x(&self) -> f64 {
        2.0 * (0.5 * self.width as f64 / self.focal_length).atan()
    }

    /// Unnormalized direction in camera coordinates (camera looks down −z, image y points down).
    pub fn back_project(&self, u: f64, v: f64) -> Vec3 {
        let (cx, cy) = self.principal_point;
        Vec3::new((u - cx) / self.focal_length, -(v - cy) / self.focal_length, -1.0)
    }

    /// Continuous image coordinates of a camera-space point, `None` behind the camera.
    pub fn project(&self, p_cam: &Vec3) -> Option<(f64, f64)> {
        let depth = -p_cam.z();
        if depth <= 1e-12 {
            return None;
        }
        let (cx, cy) = self.principal_point;
        Some((cx + self.focal_length * p_cam.x() / depth, cy - self.focal_length * p_cam.y() / depth))
    }

    /// Integer pixel hit by a camera-space point, if it lands inside the image.
    pub fn project_to_pixel(&self, p_cam: &Vec3) -> Option<(usize, usize)> {
        let (u, v) = self.project(p_cam)?;
        let (x, y) = (u.round(), v.round());
        if x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64 {
            Some((x as usize, y as usize))
        } else {
            None
        }
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { rotation: Mat3::IDENTITY, translation: Vec3::ZERO };

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let pose = Pose { rotation, translation };
        pose.validate(0)?;
        Ok(pose)
    }

    fn validate(&self, frame: usize) -> Result<()> {
        let error = self.rotation.orthonormality_error();
        let det = self.rotation.determinant();
        if !(error <= POSE_TOLERANCE) || !((det - 1.0).abs() <= POSE_TOLERANCE) {
            return Err(Error::Pose { frame, error, det });
        }
        Ok(())
    }

    pub fn from_matrix4(m: &[[f64; 4]; 4], frame: usize) -> Result<Self> {
        let rotation = Mat3([
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]);
        let pose = Pose { rotation, translation: Vec3::new(m[0][3], m[1][3], m[2][3]) };
        pose.validate(frame)?;
        Ok(pose)
    }

    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation.0;
        let t = &self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// World-space optical axis.
    pub fn forward(&self) -> Vec3 {
        -self.rotation.column(2)
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose().mul_vec(&(*p - self.translation))
    }
}

/// Axis-aligned box in pixel coordinates, covering `[x0,x1)×[y0,y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub class_id: u32,
    pub confidence: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64, class_id: u32) -> Self {
        BBox { x0, y0, x1, y1, class_id, confidence: 1.0 }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub view_id: usize,
    /// Stem of the source image file, used to pair label files.
    pub name: String,
    pub image: Image,
    pub camera: CameraModel,
    pub pose: Pose,
    pub boxes: Vec<BBox>,
}

impl ViewRecord {
    pub fn is_masked(&self, x: usize, y: usize) -> bool {
        pixel_in_boxes(x as f64, y as f64, &self.boxes)
    }

    pub fn masked_pixel_count(&self) -> usize {
        (0..self.camera.height)
            .flat_map(|y| (0..self.camera.width).map(move |x| (x, y)))
            .filter(|&(x, y)| self.is_masked(x, y))
            .count()
    }
}

/// True iff `(x, y)` lies in the half-open extent of at least one box.
pub fn pixel_in_boxes(x: f64, y: f64, boxes: &[BBox]) -> bool {
    boxes.iter().any(|b| b.contains(x, y))
}

/// Copy of the view's image with every boxed pixel set to the mask gray.
pub fn emit_mask_image(view: &ViewRecord) -> Image {
    let mut out = view.image.clone();
    let gray = MASK_VALUE as f64 / 255.0;
    for y in 0..out.height {
        for x in 0..out.width {
            if view.is_masked(x, y) {
                out.set(x, y, [gray; 3]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformsFile {
    pub camera_angle_x: f64,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameEntry {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
}

pub fn read_transforms(path: &Path) -> Result<TransformsFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Transforms { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn write_transforms(path: &Path, transforms: &TransformsFile) -> Result<()> {
    let text = serde_json::to_string_pretty(transforms).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn resolve_image(base: &Path, file_path: &str) -> PathBuf {
    let direct = base.join(file_path);
    if direct.is_file() {
        return direct;
    }
    let with_ext = base.join(format!("{file_path}.png"));
    if with_ext.is_file() {
        with_ext
    } else {
        direct
    }
}

// Snap near-integer corners so float noise from normalization does not shift membership by a pixel.
fn snap(v: f64) -> f64 {
    if (v - v.round()).abs() < 1e-6 {
        v.round()
    } else {
        v
    }
}

/// Parses one `class cx cy w h [confidence]` line into pixel corners, clamped to the image.
pub fn parse_yolo_line(line: &str, width: usize, height: usize) -> std::result::Result<BBox, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 && fields.len() != 6 {
        return Err(format!("expected 5 or 6 fields, found {}", fields.len()));
    }
    let class_id: u32 = fields[0].parse().map_err(|_| format!("bad class id {:?}", fields[0]))?;
    let mut vals = [0.0f64; 4];
    for (v, field) in vals.iter_mut().zip(&fields[1..5]) {
        *v = field.parse().map_err(|_| format!("bad number {field:?}"))?;
        if !(0.0..=1.0).contains(v) {
            return Err(format!("normalized coordinate {v} outside [0,1]"));
        }
    }
    let confidence = match fields.get(5) {
        Some(f) => {
            let c: f64 = f.parse().map_err(|_| format!("bad confidence {f:?}"))?;
            if !(0.0..=1.0).contains(&c) {
                return Err(format!("confidence {c} outside [0,1]"));
            }
            c
        }
        None => 1.0,
    };
    let [cx, cy, w, h] = vals;
    if w <= 0.0 || h <= 0.0 {
        return Err("box has zero extent".into());
    }
    let (wf, hf) = (width as f64, height as f64);
    let x0 = snap(((cx - w / 2.0) * wf).clamp(0.0, wf));
    let x1 = snap(((cx + w / 2.0) * wf).clamp(0.0, wf));
    let y0 = snap(((cy - h / 2.0) * hf).clamp(0.0, hf));
    let y1 = snap(((cy + h / 2.0) * hf).clamp(0.0, hf));
    if x0 >= x1 || y0 >= y1 {
        return Err("box is empty after clamping to the image".into());
    }
    Ok(BBox { x0, y0, x1, y1, class_id, confidence })
}

pub fn format_yolo_line(b: &BBox, width: usize, height: usize) -> String {
    let (wf, hf) = (width as f64, height as f64);
    let (cx, cy) = b.center();
    format!("{} {:.8} {:.8} {:.8} {:.8}", b.class_id, cx / wf, cy / hf, b.width() / wf, b.height() / hf)
}

pub fn read_label_file(path: &Path, width: usize, height: usize) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let b = parse_yolo_line(line, width, height).map_err(|reason| Error::Label {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        })?;
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn write_label_file(path: &Path, boxes: &[BBox], width: usize, height: usize) -> Result<()> {
    let mut text = String::new();
    for b in boxes {
        text.push_str(&format_yolo_line(b, width, height));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every frame of `transforms_path`, pairing each image with `<labels_dir>/<stem>.txt` when present.
pub fn load_dataset(transforms_path: &Path, labels_dir: Option<&Path>) -> Result<Vec<ViewRecord>> {
    let transforms = read_transforms(transforms_path)?;
    let base = transforms_path.parent().unwrap_or(Path::new("."));
    let mut views = Vec::with_capacity(transforms.frames.len());
    for (view_id, frame) in transforms.frames.iter().enumerate() {
        let pose = Pose::from_matrix4(&frame.transform_matrix, view_id)?;
        let image_path = resolve_image(base, &frame.file_path);
        let image = read_png(&image_path)?;
        let camera = CameraModel::from_fov_x(transforms.camera_angle_x, image.width, image.height)?;
        let name = image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{view_id}"));
        let boxes = match labels_dir {
            Some(dir) => {
                let label_path = dir.join(format!("{name}.txt"));
                if label_path.is_file() {
                    read_label_file(&label_path, image.width, image.height)?
                } else {
                    Vec::new()
                }
            }
            None => Vec::new(),
        };
        views.push(ViewRecord { view_id, name, image, camera, pose, boxes });
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yolo_center_format_converts_to_corners() {
        let b = parse_yolo_line("0 0.5 0.5 0.25 0.25", 128, 128).unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1, b.class_id), (48.0, 48.0, 80.0, 80.0, 0));
    }

    #[test]
    fn out_of_range_coordinate_is_rejected() {
        assert!(parse_yolo_line("0 1.2 0.5 0.1 0.1", 128, 128).is_err());
    }

    #[test]
    fn boxes_past_the_border_are_clamped() {
        let b = parse_yolo_line("1 0.95 0.5 0.2 0.2", 100, 100).unwrap();
        assert_eq!(b.x1, 100.0);
        assert!((b.x0 - 85.0).abs() < 1e-9);
    }

    #[test]
    fn membership_is_half_open() {
        let boxes = [BBox::new(48.0, 48.0, 80.0, 80.0, 0)];
        assert!(pixel_in_boxes(50.0, 50.0, &boxes));
        assert!(pixel_in_boxes(48.0, 48.0, &boxes));
        assert!(!pixel_in_boxes(80.0, 80.0, &boxes));
        assert!(!pixel_in_boxes(50.0, 50.0, &[]));
    }

    fn view_with(boxes: Vec<BBox>, w: usize, h: usize) -> ViewRecord {
        let mut image = Image::new(w, h);
        for (i, v) in image.data.iter_mut().enumerate() {
            *v = (i % 7) as f64 / 7.0;
        }
        ViewRecord {
            view_id: 0,
            name: "v".into(),
            image,
            camera: CameraModel::from_fov_x(0.8, w, h).unwrap(),
            pose: Pose::IDENTITY,
            boxes,
        }
    }

    #[test]
    fn mask_without_boxes_is_identity() {
        let v = view_with(vec![], 16, 12);
        assert_eq!(emit_mask_image(&v), v.image);
    }

    #[test]
    fn full_image_box_gives_constant_gray() {
        let v = view_with(vec![BBox::new(0.0, 0.0, 16.0, 12.0, 0)], 16, 12);
        let m = emit_mask_image(&v);
        assert!(m.data.iter().all(|&c| c == 96.0 / 255.0));
    }

    #[test]
    fn mask_changes_exactly_the_boxed_pixels() {
        let v = view_with(vec![BBox::new(48.0, 48.0, 80.0, 80.0, 0)], 128, 128);
        let m = emit_mask_image(&v);
        // the source palette is k/7, which never equals the mask gray
        let mut changed = 0;
        for y in 0..128 {
            for x in 0..128 {
                let differs = m.get(x, y) != v.image.get(x, y);
                assert_eq!(differs, v.is_masked(x, y));
                changed += differs as usize;
            }
        }
        assert_eq!(changed, 32 * 32);
    }

    #[test]
    fn non_rotation_pose_is_fatal() {
        let mut m = Pose::IDENTITY.to_matrix4();
        m[0][0] = 1.01;
        assert!(matches!(Pose::from_matrix4(&m, 3), Err(Error::Pose { frame: 3, .. })));
        let mut reflect = Pose::IDENTITY.to_matrix4();
        reflect[2][2] = -1.0;
        assert!(Pose::from_matrix4(&reflect, 0).is_err());
    }

    #[test]
    fn principal_point_projects_to_itself() {
        let cam = CameraModel::from_fov_x(0.8, 128, 128).unwrap();
        let d = cam.back_project(64.0, 64.0);
        assert_eq!(d, Vec3::new(0.0, 0.0, -1.0));
        assert_eq!(cam.project_to_pixel(&(d * 3.0)), Some((64, 64)));
    }
}
