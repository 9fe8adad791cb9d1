use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::boxes::Box3D;
use super::camera::CameraIntrinsics;
use super::render::{render_labels, Surface};
use crate::error::{DetrError, Result};
use crate::seed;

/// Placements tried before the generator gives up on a scene.
pub const MAX_REJECTIONS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfile {
    pub name: String,
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
    pub palette: Vec<[u8; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: Vec<ClassProfile>,
    /// Forward distance range of object centers.
    pub depth_range: [f64; 2],
    /// Object yaw is drawn from `[-yaw_range, yaw_range]`.
    pub yaw_range: f64,
    pub camera_height: [f64; 2],
    pub camera_yaw_jitter: f64,
    /// Fraction of the horizontal field of view used for object centers.
    pub fov_margin: f64,
    /// Minimum gap between object hulls.
    pub gap: f64,
    /// Every object must cover at least this many pixels.
    pub min_visible_pixels: usize,
    pub room: Room,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            min_objects: 2,
            max_objects: 4,
            classes: default_classes(),
            depth_range: [2.6, 5.2],
            yaw_range: PI / 6.0,
            camera_height: [1.1, 1.3],
            camera_yaw_jitter: 0.15,
            fov_margin: 0.8,
            gap: 0.05,
            min_visible_pixels: 40,
            room: Room::default(),
        }
    }
}

fn default_classes() -> Vec<ClassProfile> {
    let p = |name: &str, lo: [f64; 3], hi: [f64; 3], palette: &[[u8; 3]]| ClassProfile {
        name: name.into(),
        size_min: lo,
        size_max: hi,
        palette: palette.to_vec(),
    };
    vec![
        p("table", [1.0, 0.6, 0.7], [1.4, 0.9, 0.8], &[[150, 100, 50], [170, 120, 60]]),
        p("chair", [0.45, 0.45, 0.8], [0.55, 0.55, 1.0], &[[40, 60, 180], [60, 90, 200]]),
        p("cabinet", [0.8, 0.4, 1.2], [1.0, 0.5, 1.6], &[[40, 150, 60], [70, 170, 80]]),
        p("ottoman", [0.5, 0.5, 0.35], [0.7, 0.7, 0.45], &[[190, 40, 40], [210, 70, 60]]),
    ]
}

impl GeneratorConfig {
    /// Two classes with one shared size profile that differ only in color.
    pub fn color_only() -> Self {
        let size_min = [0.6, 0.6, 0.6];
        let size_max = [0.8, 0.8, 0.8];
        GeneratorConfig {
            classes: vec![
                ClassProfile {
                    name: "warm".into(),
                    size_min,
                    size_max,
                    palette: vec![[200, 50, 40], [220, 90, 30]],
                },
                ClassProfile {
                    name: "cool".into(),
                    size_min,
                    size_max,
                    palette: vec![[40, 80, 200], [30, 160, 190]],
                },
            ],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DetrError::Config(m));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!(
                "generator object range [{}, {}] is invalid",
                self.min_objects, self.max_objects
            ));
        }
        if self.classes.is_empty() {
            return bad("generator needs at least one class".into());
        }
        for c in &self.classes {
            if c.palette.is_empty() {
                return bad(format!("class {} has an empty palette", c.name));
            }
            if (0..3).any(|i| !(c.size_min[i] > 0.0 && c.size_min[i] <= c.size_max[i])) {
                return bad(format!("class {} has an invalid size range", c.name));
            }
        }
        if !(self.depth_range[0] > 0.0 && self.depth_range[0] <= self.depth_range[1]) {
            return bad("depth_range must be positive and ordered".into());
        }
        if !(self.camera_height[0] > 0.0 && self.camera_height[0] <= self.camera_height[1]) {
            return bad("camera_height must be positive and ordered".into());
        }
        for i in 0..3 {
            if self.room.min[i] >= self.room.max[i] {
                return bad("room min must be below room max".into());
            }
        }
        Ok(())
    }
}

/// Interior of an axis-aligned room in world coordinates (z up).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Room {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Room {
    fn default() -> Self {
        Room {
            min: [-3.0, -1.0, 0.0],
            max: [3.0, 7.0, 2.8],
        }
    }
}

/// Level camera: camera→world is a rotation about the vertical axis plus a
/// translation, applied to upright coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub yaw: f64,
}

impl CameraPose {
    pub fn to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.position[0] + c * q[0] - s * q[1],
            self.position[1] + s * q[0] + c * q[1],
            self.position[2] + q[2],
        ]
    }

    pub fn to_camera(&self, w: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let d = [w[0] - self.position[0], w[1] - self.position[1], w[2] - self.position[2]];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Upright camera frame.
    pub bbox: Box3D,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub room: Room,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl Scene {
    pub fn boxes(&self) -> Vec<Box3D> {
        self.objects.iter().map(|o| o.bbox.clone()).collect()
    }

    /// The room interior as a box in the upright camera frame.
    pub fn room_box(&self) -> Box3D {
        let c = [
            (self.room.min[0] + self.room.max[0]) / 2.0,
            (self.room.min[1] + self.room.max[1]) / 2.0,
            (self.room.min[2] + self.room.max[2]) / 2.0,
        ];
        Box3D {
            center: self.pose.to_camera(c),
            size: [
                self.room.max[0] - self.room.min[0],
                self.room.max[1] - self.room.min[1],
                self.room.max[2] - self.room.min[2],
            ],
            yaw: super::boxes::wrap_angle(-self.pose.yaw),
            class_id: usize::MAX,
            score: 1.0,
        }
    }

    /// Checks the scene invariants: object count, positive sizes, disjoint
    /// hulls, containment in the room and visibility in the image.
    pub fn validate(&self, max_objects: usize) -> Result<()> {
        let bad = |m: String| Err(DetrError::Contract(m));
        if self.objects.len() > max_objects {
            return bad(format!("{} objects exceed the limit {max_objects}", self.objects.len()));
        }
        self.intrinsics.validate()?;
        let room = self.room_box();
        for (i, a) in self.objects.iter().enumerate() {
            if a.bbox.size.iter().any(|&s| s <= 0.0) {
                return bad(format!("object {i} has non-positive size"));
            }
            if !inside(&room, &a.bbox) {
                return bad(format!("object {i} leaves the room"));
            }
            for (j, b) in self.objects.iter().enumerate().skip(i + 1) {
                if a.bbox.hull_iou(&b.bbox) > 0.0 {
                    return bad(format!("objects {i} and {j} overlap"));
                }
            }
        }
        let counts = visible_pixels(self);
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return bad(format!("object {i} is outside the camera frustum"));
        }
        Ok(())
    }
}

fn inside(room: &Box3D, b: &Box3D) -> bool {
    let h = [room.size[0] / 2.0, room.size[1] / 2.0, room.size[2] / 2.0];
    b.vertices().iter().all(|v| {
        let q = room.to_local(*v);
        (0..3).all(|i| q[i].abs() <= h[i] + 1e-9)
    })
}

fn hulls_apart(a: &Box3D, b: &Box3D, gap: f64) -> bool {
    let (alo, ahi) = a.aabb();
    let (blo, bhi) = b.aabb();
    (0..3).any(|i| alo[i] >= bhi[i] + gap || blo[i] >= ahi[i] + gap)
}

/// Pixel count per object in the rendered label image.
pub fn visible_pixels(scene: &Scene) -> Vec<usize> {
    let mut counts = vec![0; scene.objects.len()];
    for s in render_labels(scene) {
        if let Surface::Object(i) = s {
            counts[i] += 1;
        }
    }
    counts
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Deterministic scene for `seed`. Objects rest on the floor, inside the
/// horizontal field of view, with pairwise-disjoint hulls and a minimum
/// number of visible pixels each.
pub fn generate_scene(seed: u64, cfg: &GeneratorConfig, intrinsics: &CameraIntrinsics) -> Result<Scene> {
    cfg.validate()?;
    intrinsics.validate()?;
    let mut rng = seed::rng(seed, "scene");
    let height = uniform(&mut rng, cfg.camera_height[0], cfg.camera_height[1]);
    let pose = CameraPose {
        position: [0.0, 0.0, height],
        yaw: uniform(&mut rng, -cfg.camera_yaw_jitter, cfg.camera_yaw_jitter),
    };
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let half_fov = (intrinsics.cx / intrinsics.fx).atan().min(((intrinsics.width as f64 - intrinsics.cx) / intrinsics.fx).atan());
    let mut rejections = 0;
    loop {
        let mut scene = Scene {
            objects: Vec::with_capacity(count),
            room: cfg.room,
            intrinsics: *intrinsics,
            pose,
        };
        let room = scene.room_box();
        while scene.objects.len() < count {
            let class_id = rng.gen_range(0..cfg.classes.len());
            let prof = &cfg.classes[class_id];
            let size = [0, 1, 2].map(|i| uniform(&mut rng, prof.size_min[i], prof.size_max[i]));
            let y = uniform(&mut rng, cfg.depth_range[0], cfg.depth_range[1]);
            let xr = y * half_fov.tan() * cfg.fov_margin;
            let x = uniform(&mut rng, -xr, xr);
            let yaw = uniform(&mut rng, -cfg.yaw_range, cfg.yaw_range);
            let color = prof.palette[rng.gen_range(0..prof.palette.len())];
            let bbox = Box3D::new([x, y, size[2] / 2.0 - height], size, yaw, class_id)?;
            let ok = inside(&room, &bbox) && scene.objects.iter().all(|o| hulls_apart(&o.bbox, &bbox, cfg.gap));
            if ok {
                scene.objects.push(SceneObject { bbox, color });
            } else {
                rejections += 1;
                if rejections >= MAX_REJECTIONS {
                    return Err(DetrError::Placement { attempts: rejections });
                }
            }
        }
        if visible_pixels(&scene).iter().all(|&c| c >= cfg.min_visible_pixels) {
            return Ok(scene);
        }
        rejections += 1;
        if rejections >= MAX_REJECTIONS {
            return Err(DetrError::Placement { attempts: rejections });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = GeneratorConfig::default();
        let k = CameraIntrinsics::default();
        assert_eq!(generate_scene(7, &cfg, &k).unwrap(), generate_scene(7, &cfg, &k).unwrap());
        assert_ne!(generate_scene(7, &cfg, &k).unwrap(), generate_scene(8, &cfg, &k).unwrap());
    }

    #[test]
    fn single_object_range() {
        let cfg = GeneratorConfig { min_objects: 1, max_objects: 1, ..Default::default() };
        let k = CameraIntrinsics::default();
        for seed in 0..20 {
            assert_eq!(generate_scene(seed, &cfg, &k).unwrap().objects.len(), 1);
        }
    }

    #[test]
    fn generated_scenes_are_valid() {
        let cfg = GeneratorConfig::default();
        let k = CameraIntrinsics::default();
        for seed in 0..50 {
            let s = generate_scene(seed, &cfg, &k).unwrap();
            s.validate(cfg.max_objects).unwrap();
            for o in &s.objects {
                assert!(cfg.classes[o.bbox.class_id].palette.contains(&o.color));
            }
        }
    }

    #[test]
    fn impossible_placement_reports_failure() {
        let mut cfg = GeneratorConfig { min_objects: 4, max_objects: 4, ..Default::default() };
        for c in &mut cfg.classes {
            c.size_min = [5.0, 5.0, 1.0];
            c.size_max = [5.0, 5.0, 1.0];
        }
        let err = generate_scene(0, &cfg, &CameraIntrinsics::default()).unwrap_err();
        assert!(err.to_string().contains("smaller objects"), "{err}");
    }

    #[test]
    fn pose_round_trip() {
        let p = CameraPose { position: [1.0, -2.0, 1.2], yaw: 0.3 };
        let w = p.to_world([0.5, 3.0, -0.2]);
        let q = p.to_camera(w);
        for (a, b) in q.iter().zip([0.5, 3.0, -0.2]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
