use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::boxes::Box3D;
use super::camera::{CameraIntrinsics, ColorFrame, ColoredPointCloud, DepthFrame};
use super::render::render_scene;
use super::scene::{CameraPose, Room, Scene};
use crate::error::{DetrError, Result};

pub const DEPTH_MAGIC: &[u8; 8] = b"MVDDEPTH";

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| DetrError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| DetrError::io(path, e))
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> DetrError {
    DetrError::Format(format!("{}: {msg}", path.display()))
}

pub fn encode_ppm(frame: &ColorFrame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    for px in &frame.data {
        out.extend(px.map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<ColorFrame, String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(format!("expected P6, found {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PPM number {s:?}"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format!("only 8-bit PPM is supported, maxval {max}"));
    }
    let body = bytes.get(pos..pos + 3 * w * h).ok_or("truncated PPM pixel data")?;
    let data = body.chunks_exact(3).map(|c| [c[0], c[1], c[2]].map(|x| x as f32 / 255.0)).collect();
    Ok(ColorFrame { width: w, height: h, data })
}

pub fn encode_depth(frame: &DepthFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * frame.data.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend((frame.width as u32).to_le_bytes());
    out.extend((frame.height as u32).to_le_bytes());
    for d in &frame.data {
        out.extend(d.to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8]) -> std::result::Result<DepthFrame, String> {
    if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
        return Err("missing MVDDEPTH header".into());
    }
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != 4 * w * h {
        return Err(format!("expected {} depth bytes for {w}x{h}, found {}", 4 * w * h, body.len()));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    DepthFrame::new(w, h, data).map_err(|e| e.to_string())
}

/// Ground truth as parallel arrays.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub center: Vec<[f64; 3]>,
    pub size: Vec<[f64; 3]>,
    pub yaw: Vec<f64>,
    pub class: Vec<usize>,
    #[serde(default)]
    pub color: Vec<[u8; 3]>,
}

impl GroundTruth {
    pub fn from_scene(scene: &Scene) -> Self {
        let mut gt = GroundTruth::default();
        for o in &scene.objects {
            gt.center.push(o.bbox.center);
            gt.size.push(o.bbox.size);
            gt.yaw.push(o.bbox.yaw);
            gt.class.push(o.bbox.class_id);
            gt.color.push(o.color);
        }
        gt
    }

    pub fn boxes(&self) -> Result<Vec<Box3D>> {
        let n = self.center.len();
        if self.size.len() != n || self.yaw.len() != n || self.class.len() != n {
            return Err(DetrError::Format("gt arrays differ in length".into()));
        }
        (0..n)
            .map(|i| Box3D::new(self.center[i], self.size[i], self.yaw[i], self.class[i]))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub room: Room,
}

/// One scene directory loaded from disk.
#[derive(Clone, Debug)]
pub struct SceneRecord {
    pub id: String,
    pub color: ColorFrame,
    pub depth: DepthFrame,
    pub camera: CameraFile,
    pub boxes: Vec<Box3D>,
}

pub fn write_scene_dir(dir: &Path, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DetrError::io(dir, e))?;
    let (color, depth) = render_scene(scene);
    write(&dir.join("color.ppm"), &encode_ppm(&color))?;
    write(&dir.join("depth.bin"), &encode_depth(&depth))?;
    let gt = serde_json::to_string_pretty(&GroundTruth::from_scene(scene)).expect("serializable");
    write(&dir.join("gt.json"), gt.as_bytes())?;
    let cam = CameraFile {
        intrinsics: scene.intrinsics,
        pose: scene.pose,
        room: scene.room,
    };
    write(&dir.join("camera.json"), serde_json::to_string_pretty(&cam).expect("serializable").as_bytes())
}

pub fn read_scene_dir(dir: &Path) -> Result<SceneRecord> {
    let p = dir.join("color.ppm");
    let color = decode_ppm(&read(&p)?).map_err(|e| format_err(&p, e))?;
    let p = dir.join("depth.bin");
    let depth = decode_depth(&read(&p)?).map_err(|e| format_err(&p, e))?;
    let p = dir.join("camera.json");
    let camera: CameraFile = serde_json::from_slice(&read(&p)?).map_err(|e| format_err(&p, e))?;
    let p = dir.join("gt.json");
    let gt: GroundTruth = serde_json::from_slice(&read(&p)?).map_err(|e| format_err(&p, e))?;
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(SceneRecord {
        id,
        color,
        depth,
        camera,
        boxes: gt.boxes()?,
    })
}

/// ASCII PLY with `x y z red green blue`.
pub fn encode_ply(cloud: &ColoredPointCloud, colors: Option<&[[u8; 3]]>) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    );
    for (i, p) in cloud.points.iter().enumerate() {
        let c = match colors {
            Some(c) => c[i],
            None => p.color.map(|x| (x * 255.0).round() as u8),
        };
        let _ = writeln!(
            s,
            "{} {} {} {} {} {}",
            p.position[0] as f32, p.position[1] as f32, p.position[2] as f32, c[0], c[1], c[2]
        );
    }
    s
}

pub fn write_ply(path: &Path, cloud: &ColoredPointCloud, colors: Option<&[[u8; 3]]>) -> Result<()> {
    write(path, encode_ply(cloud, colors).as_bytes())
}
