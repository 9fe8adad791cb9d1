//! Generated datasets: scene directories plus a manifest with the split.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DetrError, Result};
use crate::rgbd::io::{decode_ppm, encode_ppm, read_scene_dir, write_scene_dir, CameraFile, SceneRecord};
use crate::rgbd::{generate_scene, render_scene, CameraIntrinsics, GeneratorConfig, Scene};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Seven of every eight ids (by hash) train, the rest validate.
pub fn split_of(id: &str) -> Split {
    if seed::hash_str(id) % 8 == 7 {
        Split::Val
    } else {
        Split::Train
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed::derive(seed, &format!("scene/{index}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub classes: Vec<String>,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.scenes.iter().filter(move |e| e.split == split).map(|e| e.id.as_str())
    }
}

/// The record a scene directory would load as, without touching disk.
pub fn record_of(id: &str, scene: &Scene) -> Result<SceneRecord> {
    let (color, depth) = render_scene(scene);
    let color = decode_ppm(&encode_ppm(&color)).map_err(DetrError::Format)?;
    Ok(SceneRecord {
        id: id.to_string(),
        color,
        depth,
        camera: CameraFile {
            intrinsics: scene.intrinsics,
            pose: scene.pose,
            room: scene.room,
        },
        boxes: scene.boxes(),
    })
}

/// Scenes `0..count` of a dataset, generated in memory.
pub fn synthesize(count: usize, seed: u64, cfg: &GeneratorConfig, intrinsics: &CameraIntrinsics) -> Result<Vec<SceneRecord>> {
    (0..count)
        .map(|i| {
            let scene = generate_scene(scene_seed(seed, i), cfg, intrinsics)?;
            record_of(&scene_id(i), &scene)
        })
        .collect()
}

/// Writes `out/scenes/<id>/` for every scene and `out/manifest.json`.
pub fn generate(out: &Path, count: usize, seed: u64, cfg: &GeneratorConfig, intrinsics: &CameraIntrinsics) -> Result<Manifest> {
    cfg.validate()?;
    intrinsics.validate()?;
    let scenes_dir = out.join("scenes");
    fs::create_dir_all(&scenes_dir).map_err(|e| DetrError::io(&scenes_dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let id = scene_id(i);
        let scene = generate_scene(scene_seed(seed, i), cfg, intrinsics)?;
        scene.validate(cfg.max_objects)?;
        write_scene_dir(&scenes_dir.join(&id), &scene)?;
        let split = split_of(&id);
        entries.push(ManifestEntry { id, split });
    }
    let manifest = Manifest {
        seed,
        classes: cfg.classes.iter().map(|c| c.name.clone()).collect(),
        scenes: entries,
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("serializable");
    fs::write(&path, text + "\n").map_err(|e| DetrError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| DetrError::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| DetrError::Format(format!("{}: {e}", path.display())))
}

/// Loads the scenes of one split, in manifest order.
pub fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<SceneRecord>> {
    manifest.ids(split).map(|id| read_scene_dir(&dir.join("scenes").join(id))).collect()
}

/// Loads every scene, in manifest order.
pub fn load_all(dir: &Path, manifest: &Manifest) -> Result<Vec<SceneRecord>> {
    manifest
        .scenes
        .iter()
        .map(|e| read_scene_dir(&dir.join("scenes").join(&e.id)))
        .collect()
}
