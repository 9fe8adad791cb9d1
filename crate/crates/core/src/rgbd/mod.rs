//! Camera model, RGBD unprojection and a synthetic ray-cast scene source.

pub mod boxes;
pub mod camera;
pub mod io;
pub mod render;
pub mod scene;

pub use boxes::{wrap_angle, Box3D, VERTEX_SIGNS};
pub use camera::{
    from_upright, sample_points, to_upright, unproject, CameraIntrinsics, CloudPoint, ColorFrame,
    ColoredPointCloud, DepthFrame,
};
pub use render::{render_scene, Surface};
pub use scene::{generate_scene, CameraPose, ClassProfile, GeneratorConfig, Room, Scene, SceneObject};
