use super::boxes::Box3D;
use super::camera::{to_upright, ColorFrame, DepthFrame};
use super::scene::Scene;

/// Flat colors of the room faces, ordered x−, x+, y−, y+, floor, ceiling.
pub const WALL_COLORS: [[u8; 3]; 6] = [
    [128, 128, 120],
    [120, 124, 128],
    [136, 132, 128],
    [124, 128, 124],
    [96, 92, 88],
    [200, 200, 196],
];

/// What a pixel's ray hit first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Object(usize),
    Wall(usize),
}

/// Slab test in the box's local frame: `(t_near, t_far, axis of t_far)`.
fn slab(b: &Box3D, dir: [f64; 3]) -> Option<(f64, f64, usize, bool)> {
    let o = b.to_local([0.0; 3]);
    let (s, c) = b.yaw.sin_cos();
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut far_axis = 0;
    for i in 0..3 {
        let h = b.size[i] / 2.0;
        if d[i].abs() < 1e-300 {
            if o[i].abs() > h {
                return None;
            }
            continue;
        }
        let t1 = (-h - o[i]) / d[i];
        let t2 = (h - o[i]) / d[i];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        t_near = t_near.max(lo);
        if hi < t_far {
            t_far = hi;
            far_axis = i;
        }
    }
    (t_near <= t_far).then_some((t_near, t_far, far_axis, d[far_axis] > 0.0))
}

/// Ray parameter and surface for camera-frame direction `dir` (unit Z).
pub fn trace(scene: &Scene, dir_cam: [f64; 3]) -> (f64, Surface) {
    let dir = to_upright(dir_cam);
    let (_, t_wall, axis, positive) = slab(&scene.room_box(), dir).expect("camera is inside the room");
    let mut best = (t_wall, Surface::Wall(2 * axis + positive as usize));
    for (i, o) in scene.objects.iter().enumerate() {
        if let Some((t_near, _, _, _)) = slab(&o.bbox, dir) {
            if t_near > 0.0 && t_near < best.0 {
                best = (t_near, Surface::Object(i));
            }
        }
    }
    best
}

fn pixels(scene: &Scene) -> impl Iterator<Item = (f64, Surface)> + '_ {
    let k = scene.intrinsics;
    (0..k.height).flat_map(move |v| (0..k.width).map(move |u| trace(scene, k.ray(u as f64, v as f64))))
}

pub fn render_labels(scene: &Scene) -> Vec<Surface> {
    pixels(scene).map(|(_, s)| s).collect()
}

pub fn surface_color(scene: &Scene, s: Surface) -> [u8; 3] {
    match s {
        Surface::Object(i) => scene.objects[i].color,
        Surface::Wall(f) => WALL_COLORS[f],
    }
}

pub fn to_unit(c: [u8; 3]) -> [f32; 3] {
    c.map(|x| x as f32 / 255.0)
}

/// Casts one ray per pixel center; depth is the camera-frame Z of the
/// nearest hit and color is that surface's flat color.
pub fn render_scene(scene: &Scene) -> (ColorFrame, DepthFrame) {
    let k = scene.intrinsics;
    let mut color = Vec::with_capacity(k.width * k.height);
    let mut depth = Vec::with_capacity(k.width * k.height);
    for (t, s) in pixels(scene) {
        color.push(to_unit(surface_color(scene, s)));
        depth.push(t as f32);
    }
    (
        ColorFrame { width: k.width, height: k.height, data: color },
        DepthFrame { width: k.width, height: k.height, data: depth },
    )
}

/// Distance from an upright-frame point to the nearest scene surface, and
/// that surface.
pub fn nearest_surface(scene: &Scene, p: [f64; 3]) -> (f64, Surface) {
    let room = scene.room_box();
    let q = room.to_local(p);
    let mut best = (f64::INFINITY, Surface::Wall(0));
    for axis in 0..3 {
        let h = room.size[axis] / 2.0;
        for (positive, plane) in [(false, -h), (true, h)] {
            let d = (q[axis] - plane).abs();
            if d < best.0 {
                best = (d, Surface::Wall(2 * axis + positive as usize));
            }
        }
    }
    for (i, o) in scene.objects.iter().enumerate() {
        let d = o.bbox.surface_distance(p);
        if d < best.0 {
            best = (d, Surface::Object(i));
        }
    }
    best
}
