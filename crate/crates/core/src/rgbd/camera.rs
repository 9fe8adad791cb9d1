use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DetrError, Result};
use crate::seed;

/// Pinhole intrinsics in pixels. Camera frame: +X right, +Y down, +Z forward;
/// pixel `(u, v)` = (column, row) with integer coordinates at pixel centers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        CameraIntrinsics {
            fx: 110.0,
            fy: 110.0,
            cx: 64.0,
            cy: 48.0,
            width: 128,
            height: 96,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(DetrError::Contract(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Applies `Depth(u,v) · K⁻¹ · (u, v, 1)ᵀ`.
    pub fn unproject_pixel(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        [(u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth]
    }

    /// Camera-frame point to `(u, v, depth)`.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64, f64) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy, p[2])
    }

    /// Camera-frame direction of the ray through pixel `(u, v)`, scaled so its
    /// Z component is 1 (the ray parameter then equals depth).
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

/// Camera frame → upright frame (x right, y forward, z up).
pub fn to_upright(p: [f64; 3]) -> [f64; 3] {
    [p[0], p[2], -p[1]]
}

pub fn from_upright(q: [f64; 3]) -> [f64; 3] {
    [q[0], -q[2], q[1]]
}

/// Per-pixel depth in meters, 0 = invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthFrame {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(DetrError::Contract(format!(
                "depth frame {width}x{height} has {} values",
                data.len()
            )));
        }
        if data.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(DetrError::Contract("depth values must be finite and >= 0".into()));
        }
        Ok(DepthFrame { width, height, data })
    }

    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }
}

/// RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

impl ColorFrame {
    pub fn new(width: usize, height: usize, data: Vec<[f32; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(DetrError::Contract(format!(
                "color frame {width}x{height} has {} pixels",
                data.len()
            )));
        }
        if data.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(DetrError::Contract("color channels must lie in [0, 1]".into()));
        }
        Ok(ColorFrame { width, height, data })
    }

    pub fn at(&self, u: usize, v: usize) -> [f32; 3] {
        self.data[v * self.width + u]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CloudPoint {
    /// Camera frame, meters.
    pub position: [f64; 3],
    pub color: [f32; 3],
    /// Source pixel `(u, v)`.
    pub pixel: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ColoredPointCloud {
    pub points: Vec<CloudPoint>,
}

impl ColoredPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Lifts every pixel with positive depth into a colored camera-frame point.
pub fn unproject(depth: &DepthFrame, color: &ColorFrame, k: &CameraIntrinsics) -> Result<ColoredPointCloud> {
    if depth.width != k.width || depth.height != k.height || color.width != k.width || color.height != k.height {
        return Err(DetrError::Contract(format!(
            "frame sizes depth {}x{}, color {}x{} do not match intrinsics {}x{}",
            depth.width, depth.height, color.width, color.height, k.width, k.height
        )));
    }
    let mut points = Vec::new();
    for v in 0..k.height {
        for u in 0..k.width {
            let d = depth.at(u, v);
            if d > 0.0 {
                points.push(CloudPoint {
                    position: k.unproject_pixel(u as f64, v as f64, d as f64),
                    color: color.at(u, v),
                    pixel: [u as f64, v as f64],
                });
            }
        }
    }
    if points.is_empty() {
        return Err(DetrError::EmptyCloud);
    }
    Ok(ColoredPointCloud { points })
}

/// Draws exactly `n` points. With enough points this is a seeded uniform
/// sample without replacement; otherwise every point appears once and the
/// remainder is drawn with replacement. The result order is shuffled.
pub fn sample_points(cloud: &ColoredPointCloud, n: usize, seed: u64) -> Result<ColoredPointCloud> {
    if n == 0 {
        return Err(DetrError::Contract("sample size must be positive".into()));
    }
    if cloud.is_empty() {
        return Err(DetrError::EmptyCloud);
    }
    let mut rng = seed::rng(seed, "sample_points");
    let len = cloud.len();
    let idx: Vec<usize> = if len >= n {
        rand::seq::index::sample(&mut rng, len, n).into_vec()
    } else {
        let mut all: Vec<usize> = (0..len).collect();
        all.extend((0..n - len).map(|_| rng.gen_range(0..len)));
        all.shuffle(&mut rng);
        all
    };
    Ok(ColoredPointCloud {
        points: idx.into_iter().map(|i| cloud.points[i].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn k640() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }

    #[test]
    fn principal_point_is_on_axis() {
        let k = k640();
        assert_eq!(k.unproject_pixel(k.cx, k.cy, 3.5), [0.0, 0.0, 3.5]);
    }

    #[test]
    fn inverse_intrinsics_hand_value() {
        // K⁻¹·(420, 340, 1) = ((420−320)/500, (340−240)/500, 1) = (0.2, 0.2, 1); × 2
        let p = k640().unproject_pixel(420.0, 340.0, 2.0);
        assert_abs_diff_eq!(p[0], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.4, epsilon = 1e-15);
        assert_eq!(p[2], 2.0);
    }

    #[test]
    fn single_valid_pixel_gives_single_point() {
        let k = CameraIntrinsics { width: 4, height: 3, cx: 2.0, cy: 1.5, ..Default::default() };
        let mut d = vec![0.0f32; 12];
        d[7] = 1.5;
        let depth = DepthFrame::new(4, 3, d).unwrap();
        let color = ColorFrame::new(4, 3, vec![[0.5, 0.25, 1.0]; 12]).unwrap();
        let cloud = unproject(&depth, &color, &k).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.points[0].pixel, [3.0, 1.0]);
    }

    #[test]
    fn all_invalid_depth_is_an_error() {
        let k = CameraIntrinsics { width: 2, height: 2, cx: 1.0, cy: 1.0, ..Default::default() };
        let depth = DepthFrame::new(2, 2, vec![0.0; 4]).unwrap();
        let color = ColorFrame::new(2, 2, vec![[0.0; 3]; 4]).unwrap();
        assert!(matches!(unproject(&depth, &color, &k), Err(DetrError::EmptyCloud)));
    }

    #[test]
    fn upright_round_trip() {
        let p = [0.3, -1.2, 4.0];
        assert_eq!(from_upright(to_upright(p)), p);
        assert_eq!(to_upright([0.0, -1.0, 0.0]), [0.0, 0.0, 1.0]);
    }

    fn line_cloud(n: usize) -> ColoredPointCloud {
        ColoredPointCloud {
            points: (0..n)
                .map(|i| CloudPoint {
                    position: [i as f64, 0.0, 1.0],
                    color: [0.0; 3],
                    pixel: [i as f64, 0.0],
                })
                .collect(),
        }
    }

    #[test]
    fn sampling_full_size_is_permutation() {
        let c = line_cloud(50);
        let s = sample_points(&c, 50, 9).unwrap();
        let mut xs: Vec<usize> = s.points.iter().map(|p| p.position[0] as usize).collect();
        xs.sort_unstable();
        assert_eq!(xs, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn sampling_is_deterministic_and_pads() {
        let c = line_cloud(10);
        assert_eq!(sample_points(&c, 1, 4).unwrap(), sample_points(&c, 1, 4).unwrap());
        let s = sample_points(&c, 25, 4).unwrap();
        assert_eq!(s.len(), 25);
        for i in 0..10 {
            assert!(s.points.iter().any(|p| p.position[0] as usize == i));
        }
        assert!(sample_points(&c, 0, 4).is_err());
    }

    #[test]
    fn sampling_frequency_is_uniform() {
        // 1000 seeds, 5 of 40 points: each point is picked with p = 1/8.
        let c = line_cloud(40);
        let mut counts = [0usize; 40];
        for seed in 0..1000 {
            for p in sample_points(&c, 5, seed).unwrap().points {
                counts[p.position[0] as usize] += 1;
            }
        }
        let (n, p) = (1000.0f64, 5.0 / 40.0);
        let mean = n * p;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for &k in &counts {
            assert!((k as f64 - mean).abs() <= 3.0 * sigma + 1.0, "{counts:?}");
        }
    }
}
