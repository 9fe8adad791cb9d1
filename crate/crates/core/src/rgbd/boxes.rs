use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::DetrError;

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Signs of the eight box vertices, ordered −−−, −−+, −+−, −++, +−−, +−+, ++−, +++.
pub const VERTEX_SIGNS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, 1.0, 1.0],
];

/// Oriented box in a z-up frame: `size = (w, l, h)` along the box's local
/// x, y, z axes and `yaw` about the vertical axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
    /// Confidence for predictions; 1 for ground truth.
    #[serde(default = "one")]
    pub score: f64,
}

fn one() -> f64 {
    1.0
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class_id: usize) -> Result<Self, DetrError> {
        if size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(DetrError::Contract(format!("box size must be positive, got {size:?}")));
        }
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() {
            return Err(DetrError::Contract("box center/yaw must be finite".into()));
        }
        Ok(Box3D {
            center,
            size,
            yaw: wrap_angle(yaw),
            class_id,
            score: 1.0,
        })
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Box-local coordinates of a point: `R(−yaw)·(p − center)`.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    pub fn to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * q[0] - s * q[1],
            self.center[1] + s * q[0] + c * q[1],
            self.center[2] + q[2],
        ]
    }

    pub fn vertices(&self) -> [[f64; 3]; 8] {
        VERTEX_SIGNS.map(|sg| {
            self.to_world([
                sg[0] * self.size[0] / 2.0,
                sg[1] * self.size[1] / 2.0,
                sg[2] * self.size[2] / 2.0,
            ])
        })
    }

    /// Axis-aligned hull `(min, max)` of the rotated box.
    pub fn aabb(&self) -> ([f64; 3], [f64; 3]) {
        let h = self.hull_half_extents();
        (
            [self.center[0] - h[0], self.center[1] - h[1], self.center[2] - h[2]],
            [self.center[0] + h[0], self.center[1] + h[1], self.center[2] + h[2]],
        )
    }

    pub fn hull_half_extents(&self) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let (s, c) = (s.abs(), c.abs());
        [
            (c * self.size[0] + s * self.size[1]) / 2.0,
            (s * self.size[0] + c * self.size[1]) / 2.0,
            self.size[2] / 2.0,
        ]
    }

    /// Distance from `p` to the box surface (zero on the surface).
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        let q = self.to_local(p);
        let h = [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0];
        let d: Vec<f64> = (0..3).map(|i| q[i].abs() - h[i]).collect();
        let outside = d.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
        let inside = d.iter().copied().fold(f64::NEG_INFINITY, f64::max).min(0.0);
        outside + inside.abs()
    }

    /// IoU of the axis-aligned hulls of two boxes.
    pub fn hull_iou(&self, other: &Box3D) -> f64 {
        let (alo, ahi) = self.aabb();
        let (blo, bhi) = other.aabb();
        let mut inter = 1.0;
        for i in 0..3 {
            let w = ahi[i].min(bhi[i]) - alo[i].max(blo[i]);
            if w <= 0.0 {
                return 0.0;
            }
            inter *= w;
        }
        let vol = |lo: [f64; 3], hi: [f64; 3]| (hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]);
        let union = vol(alo, ahi) + vol(blo, bhi) - inter;
        (inter / union).clamp(0.0, 1.0)
    }
}
