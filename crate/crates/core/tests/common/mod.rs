//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use detr3d_core::eval::Detection;
use detr3d_core::rgbd::Box3D;

/// Row-major f64 matrix used by the straight-line oracles.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        Mat::new(rows.len(), cols, rows.concat())
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matmul(&self, o: &Mat) -> Mat {
        assert_eq!(self.cols, o.rows);
        let mut out = vec![0.0; self.rows * o.cols];
        for i in 0..self.rows {
            for j in 0..o.cols {
                out[i * o.cols + j] = (0..self.cols).map(|k| self.at(i, k) * o.at(k, j)).sum();
            }
        }
        Mat::new(self.rows, o.cols, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::new(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip(&self, o: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!((self.rows, self.cols), (o.rows, o.cols));
        Mat::new(self.rows, self.cols, self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn cols_range(&self, start: usize, len: usize) -> Mat {
        let data = (0..self.rows).flat_map(|i| self.row(i)[start..start + len].to_vec()).collect();
        Mat::new(self.rows, len, data)
    }

    pub fn hcat(parts: &[Mat]) -> Mat {
        let rows = parts[0].rows;
        let cols = parts.iter().map(|p| p.cols).sum();
        let data = (0..rows).flat_map(|i| parts.iter().flat_map(move |p| p.row(i).to_vec())).collect();
        Mat::new(rows, cols, data)
    }

    pub fn max_abs_diff(&self, o: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (o.rows, o.cols));
        self.data.iter().zip(&o.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn linear(x: &Mat, w: &Mat, b: Option<&[f64]>) -> Mat {
    let mut y = x.matmul(w);
    if let Some(b) = b {
        for i in 0..y.rows {
            for j in 0..y.cols {
                y.data[i * y.cols + j] += b[j];
            }
        }
    }
    y
}

/// Training-mode batchnorm with biased batch variance.
pub fn batchnorm_train(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    let n = x.rows as f64;
    let mut out = x.clone();
    for j in 0..x.cols {
        let mean = (0..x.rows).map(|i| x.at(i, j)).sum::<f64>() / n;
        let var = (0..x.rows).map(|i| (x.at(i, j) - mean).powi(2)).sum::<f64>() / n;
        for i in 0..x.rows {
            out.data[i * x.cols + j] = gamma[j] * (x.at(i, j) - mean) / (var + eps).sqrt() + beta[j];
        }
    }
    out
}

pub fn layernorm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    let c = x.cols as f64;
    let mut out = x.clone();
    for i in 0..x.rows {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / c;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
        for j in 0..x.cols {
            out.data[i * x.cols + j] = gamma[j] * (r[j] - mean) / (var + eps).sqrt() + beta[j];
        }
    }
    out
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// `softmax(q kᵀ/√d_h + bias_h) v` per head, one explicit weight per pair.
pub fn dense_attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, bias: &[Mat]) -> Mat {
    let dh = q.cols / heads;
    let mut parts = Vec::new();
    for h in 0..heads {
        let mut out = vec![0.0; q.rows * dh];
        for i in 0..q.rows {
            let scores: Vec<f64> = (0..k.rows)
                .map(|j| {
                    let dot: f64 = (0..dh).map(|c| q.at(i, h * dh + c) * k.at(j, h * dh + c)).sum();
                    dot / (dh as f64).sqrt() + bias.get(h).map_or(0.0, |b| b.at(i, j))
                })
                .collect();
            let w = softmax(&scores);
            for (j, wj) in w.iter().enumerate() {
                for c in 0..dh {
                    out[i * dh + c] += wj * v.at(j, h * dh + c);
                }
            }
        }
        parts.push(Mat::new(q.rows, dh, out));
    }
    Mat::hcat(&parts)
}

/// ReLU linear attention written as explicit per-pair weights
/// `w_ij = φ(q_i)·φ(k_j) / (Σ_j' φ(q_i)·φ(k_j') + eps)`.
pub fn dense_linear_attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, eps: f64) -> Mat {
    let dh = q.cols / heads;
    let relu = |x: f64| x.max(0.0);
    let mut parts = Vec::new();
    for h in 0..heads {
        let mut out = vec![0.0; q.rows * dh];
        for i in 0..q.rows {
            let w: Vec<f64> = (0..k.rows)
                .map(|j| (0..dh).map(|c| relu(q.at(i, h * dh + c)) * relu(k.at(j, h * dh + c))).sum())
                .collect();
            let den: f64 = w.iter().sum::<f64>() + eps;
            for (j, wj) in w.iter().enumerate() {
                for c in 0..dh {
                    out[i * dh + c] += wj / den * v.at(j, h * dh + c);
                }
            }
        }
        parts.push(Mat::new(q.rows, dh, out));
    }
    Mat::hcat(&parts)
}

/// All-pairs KNN: sort every other point by `(squared distance, index)`.
pub fn brute_knn(points: &[[f64; 3]], k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(points.len() * k);
    for (i, p) in points.iter().enumerate() {
        let mut d: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2), j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(d[..k].iter().map(|&(_, j)| j));
    }
    out
}

/// Every assignment of `min(M, G)` pairs, enumerated; returns the optimal
/// total and the lexicographically smallest optimal pair list (pairs sorted
/// by query index), treating totals within `1e-9·(1 + |best|)` as equal.
pub fn brute_assignment(cost: &[Vec<f64>]) -> (f64, Vec<(usize, usize)>) {
    let m = cost.len();
    let g = cost.first().map_or(0, |r| r.len());
    if m == 0 || g == 0 {
        return (0.0, Vec::new());
    }
    let mut all: Vec<(f64, Vec<(usize, usize)>)> = Vec::new();
    let mut pick = Vec::new();
    if m <= g {
        // injective map query → gt
        fn rec(cost: &[Vec<f64>], i: usize, used: &mut Vec<bool>, pick: &mut Vec<(usize, usize)>, all: &mut Vec<(f64, Vec<(usize, usize)>)>) {
            if i == cost.len() {
                let t = pick.iter().map(|&(a, b)| cost[a][b]).sum();
                all.push((t, pick.clone()));
                return;
            }
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    pick.push((i, j));
                    rec(cost, i + 1, used, pick, all);
                    pick.pop();
                    used[j] = false;
                }
            }
        }
        rec(cost, 0, &mut vec![false; g], &mut pick, &mut all);
    } else {
        // injective map gt → query
        fn rec(cost: &[Vec<f64>], j: usize, g: usize, used: &mut Vec<bool>, pick: &mut Vec<(usize, usize)>, all: &mut Vec<(f64, Vec<(usize, usize)>)>) {
            if j == g {
                let mut pairs = pick.clone();
                pairs.sort_unstable();
                let t = pairs.iter().map(|&(a, b)| cost[a][b]).sum();
                all.push((t, pairs));
                return;
            }
            for i in 0..used.len() {
                if !used[i] {
                    used[i] = true;
                    pick.push((i, j));
                    rec(cost, j + 1, g, used, pick, all);
                    pick.pop();
                    used[i] = false;
                }
            }
        }
        rec(cost, 0, g, &mut vec![false; m], &mut pick, &mut all);
    }
    let best = all.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * (1.0 + best.abs());
    let chosen = all.into_iter().filter(|a| a.0 <= best + tol).map(|a| a.1).min().expect("non-empty");
    (best, chosen)
}

/// Axis-aligned hull IoU from the eight vertices of each box.
pub fn vertex_hull_iou(a: &Box3D, b: &Box3D) -> f64 {
    let hull = |x: &Box3D| {
        let v = x.vertices();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in v {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    };
    let (al, ah) = hull(a);
    let (bl, bh) = hull(b);
    let vol = |l: [f64; 3], h: [f64; 3]| (0..3).map(|k| (h[k] - l[k]).max(0.0)).product::<f64>();
    let il = [al[0].max(bl[0]), al[1].max(bl[1]), al[2].max(bl[2])];
    let ih = [ah[0].min(bh[0]), ah[1].min(bh[1]), ah[2].min(bh[2])];
    let inter = vol(il, ih);
    inter / (vol(al, ah) + vol(bl, bh) - inter)
}

/// Greedy matching plus point-by-point PR enumeration: at every true
/// positive, take the best precision reached at that recall or later and
/// credit it with the recall step.
pub fn brute_ap(dets: &[Detection], gts: &BTreeMap<String, Vec<Box3D>>, class: usize, thresh: f64) -> Option<f64> {
    let n_gt = gts.values().flatten().filter(|g| g.class_id == class).count();
    if n_gt == 0 {
        return None;
    }
    let mut mine: Vec<(usize, &Detection)> = dets.iter().enumerate().filter(|(_, d)| d.class_id == class).collect();
    mine.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.1.scene_id.cmp(&b.1.scene_id)).then(a.0.cmp(&b.0)));
    let mut taken: BTreeMap<(String, usize), bool> = BTreeMap::new();
    let mut hits = Vec::new();
    for (_, d) in &mine {
        let db = Box3D {
            center: d.center,
            size: d.size,
            yaw: d.yaw,
            class_id: d.class_id,
            score: d.score,
        };
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.get(&d.scene_id).into_iter().flatten().enumerate() {
            if g.class_id != class || taken.contains_key(&(d.scene_id.clone(), j)) {
                continue;
            }
            let iou = vertex_hull_iou(&db, g);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, iou)) if iou >= thresh => {
                taken.insert((d.scene_id.clone(), j), true);
                hits.push(true);
            }
            _ => hits.push(false),
        }
    }
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64, h));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(r, _, h)) in points.iter().enumerate() {
        if !h {
            continue;
        }
        let best_after = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev_recall) * best_after;
        prev_recall = r;
    }
    Some(ap)
}
