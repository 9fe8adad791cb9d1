//! Point geometry features: xyz embedding followed by KNN edge communication.

use detr3d_autograd::{ParamStore, Real, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DetrError, Result};
use crate::nn::{Ctx, LinearBnGelu};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub d: usize,
    pub k: usize,
    pub layers: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { d: 16, k: 5, layers: 2 }
    }
}

/// `k` neighbor indices per point, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    pub k: usize,
    pub idx: Vec<usize>,
}

impl NeighborIndex {
    pub fn len(&self) -> usize {
        self.idx.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Exact k nearest neighbors by squared distance, excluding the point
/// itself; ties go to the lower index.
pub fn knn(points: &[[f64; 3]], k: usize) -> Result<NeighborIndex> {
    let n = points.len();
    if k == 0 || n <= k {
        return Err(DetrError::Contract(format!("knn needs 1 <= k < N, got k={k}, N={n}")));
    }
    let mut idx = Vec::with_capacity(n * k);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, p) in points.iter().enumerate() {
        best.clear();
        for (j, q) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = dist2(p, q);
            // j increases, so an equal distance never displaces an earlier index.
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, j));
            best.truncate(k);
        }
        idx.extend(best.iter().map(|&(_, j)| j));
    }
    Ok(NeighborIndex { k, idx })
}

#[derive(Clone, Debug)]
pub struct GeometryEncoder {
    pub cfg: GeometryConfig,
    pub embed: LinearBnGelu,
    pub layers: Vec<LinearBnGelu>,
}

impl GeometryEncoder {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &GeometryConfig) -> Result<Self> {
        let embed = LinearBnGelu::new(store, rng, "geometry.embed", 3, cfg.d)?;
        let layers = (0..cfg.layers)
            .map(|i| LinearBnGelu::new(store, rng, &format!("geometry.comm{i}"), 2 * cfg.d, cfg.d))
            .collect::<Result<_>>()?;
        Ok(GeometryEncoder { cfg: cfg.clone(), embed, layers })
    }

    /// `[N×3] → [N×d]`.
    pub fn embed<T: Real>(&self, ctx: &mut Ctx<'_, T>, xyz: Var) -> Result<Var> {
        ctx.linear_bn_gelu(&self.embed, xyz)
    }

    /// `f'_i = max_{j ∈ idx[i]} MLP([f_i ; f_j − f_i])`.
    pub fn communicate<T: Real>(&self, ctx: &mut Ctx<'_, T>, layer: usize, f: Var, idx: &NeighborIndex) -> Result<Var> {
        let k = idx.k;
        let centers: Vec<usize> = (0..idx.len()).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let fi = ctx.g.select_rows(f, &centers)?;
        let fj = ctx.g.select_rows(f, &idx.idx)?;
        let diff = ctx.g.sub(fj, fi)?;
        let edge = ctx.g.concat_cols(&[fi, diff])?;
        let h = ctx.linear_bn_gelu(&self.layers[layer], edge)?;
        Ok(ctx.g.group_max(h, k)?)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, xyz: Var, idx: &NeighborIndex) -> Result<Var> {
        let mut f = self.embed(ctx, xyz)?;
        for l in 0..self.layers.len() {
            f = self.communicate(ctx, l, f, idx)?;
        }
        Ok(f)
    }
}
