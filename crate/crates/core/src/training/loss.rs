//! Set-prediction loss with deep supervision.

use detr3d_autograd::{Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::matching::Assignment;
use crate::decoder::LayerOutput;
use crate::error::Result;
use crate::nn::Ctx;
use crate::rgbd::Box3D;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub class: f64,
    pub center: f64,
    pub size: f64,
    pub yaw: f64,
    pub iou: f64,
    /// Cross-entropy weight of queries matched to nothing.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            class: 2.0,
            center: 1.0,
            size: 1.0,
            yaw: 0.5,
            iou: 2.0,
            no_object: 0.1,
        }
    }
}

/// Loss terms of one decoder layer, each a `[1]` node.
#[derive(Clone, Copy, Debug)]
pub struct LayerLoss {
    pub class: Var,
    pub center: Var,
    pub size: Var,
    pub yaw: Var,
    pub iou: Var,
    pub total: Var,
}

/// Plain values of a [`LayerLoss`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub class: f64,
    pub center: f64,
    pub size: f64,
    pub yaw: f64,
    pub iou: f64,
    pub total: f64,
}

impl LossValues {
    pub fn read<T: Real>(ctx: &Ctx<'_, T>, l: &LayerLoss) -> Self {
        let v = |x: Var| ctx.g.value(x).item().as_f64();
        LossValues {
            class: v(l.class),
            center: v(l.center),
            size: v(l.size),
            yaw: v(l.yaw),
            iou: v(l.iou),
            total: v(l.total),
        }
    }

    pub fn add(&mut self, o: &LossValues, w: f64) {
        self.class += w * o.class;
        self.center += w * o.center;
        self.size += w * o.size;
        self.yaw += w * o.yaw;
        self.iou += w * o.iou;
        self.total += w * o.total;
    }
}

pub struct LossBreakdown {
    pub layers: Vec<LayerLoss>,
    /// Mean of the layer totals.
    pub total: Var,
}

fn column<T: Real>(ctx: &mut Ctx<'_, T>, values: &[f64]) -> Result<Var> {
    Ok(ctx.g.constant(Tensor::from_f64_slice(&[values.len(), 1], values)?))
}

/// Differentiable IoU of the axis-aligned hulls of matched boxes, `[P×1]`.
fn hull_iou<T: Real>(ctx: &mut Ctx<'_, T>, center: Var, size: Var, yaw: Var, gts: &[&Box3D]) -> Result<Var> {
    let g = &mut ctx.g;
    let (s, c) = (g.sin(yaw), g.cos(yaw));
    let (s, c) = (g.abs(s), g.abs(c));
    let w = g.slice_cols(size, 0, 1)?;
    let l = g.slice_cols(size, 1, 1)?;
    let h = g.slice_cols(size, 2, 1)?;
    let cw = g.mul(c, w)?;
    let sl = g.mul(s, l)?;
    let sw = g.mul(s, w)?;
    let cl = g.mul(c, l)?;
    let ex = g.add(cw, sl)?;
    let ey = g.add(sw, cl)?;
    let ext = g.concat_cols(&[ex, ey, h])?;
    let half = g.scale(ext, 0.5);
    let lo = g.sub(center, half)?;
    let hi = g.add(center, half)?;
    let (mut glo, mut ghi) = (Vec::new(), Vec::new());
    let mut gvol = Vec::new();
    for b in gts {
        let (a, z) = b.aabb();
        glo.extend(a);
        ghi.extend(z);
        gvol.push((z[0] - a[0]) * (z[1] - a[1]) * (z[2] - a[2]));
    }
    let p = gts.len();
    let glo = g.constant(Tensor::from_f64_slice(&[p, 3], &glo)?);
    let ghi = g.constant(Tensor::from_f64_slice(&[p, 3], &ghi)?);
    let top = g.minimum(hi, ghi)?;
    let bot = g.maximum(lo, glo)?;
    let span = g.sub(top, bot)?;
    let span = g.relu(span);
    let sx = g.slice_cols(span, 0, 1)?;
    let sy = g.slice_cols(span, 1, 1)?;
    let sz = g.slice_cols(span, 2, 1)?;
    let inter = g.mul(sx, sy)?;
    let inter = g.mul(inter, sz)?;
    let ex = g.slice_cols(ext, 0, 1)?;
    let ey = g.slice_cols(ext, 1, 1)?;
    let ez = g.slice_cols(ext, 2, 1)?;
    let pvol = g.mul(ex, ey)?;
    let pvol = g.mul(pvol, ez)?;
    let gvol = g.constant(Tensor::from_f64_slice(&[p, 1], &gvol)?);
    let union = g.add(pvol, gvol)?;
    let union = g.sub(union, inter)?;
    Ok(g.div(inter, union)?)
}

/// Loss of one layer's predictions under a fixed assignment.
pub fn layer_loss<T: Real>(
    ctx: &mut Ctx<'_, T>,
    out: &LayerOutput,
    gts: &[Box3D],
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<LayerLoss> {
    let shape = ctx.g.shape(out.logits).to_vec();
    let (m, k) = (shape[0], shape[1]);
    let no_obj = k - 1;
    let mut mask = vec![0.0; m * k];
    for q in 0..m {
        mask[q * k + no_obj] = w.no_object;
    }
    for &(q, t) in assignment {
        mask[q * k + no_obj] = 0.0;
        mask[q * k + gts[t].class_id] = 1.0;
    }
    let logp = ctx.g.log_softmax_rows(out.logits);
    let mask = ctx.g.constant(Tensor::from_f64_slice(&[m, k], &mask)?);
    let picked = ctx.g.mul(logp, mask)?;
    let picked = ctx.g.sum(picked);
    let class = ctx.g.scale(picked, -1.0 / m as f64);

    let norm = 1.0 / gts.len().max(1) as f64;
    let (center, size, yaw, iou) = if assignment.is_empty() {
        let zero = ctx.g.constant(Tensor::scalar(T::zero()));
        (zero, zero, zero, zero)
    } else {
        let qi: Vec<usize> = assignment.iter().map(|p| p.0).collect();
        let matched: Vec<&Box3D> = assignment.iter().map(|p| &gts[p.1]).collect();
        let rows = |f: &dyn Fn(&Box3D) -> Vec<f64>| matched.iter().map(|b| f(b)).collect::<Vec<_>>();
        let gc = ctx.constant_rows(&rows(&|b| b.center.to_vec()))?;
        let gs = ctx.constant_rows(&rows(&|b| b.size.to_vec()))?;
        let gy: Vec<f64> = matched.iter().map(|b| b.yaw).collect();
        let gy = column(ctx, &gy)?;

        let pc = ctx.g.select_rows(out.state.center, &qi)?;
        let pls = ctx.g.select_rows(out.state.log_size, &qi)?;
        let ps = ctx.g.exp(pls);
        let py = ctx.g.select_rows(out.state.yaw, &qi)?;

        let d = ctx.g.sub(pc, gc)?;
        let d = ctx.g.abs(d);
        let d = ctx.g.sum(d);
        let center = ctx.g.scale(d, norm);
        let d = ctx.g.sub(ps, gs)?;
        let d = ctx.g.abs(d);
        let d = ctx.g.sum(d);
        let size = ctx.g.scale(d, norm);
        let d = ctx.g.sub(py, gy)?;
        let (ds, dc) = (ctx.g.sin(d), ctx.g.cos(d));
        let wrapped = ctx.g.atan2(ds, dc)?;
        let d = ctx.g.abs(wrapped);
        let d = ctx.g.sum(d);
        let yaw = ctx.g.scale(d, norm);
        let ious = hull_iou(ctx, pc, ps, py, &matched)?;
        let s = ctx.g.sum(ious);
        let s = ctx.g.scale(s, -norm);
        let iou = ctx.g.add_scalar(s, assignment.len() as f64 * norm);
        (center, size, yaw, iou)
    };
    let mut total = ctx.g.scale(class, w.class);
    for (term, wt) in [(center, w.center), (size, w.size), (yaw, w.yaw), (iou, w.iou)] {
        let t = ctx.g.scale(term, wt);
        total = ctx.g.add(total, t)?;
    }
    Ok(LayerLoss { class, center, size, yaw, iou, total })
}

/// Deep supervision: every layer is scored against the same assignment and
/// the totals are averaged.
pub fn set_loss<T: Real>(
    ctx: &mut Ctx<'_, T>,
    outs: &[LayerOutput],
    gts: &[Box3D],
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let mut layers = Vec::with_capacity(outs.len());
    let mut sum: Option<Var> = None;
    for o in outs {
        let l = layer_loss(ctx, o, gts, assignment, w)?;
        sum = Some(match sum {
            None => l.total,
            Some(s) => ctx.g.add(s, l.total)?,
        });
        layers.push(l);
    }
    let sum = sum.unwrap_or_else(|| ctx.g.constant(Tensor::scalar(T::zero())));
    let total = ctx.g.scale(sum, 1.0 / outs.len().max(1) as f64);
    Ok(LossBreakdown { layers, total })
}
