//! Image texture features: two strided convolution stages, a ReLU
//! linear-attention block, and bilinear sampling at point pixels.

use detr3d_autograd::{ConvGeom, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DetrError, Result};
use crate::nn::{Ctx, Linear, LinearBnGelu};
use crate::rgbd::ColorFrame;

pub const ATTN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualConfig {
    pub widths: [usize; 2],
    pub strides: [usize; 2],
    pub heads: usize,
    pub out_dim: usize,
}

impl Default for VisualConfig {
    fn default() -> Self {
        VisualConfig {
            widths: [8, 16],
            strides: [2, 2],
            heads: 2,
            out_dim: 16,
        }
    }
}

/// Channels-last feature grid on the tape.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub value: Var,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub cfg: VisualConfig,
    pub stage1: LinearBnGelu,
    pub stage2: LinearBnGelu,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
}

pub fn image_tensor<T: Real>(frame: &ColorFrame) -> Tensor<T> {
    let data = frame.data.iter().flatten().map(|&c| T::from_f64(c as f64)).collect();
    Tensor::new(&[frame.width * frame.height, 3], data).expect("frame layout")
}

/// Multi-head ReLU linear attention over `[T×C]` projections:
/// `φ(q)·(φ(k)ᵀ v) / (φ(q)·(φ(k)ᵀ 1) + eps)` per head, heads concatenated.
pub fn relu_linear_attention<T: Real>(ctx: &mut Ctx<'_, T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let c = ctx.g.shape(q)[1];
    if heads == 0 || c % heads != 0 {
        return Err(DetrError::Contract(format!("{c} channels do not split into {heads} heads")));
    }
    let dh = c / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = ctx.g.slice_cols(q, h * dh, dh)?;
        let kh = ctx.g.slice_cols(k, h * dh, dh)?;
        let vh = ctx.g.slice_cols(v, h * dh, dh)?;
        let qh = ctx.g.relu(qh);
        let kh = ctx.g.relu(kh);
        let kt = ctx.g.transpose(kh)?;
        let kv = ctx.g.matmul(kt, vh)?;
        let num = ctx.g.matmul(qh, kv)?;
        let ksum = ctx.g.sum_rows(kh);
        let den = ctx.g.matmul_nt(qh, ksum)?;
        let den = ctx.g.add_scalar(den, ATTN_EPS);
        outs.push(ctx.g.div(num, den)?);
    }
    Ok(ctx.g.concat_cols(&outs)?)
}

impl VisualEncoder {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &VisualConfig) -> Result<Self> {
        let [w1, w2] = cfg.widths;
        if w2 != cfg.out_dim {
            return Err(DetrError::Config(format!(
                "visual stage width {w2} must equal the output dim {}",
                cfg.out_dim
            )));
        }
        Ok(VisualEncoder {
            cfg: cfg.clone(),
            stage1: LinearBnGelu::new(store, rng, "visual.stage1", 9 * 3, w1)?,
            stage2: LinearBnGelu::new(store, rng, "visual.stage2", 9 * w1, w2)?,
            q: Linear::new(store, rng, "visual.attn.q", w2, w2)?,
            k: Linear::new(store, rng, "visual.attn.k", w2, w2)?,
            v: Linear::new(store, rng, "visual.attn.v", w2, w2)?,
            proj: Linear::new(store, rng, "visual.attn.proj", w2, w2)?,
        })
    }

    pub fn encode_image<T: Real>(&self, ctx: &mut Ctx<'_, T>, image: Var, height: usize, width: usize) -> Result<FeatureMap> {
        Ok(self.encode_images(ctx, &[(image, height, width)])?.remove(0))
    }

    /// Encodes `(image, height, width)` triples; the convolution stages
    /// normalize over all images together.
    pub fn encode_images<T: Real>(&self, ctx: &mut Ctx<'_, T>, images: &[(Var, usize, usize)]) -> Result<Vec<FeatureMap>> {
        let geom = |h, w, c, stride| ConvGeom {
            h,
            w,
            c,
            kernel: 3,
            stride,
            pad: 1,
        };
        let g1: Vec<ConvGeom> = images.iter().map(|&(_, h, w)| geom(h, w, 3, self.cfg.strides[0])).collect();
        let cols = images
            .iter()
            .zip(&g1)
            .map(|(&(img, _, _), &g)| ctx.g.im2col(img, g))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let x = ctx.linear_bn_gelu_parts(&self.stage1, &cols)?;
        let g2: Vec<ConvGeom> = g1
            .iter()
            .map(|g| geom(g.out_h(), g.out_w(), self.cfg.widths[0], self.cfg.strides[1]))
            .collect();
        let cols = x
            .iter()
            .zip(&g2)
            .map(|(&x, &g)| ctx.g.im2col(x, g))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let xs = ctx.linear_bn_gelu_parts(&self.stage2, &cols)?;
        let mut maps = Vec::with_capacity(images.len());
        for (x, g) in xs.into_iter().zip(&g2) {
            let q = ctx.linear(&self.q, x)?;
            let k = ctx.linear(&self.k, x)?;
            let v = ctx.linear(&self.v, x)?;
            let a = relu_linear_attention(ctx, q, k, v, self.cfg.heads)?;
            let a = ctx.linear(&self.proj, a)?;
            maps.push(FeatureMap {
                value: ctx.g.add(x, a)?,
                height: g.out_h(),
                width: g.out_w(),
                stride: self.cfg.strides[0] * self.cfg.strides[1],
            });
        }
        Ok(maps)
    }
}

/// Bilinear taps for pixel `(u, v)` at feature coordinate
/// `(u/s − 0.5, v/s − 0.5)`, clamped to the map.
pub fn bilinear_taps(map_h: usize, map_w: usize, stride: usize, u: f64, v: f64) -> Result<([usize; 4], [f64; 4])> {
    if !(u.is_finite() && v.is_finite()) {
        return Err(DetrError::Contract(format!("non-finite pixel ({u}, {v})")));
    }
    let s = stride as f64;
    let x = (u / s - 0.5).clamp(0.0, (map_w - 1) as f64);
    let y = (v / s - 0.5).clamp(0.0, (map_h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(map_w - 1), (y0 + 1).min(map_h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    Ok((
        [y0 * map_w + x0, y0 * map_w + x1, y1 * map_w + x0, y1 * map_w + x1],
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    ))
}

/// Samples one feature row per pixel: `[N×2] pixels → [N×C]`.
pub fn sample_point_features<T: Real>(ctx: &mut Ctx<'_, T>, map: &FeatureMap, pixels: &[[f64; 2]]) -> Result<Var> {
    let mut index = Vec::with_capacity(4 * pixels.len());
    let mut weight = Vec::with_capacity(4 * pixels.len());
    for p in pixels {
        let (i, w) = bilinear_taps(map.height, map.width, map.stride, p[0], p[1])?;
        index.extend(i);
        weight.extend(w.map(T::from_f64));
    }
    Ok(ctx.g.gather_rows(map.value, 4, index, weight)?)
}
