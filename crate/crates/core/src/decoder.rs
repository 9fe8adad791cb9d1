//! Set-prediction decoder: object queries refined layer by layer with
//! self-attention, cross-attention biased by vertex relative position
//! encoding in each query box's canonical frame, and box refinement.

use detr3d_autograd::{ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DetrError, Result};
use crate::nn::{Ctx, LayerNorm, Linear};
use crate::rgbd::boxes::{Box3D, VERTEX_SIGNS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub content_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub queries: usize,
    pub ffn_dim: usize,
    pub rpe_hidden: usize,
    /// Box size decoded from a zero size output.
    pub default_size: [f64; 3],
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            content_dim: 64,
            heads: 2,
            layers: 3,
            queries: 16,
            ffn_dim: 128,
            rpe_hidden: 16,
            default_size: [0.7, 0.6, 0.8],
        }
    }
}

/// `(p' − v'_j) / size` for the 8 canonical vertices, where
/// `p' = R(−yaw)·(p − center)`.
pub fn canonical_offsets(p: [f64; 3], b: &Box3D) -> [f64; 24] {
    let q = b.to_local(p);
    let mut out = [0.0; 24];
    for (j, s) in VERTEX_SIGNS.iter().enumerate() {
        for a in 0..3 {
            out[3 * j + a] = (q[a] - s[a] * b.size[a] / 2.0) / b.size[a];
        }
    }
    out
}

/// Farthest-point sampling from index 0; ties go to the lower index.
pub fn farthest_point_sampling(points: &[[f64; 3]], m: usize) -> Result<Vec<usize>> {
    if m > points.len() {
        return Err(DetrError::Contract(format!(
            "cannot seed {m} queries from {} points",
            points.len()
        )));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let d2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    let mut chosen = vec![0];
    let mut min_d: Vec<f64> = points.iter().map(|p| d2(p, &points[0])).collect();
    while chosen.len() < m {
        let mut best = 0;
        for i in 1..points.len() {
            if min_d[i] > min_d[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (i, p) in points.iter().enumerate() {
            min_d[i] = min_d[i].min(d2(p, &points[best]));
        }
    }
    Ok(chosen)
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub sa_q: Linear,
    pub sa_k: Linear,
    pub sa_v: Linear,
    pub sa_out: Linear,
    pub ln1: LayerNorm,
    pub ca_q: Linear,
    pub ca_out: Linear,
    pub ln2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln3: LayerNorm,
    pub cls: Linear,
    pub ref1: Linear,
    pub ref2: Linear,
    pub rpe1: Linear,
    pub rpe2: Linear,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub num_classes: usize,
    pub init_content: Linear,
    pub init_ffn1: Linear,
    pub init_ffn2: Linear,
    pub mem_proj: Linear,
    pub mem_pos: Linear,
    pub mem_key: Linear,
    pub mem_value: Linear,
    pub query_pos: Linear,
    pub layers: Vec<DecoderLayer>,
}

/// Query state on the tape: content `[M×D]`, center `[M×3]`,
/// log-size `[M×3]`, yaw `[M×1]`.
#[derive(Clone, Copy, Debug)]
pub struct QueryState {
    pub content: Var,
    pub center: Var,
    pub log_size: Var,
    pub yaw: Var,
}

/// One layer's predictions for deep supervision.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub state: QueryState,
    pub logits: Var,
}

/// Encoded points the queries attend to.
pub struct Memory {
    pub keys: Var,
    pub values: Var,
    /// Point positions `[N×3]`.
    pub xyz: Var,
    pub n: usize,
}

fn half_signs<T: Real>(ctx: &mut Ctx<'_, T>) -> Result<Var> {
    let half: Vec<f64> = VERTEX_SIGNS.iter().flatten().map(|s| s / 2.0).collect();
    Ok(ctx.g.constant(Tensor::from_f64_slice(&[1, 24], &half)?))
}

/// Plain-value view of a query set.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub boxes: Vec<Box3D>,
    pub logits: Vec<Vec<f64>>,
}

/// Softmax attention `softmax(q kᵀ/√d + bias_h) v` per head; `bias` holds
/// one `[M×N]` node per head, or is empty.
pub fn multi_head_attention<T: Real>(ctx: &mut Ctx<'_, T>, q: Var, k: Var, v: Var, heads: usize, bias: &[Var]) -> Result<Var> {
    let c = ctx.g.shape(q)[1];
    if heads == 0 || c % heads != 0 {
        return Err(DetrError::Contract(format!("{c} channels do not split into {heads} heads")));
    }
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = ctx.g.slice_cols(q, h * dh, dh)?;
        let kh = ctx.g.slice_cols(k, h * dh, dh)?;
        let vh = ctx.g.slice_cols(v, h * dh, dh)?;
        let s = ctx.g.matmul_nt(qh, kh)?;
        let mut s = ctx.g.scale(s, scale);
        if let Some(&b) = bias.get(h) {
            s = ctx.g.add(s, b)?;
        }
        let a = ctx.g.softmax_rows(s);
        outs.push(ctx.g.matmul(a, vh)?);
    }
    Ok(ctx.g.concat_cols(&outs)?)
}

impl Decoder {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: &DecoderConfig,
        fused_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let d = cfg.content_dim;
        if cfg.heads == 0 || d % cfg.heads != 0 {
            return Err(DetrError::Config(format!(
                "decoder content_dim {d} is not divisible by {} heads",
                cfg.heads
            )));
        }
        if cfg.default_size.iter().any(|&s| s <= 0.0) {
            return Err(DetrError::Config("decoder default_size must be positive".into()));
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("decoder.layer{i}");
            let r = format!("decoder.rpe{i}");
            let mut lin = |name: &str, a: usize, b: usize| Linear::new(store, rng, name, a, b);
            let sa_q = lin(&format!("{p}.self_attn.q"), d, d)?;
            let sa_k = lin(&format!("{p}.self_attn.k"), d, d)?;
            let sa_v = lin(&format!("{p}.self_attn.v"), d, d)?;
            let sa_out = lin(&format!("{p}.self_attn.out"), d, d)?;
            let ca_q = lin(&format!("{p}.cross_attn.q"), d, d)?;
            let ca_out = lin(&format!("{p}.cross_attn.out"), d, d)?;
            let ffn1 = lin(&format!("{p}.ffn1"), d, cfg.ffn_dim)?;
            let ffn2 = lin(&format!("{p}.ffn2"), cfg.ffn_dim, d)?;
            let cls = lin(&format!("{p}.cls"), d, num_classes + 1)?;
            let ref1 = lin(&format!("{p}.refine1"), d, d)?;
            let ref2 = lin(&format!("{p}.refine2"), d, 7)?;
            let rpe1 = lin(&format!("{r}.fc1"), 24, cfg.rpe_hidden)?;
            let rpe2 = lin(&format!("{r}.fc2"), cfg.rpe_hidden, cfg.heads)?;
            layers.push(DecoderLayer {
                sa_q,
                sa_k,
                sa_v,
                sa_out,
                ln1: LayerNorm::new(store, rng, &format!("{p}.ln1"), d)?,
                ca_q,
                ca_out,
                ln2: LayerNorm::new(store, rng, &format!("{p}.ln2"), d)?,
                ffn1,
                ffn2,
                ln3: LayerNorm::new(store, rng, &format!("{p}.ln3"), d)?,
                cls,
                ref1,
                ref2,
                rpe1,
                rpe2,
            });
        }
        Ok(Decoder {
            cfg: cfg.clone(),
            num_classes,
            init_content: Linear::new(store, rng, "decoder.init.content", fused_dim, d)?,
            init_ffn1: Linear::new(store, rng, "decoder.init.ffn1", fused_dim, d)?,
            init_ffn2: Linear::new(store, rng, "decoder.init.ffn2", d, 8)?,
            mem_proj: Linear::new(store, rng, "decoder.memory.proj", fused_dim, d)?,
            mem_pos: Linear::new(store, rng, "decoder.memory.pos", 3, d)?,
            mem_key: Linear::new(store, rng, "decoder.memory.key", d, d)?,
            mem_value: Linear::new(store, rng, "decoder.memory.value", d, d)?,
            query_pos: Linear::new(store, rng, "decoder.query_pos", 3, d)?,
            layers,
        })
    }

    /// Seeds queries at farthest-point samples and decodes initial boxes:
    /// `center = seed + Δ`, `size = default · exp(raw)`,
    /// `yaw = atan2(raw_sin, 1 + raw_cos)`.
    pub fn init_queries<T: Real>(&self, ctx: &mut Ctx<'_, T>, fused: Var, xyz: &[[f64; 3]]) -> Result<QueryState> {
        let seeds = farthest_point_sampling(xyz, self.cfg.queries)?;
        let seed_feat = ctx.g.select_rows(fused, &seeds)?;
        let content = ctx.linear(&self.init_content, seed_feat)?;
        let raw = ctx.mlp2(&self.init_ffn1, &self.init_ffn2, seed_feat)?;
        let seed_xyz = ctx.constant_rows(&seeds.iter().map(|&i| xyz[i].to_vec()).collect::<Vec<_>>())?;
        let off = ctx.g.slice_cols(raw, 0, 3)?;
        let center = ctx.g.add(seed_xyz, off)?;
        let ls = ctx.g.slice_cols(raw, 3, 3)?;
        let base = ctx.constant_rows(&[self.cfg.default_size.iter().map(|s| s.ln()).collect()])?;
        let log_size = ctx.g.add(ls, base)?;
        let ys = ctx.g.slice_cols(raw, 6, 1)?;
        let yc = ctx.g.slice_cols(raw, 7, 1)?;
        let yc = ctx.g.add_scalar(yc, 1.0);
        let yaw = ctx.g.atan2(ys, yc)?;
        Ok(QueryState { content, center, log_size, yaw })
    }

    pub fn memory<T: Real>(&self, ctx: &mut Ctx<'_, T>, fused: Var, xyz: &[[f64; 3]]) -> Result<Memory> {
        let n = xyz.len();
        let flat: Vec<f64> = xyz.iter().flatten().copied().collect();
        let pts = ctx.g.constant(Tensor::from_f64_slice(&[n, 3], &flat)?);
        let mem = ctx.linear(&self.mem_proj, fused)?;
        let pos = ctx.linear(&self.mem_pos, pts)?;
        let keyed = ctx.g.add(mem, pos)?;
        let keys = ctx.linear(&self.mem_key, keyed)?;
        let values = ctx.linear(&self.mem_value, mem)?;
        Ok(Memory { keys, values, xyz: pts, n })
    }

    /// Size-normalized box-local point coordinates `R(−yaw)·(p − c) / size`
    /// for every (query box, point) pair: `[M·N×3]`, row `m·N + n`.
    pub fn local_coords_on_tape<T: Real>(&self, ctx: &mut Ctx<'_, T>, s: &QueryState, xyz: Var) -> Result<Var> {
        Ok(ctx.g.box_local(s.center, s.yaw, s.log_size, xyz)?)
    }

    /// Canonical vertex offsets of every (query box, point) pair on the tape:
    /// `[M·N×24]`, row `m·N + n`.
    pub fn offsets_on_tape<T: Real>(&self, ctx: &mut Ctx<'_, T>, s: &QueryState, xyz: Var) -> Result<Var> {
        let q = self.local_coords_on_tape(ctx, s, xyz)?;
        let tiled = ctx.g.concat_cols(&[q; 8])?;
        let half = half_signs(ctx)?;
        Ok(ctx.g.sub(tiled, half)?)
    }

    /// First RPE layer applied to the offsets. Every offset block is
    /// `q − sign_j/2`, so `offsets·W + b = q·Σ_j W_j + (b − half·W)`; the
    /// folded form avoids materializing the `[M·N×24]` offsets.
    fn rpe_hidden<T: Real>(&self, ctx: &mut Ctx<'_, T>, layer: usize, s: &QueryState, mem: &Memory) -> Result<Var> {
        let l = &self.layers[layer];
        let q = self.local_coords_on_tape(ctx, s, mem.xyz)?;
        let w = ctx.p(l.rpe1.weight);
        let hdim = self.cfg.rpe_hidden;
        let blocks = ctx.g.reshape(w, &[8, 3 * hdim])?;
        let folded = ctx.g.sum_rows(blocks);
        let folded = ctx.g.reshape(folded, &[3, hdim])?;
        let half = half_signs(ctx)?;
        let shift = ctx.g.matmul(half, w)?;
        let shift = ctx.g.neg(shift);
        let bias = match l.rpe1.bias {
            Some(b) => {
                let b = ctx.p(b);
                ctx.g.add(shift, b)?
            }
            None => shift,
        };
        let bias = ctx.g.reshape(bias, &[hdim])?;
        Ok(ctx.g.linear(q, folded, Some(bias))?)
    }

    /// RPE attention bias per head, each `[M×N]`.
    pub fn rpe_bias<T: Real>(&self, ctx: &mut Ctx<'_, T>, layer: usize, s: &QueryState, mem: &Memory) -> Result<Vec<Var>> {
        let l = &self.layers[layer];
        let m = ctx.g.shape(s.center)[0];
        let h = self.rpe_hidden(ctx, layer, s, mem)?;
        let h = ctx.g.gelu(h);
        let b = ctx.linear(&l.rpe2, h)?;
        (0..self.cfg.heads)
            .map(|h| {
                let col = ctx.g.slice_cols(b, h, 1)?;
                Ok(ctx.g.reshape(col, &[m, mem.n])?)
            })
            .collect()
    }

    /// RPE bias computed from explicitly materialized offsets.
    pub fn rpe_bias_explicit<T: Real>(&self, ctx: &mut Ctx<'_, T>, layer: usize, s: &QueryState, mem: &Memory) -> Result<Vec<Var>> {
        let l = &self.layers[layer];
        let m = ctx.g.shape(s.center)[0];
        let off = self.offsets_on_tape(ctx, s, mem.xyz)?;
        let b = ctx.mlp2(&l.rpe1, &l.rpe2, off)?;
        (0..self.cfg.heads)
            .map(|h| {
                let col = ctx.g.slice_cols(b, h, 1)?;
                Ok(ctx.g.reshape(col, &[m, mem.n])?)
            })
            .collect()
    }

    pub fn layer<T: Real>(&self, ctx: &mut Ctx<'_, T>, i: usize, s: QueryState, mem: &Memory) -> Result<LayerOutput> {
        let l = &self.layers[i];
        let h = self.cfg.heads;
        let qpos = ctx.linear(&self.query_pos, s.center)?;
        let x = ctx.g.add(s.content, qpos)?;
        let q = ctx.linear(&l.sa_q, x)?;
        let k = ctx.linear(&l.sa_k, x)?;
        let v = ctx.linear(&l.sa_v, s.content)?;
        let a = multi_head_attention(ctx, q, k, v, h, &[])?;
        let a = ctx.linear(&l.sa_out, a)?;
        let content = ctx.g.add(s.content, a)?;
        let content = ctx.layernorm(&l.ln1, content)?;

        let x = ctx.g.add(content, qpos)?;
        let q = ctx.linear(&l.ca_q, x)?;
        let bias = self.rpe_bias(ctx, i, &s, mem)?;
        let a = multi_head_attention(ctx, q, mem.keys, mem.values, h, &bias)?;
        let a = ctx.linear(&l.ca_out, a)?;
        let content = ctx.g.add(content, a)?;
        let content = ctx.layernorm(&l.ln2, content)?;

        let f = ctx.mlp2(&l.ffn1, &l.ffn2, content)?;
        let content = ctx.g.add(content, f)?;
        let content = ctx.layernorm(&l.ln3, content)?;

        let logits = ctx.linear(&l.cls, content)?;
        let delta = ctx.mlp2(&l.ref1, &l.ref2, content)?;
        let dc = ctx.g.slice_cols(delta, 0, 3)?;
        let ds = ctx.g.slice_cols(delta, 3, 3)?;
        let dy = ctx.g.slice_cols(delta, 6, 1)?;
        let state = QueryState {
            content,
            center: ctx.g.add(s.center, dc)?,
            log_size: ctx.g.add(s.log_size, ds)?,
            yaw: ctx.g.add(s.yaw, dy)?,
        };
        Ok(LayerOutput { state, logits })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, fused: Var, xyz: &[[f64; 3]]) -> Result<Vec<LayerOutput>> {
        let mut s = self.init_queries(ctx, fused, xyz)?;
        let mem = self.memory(ctx, fused, xyz)?;
        let mut outs = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let o = self.layer(ctx, i, s, &mem)?;
            s = o.state;
            outs.push(o);
        }
        Ok(outs)
    }
}

/// Reads box states off the tape.
pub fn boxes_of<T: Real>(ctx: &Ctx<'_, T>, s: &QueryState) -> Vec<Box3D> {
    let c = ctx.value_rows(s.center);
    let ls = ctx.value_rows(s.log_size);
    let y = ctx.value_rows(s.yaw);
    (0..c.len())
        .map(|i| Box3D {
            center: [c[i][0], c[i][1], c[i][2]],
            size: [ls[i][0].exp(), ls[i][1].exp(), ls[i][2].exp()],
            yaw: crate::rgbd::wrap_angle(y[i][0]),
            class_id: 0,
            score: 0.0,
        })
        .collect()
}

pub fn query_set<T: Real>(ctx: &Ctx<'_, T>, out: &LayerOutput) -> QuerySet {
    QuerySet {
        boxes: boxes_of(ctx, &out.state),
        logits: ctx.value_rows(out.logits),
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Per query: the most probable real class, scored by its probability times
/// the probability of being an object. No suppression step.
pub fn predict(queries: &QuerySet, score_thresh: f64) -> Vec<Box3D> {
    let mut out = Vec::new();
    for (b, l) in queries.boxes.iter().zip(&queries.logits) {
        let p = softmax(l);
        let c = p.len() - 1;
        let mut best = 0;
        for j in 1..c {
            if p[j] > p[best] {
                best = j;
            }
        }
        let score = p[best] * (1.0 - p[c]);
        if score >= score_thresh {
            let mut b = b.clone();
            b.class_id = best;
            b.score = score;
            out.push(b);
        }
    }
    out
}
