//! The full detector: geometry and visual encoders, connector, decoder.

use std::collections::BTreeMap;

use detr3d_autograd::{ParamStore, Real, Tensor, TensorError, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::connector::Connector;
use crate::decoder::{predict, query_set, Decoder, DecoderConfig, LayerOutput, QuerySet};
use crate::error::{DetrError, Result};
use crate::geometry_encoder::{knn, GeometryConfig, GeometryEncoder, NeighborIndex};
use crate::eval::{evaluate, Detection, EvalReport};
use crate::nn::{Ctx, Mode};
use crate::rgbd::io::SceneRecord;
use crate::rgbd::{sample_points, to_upright, unproject, Box3D, ColorFrame};
use crate::seed;
use crate::visual_encoder::{image_tensor, sample_point_features, VisualConfig, VisualEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Points sampled per scene.
    pub points: usize,
    pub geometry: GeometryConfig,
    pub visual: VisualConfig,
    pub fused_dim: usize,
    pub decoder: DecoderConfig,
    /// Replace visual features with zeros (geometry-only variant).
    pub visual_mask: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            points: 2048,
            geometry: GeometryConfig::default(),
            visual: VisualConfig::default(),
            fused_dim: 32,
            decoder: DecoderConfig::default(),
            visual_mask: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub num_classes: usize,
    pub geometry: GeometryEncoder,
    pub visual: VisualEncoder,
    pub connector: Connector,
    pub decoder: Decoder,
}

/// Everything the network consumes for one scene, in the upright camera
/// frame (x right, y forward, z up).
#[derive(Clone, Debug)]
pub struct SceneInput {
    pub id: String,
    pub xyz: Vec<[f64; 3]>,
    pub pixels: Vec<[f64; 2]>,
    pub image: ColorFrame,
    pub neighbors: NeighborIndex,
    pub gt: Vec<Box3D>,
}

/// Unprojects a scene, samples a fixed point set and builds its KNN graph.
pub fn prepare_input(rec: &SceneRecord, cfg: &ModelConfig, seed: u64) -> Result<SceneInput> {
    let cloud = unproject(&rec.depth, &rec.color, &rec.camera.intrinsics)?;
    let s = seed::derive(seed, &format!("points/{}", rec.id));
    let cloud = sample_points(&cloud, cfg.points, s)?;
    let xyz: Vec<[f64; 3]> = cloud.points.iter().map(|p| to_upright(p.position)).collect();
    let pixels = cloud.points.iter().map(|p| p.pixel).collect();
    let neighbors = knn(&xyz, cfg.geometry.k)?;
    Ok(SceneInput {
        id: rec.id.clone(),
        xyz,
        pixels,
        image: rec.color.clone(),
        neighbors,
        gt: rec.boxes.clone(),
    })
}

impl Model {
    pub fn new<T: Real>(cfg: &ModelConfig, num_classes: usize, seed: u64) -> Result<(Self, ParamStore<T>)> {
        if num_classes == 0 {
            return Err(DetrError::Config("at least one class is required".into()));
        }
        if cfg.visual.out_dim != cfg.geometry.d {
            return Err(DetrError::Config(format!(
                "visual out_dim {} must equal geometry d {}",
                cfg.visual.out_dim, cfg.geometry.d
            )));
        }
        if cfg.points < cfg.decoder.queries || cfg.points <= cfg.geometry.k {
            return Err(DetrError::Config(format!(
                "{} points cannot seed {} queries with k = {}",
                cfg.points, cfg.decoder.queries, cfg.geometry.k
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = seed::rng(seed, "init");
        let geometry = GeometryEncoder::new(&mut store, &mut rng, &cfg.geometry)?;
        let visual = VisualEncoder::new(&mut store, &mut rng, &cfg.visual)?;
        let connector = Connector::new(&mut store, &mut rng, cfg.geometry.d, cfg.visual.out_dim, cfg.fused_dim)?;
        let decoder = Decoder::new(&mut store, &mut rng, &cfg.decoder, cfg.fused_dim, num_classes)?;
        Ok((
            Model {
                cfg: cfg.clone(),
                num_classes,
                geometry,
                visual,
                connector,
                decoder,
            },
            store,
        ))
    }

    /// Fused per-point features `[N×fused_dim]`.
    pub fn encode<T: Real>(&self, ctx: &mut Ctx<'_, T>, input: &SceneInput) -> Result<Var> {
        Ok(self.encode_batch(ctx, &[input])?.remove(0))
    }

    /// Fused features of several scenes, one `[N_b×fused_dim]` block each.
    /// Every batchnorm normalizes over the points (or pixels) of all scenes.
    pub fn encode_batch<T: Real>(&self, ctx: &mut Ctx<'_, T>, inputs: &[&SceneInput]) -> Result<Vec<Var>> {
        let counts: Vec<usize> = inputs.iter().map(|i| i.xyz.len()).collect();
        let total: usize = counts.iter().sum();
        let k = self.cfg.geometry.k;
        let mut flat = Vec::with_capacity(3 * total);
        let mut idx = Vec::with_capacity(k * total);
        let mut offset = 0;
        for input in inputs {
            if input.neighbors.k != k || input.neighbors.len() != input.xyz.len() {
                return Err(DetrError::Contract(format!(
                    "scene {} has a neighbor index for k = {}, model expects {k}",
                    input.id, input.neighbors.k
                )));
            }
            flat.extend(input.xyz.iter().flatten());
            idx.extend(input.neighbors.idx.iter().map(|&j| j + offset));
            offset += input.xyz.len();
        }
        let xyz = ctx.g.constant(Tensor::from_f64_slice(&[total, 3], &flat)?);
        let geo = self.geometry.forward(ctx, xyz, &NeighborIndex { k, idx })?;
        let vis = if self.cfg.visual_mask {
            ctx.g.constant(Tensor::zeros(&[total, self.cfg.visual.out_dim]))
        } else {
            let images: Vec<(Var, usize, usize)> = inputs
                .iter()
                .map(|i| (ctx.g.constant(image_tensor(&i.image)), i.image.height, i.image.width))
                .collect();
            let maps = self.visual.encode_images(ctx, &images)?;
            let parts = maps
                .iter()
                .zip(inputs)
                .map(|(m, i)| sample_point_features(ctx, m, &i.pixels))
                .collect::<Result<Vec<_>>>()?;
            if parts.len() == 1 {
                parts[0]
            } else {
                ctx.g.concat_rows(&parts)?
            }
        };
        let fused = self.connector.fuse(ctx, geo, vis)?;
        if inputs.len() == 1 {
            return Ok(vec![fused]);
        }
        let mut out = Vec::with_capacity(inputs.len());
        let mut start = 0;
        for n in counts {
            out.push(ctx.g.slice_rows(fused, start, n)?);
            start += n;
        }
        Ok(out)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, input: &SceneInput) -> Result<Vec<LayerOutput>> {
        Ok(self.forward_batch(ctx, &[input])?.remove(0))
    }

    /// Decoder outputs per scene for a jointly encoded batch.
    pub fn forward_batch<T: Real>(&self, ctx: &mut Ctx<'_, T>, inputs: &[&SceneInput]) -> Result<Vec<Vec<LayerOutput>>> {
        let fused = self.encode_batch(ctx, inputs)?;
        fused
            .into_iter()
            .zip(inputs)
            .map(|(f, i)| self.decoder.forward(ctx, f, &i.xyz))
            .collect()
    }

    /// Final-layer queries of an eval-mode pass.
    pub fn queries<T: Real>(&self, store: &ParamStore<T>, input: &SceneInput) -> Result<QuerySet> {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let outs = self.forward(&mut ctx, input)?;
        ctx.g.check_finite().map_err(|e| non_finite(e, &input.id))?;
        let last = outs.last().ok_or_else(|| DetrError::Config("decoder has no layers".into()))?;
        Ok(query_set(&ctx, last))
    }

    /// Scored detections for one scene.
    pub fn detect<T: Real>(&self, store: &ParamStore<T>, input: &SceneInput, score_thresh: f64) -> Result<Vec<Detection>> {
        let qs = self.queries(store, input)?;
        Ok(predict(&qs, score_thresh).iter().map(|b| Detection::from_box(&input.id, b)).collect())
    }

    /// Detects on every input (in parallel on the current rayon pool) and scores against their ground truth.
    pub fn evaluate<T: Real>(&self, store: &ParamStore<T>, inputs: &[SceneInput], score_thresh: f64) -> Result<EvalReport> {
        let per_scene: Vec<Vec<Detection>> = inputs
            .par_iter()
            .map(|input| self.detect(store, input, score_thresh))
            .collect::<Result<_>>()?;
        let dets: Vec<Detection> = per_scene.into_iter().flatten().collect();
        let gts: BTreeMap<String, Vec<Box3D>> = inputs.iter().map(|i| (i.id.clone(), i.gt.clone())).collect();
        Ok(evaluate(&dets, &gts, self.num_classes))
    }
}

/// Maps a tape non-finite error onto the scene that produced it.
pub fn non_finite(e: TensorError, context: &str) -> DetrError {
    match e {
        TensorError::NonFinite { op } => DetrError::NonFinite {
            op,
            context: context.to_string(),
        },
        other => other.into(),
    }
}
