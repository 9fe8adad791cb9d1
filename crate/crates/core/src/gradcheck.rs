//! Finite-difference verification of every parameterized module on a tiny
//! f64 model.

use std::collections::BTreeMap;

use detr3d_autograd::gradcheck::{check_params, FdConfig};
use detr3d_autograd::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decoder::{query_set, DecoderConfig, LayerOutput, QueryState};
use crate::error::Result;
use crate::geometry_encoder::{knn, GeometryConfig};
use crate::model::{Model, ModelConfig, SceneInput};
use crate::nn::{Ctx, Mode};
use crate::rgbd::{Box3D, ColorFrame};
use crate::seed;
use crate::training::{hungarian, match_cost, set_loss};
use crate::visual_encoder::VisualConfig;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleCheck {
    pub module: String,
    pub tensors: usize,
    pub probed: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub modules: Vec<ModuleCheck>,
    pub passed: bool,
}

/// Shrinks a model configuration to gradient-check size, keeping the
/// number of decoder layers and attention heads.
pub fn tiny_config(base: &ModelConfig) -> ModelConfig {
    let heads = base.decoder.heads.max(1);
    let vheads = base.visual.heads.max(1);
    ModelConfig {
        points: 24,
        geometry: GeometryConfig {
            d: 2 * vheads,
            k: base.geometry.k.min(4),
            layers: base.geometry.layers,
        },
        visual: VisualConfig {
            widths: [3, 2 * vheads],
            strides: base.visual.strides,
            heads: vheads,
            out_dim: 2 * vheads,
        },
        fused_dim: 6,
        decoder: DecoderConfig {
            content_dim: 2 * heads,
            heads,
            layers: base.decoder.layers,
            queries: 4,
            ffn_dim: 6,
            rpe_hidden: 4,
            default_size: base.decoder.default_size,
        },
        visual_mask: false,
    }
}

/// Module a parameter belongs to, from its name.
pub fn module_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["geometry", "embed", ..] => "geometry.embed".into(),
        ["geometry", comm, ..] => format!("geometry.{comm}"),
        ["visual", "stage1", ..] => "visual.conv1".into(),
        ["visual", "stage2", ..] => "visual.conv2".into(),
        ["visual", "attn", ..] => "visual.linear_attention".into(),
        ["connector", ..] => "connector".into(),
        ["decoder", l, ..] if l.starts_with("layer") => format!("decoder.{l}"),
        ["decoder", r, ..] if r.starts_with("rpe") => format!("decoder.layer{}", &r[3..]),
        ["decoder", ..] => "decoder.queries_memory".into(),
        _ => name.into(),
    }
}

/// A small random scene: points inside a 2 m cube, a 16×12 image and two
/// boxes, in the upright camera frame.
pub fn tiny_input(points: usize, k: usize, seed: u64) -> Result<SceneInput> {
    let mut rng = seed::rng(seed, "gradcheck/input");
    let xyz: Vec<[f64; 3]> = (0..points)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(1.5..3.5), rng.gen_range(-1.0..1.0)])
        .collect();
    let (w, h) = (16, 12);
    let pixels = (0..points).map(|_| [rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64)]).collect();
    let image = ColorFrame::new(
        w,
        h,
        (0..w * h).map(|_| [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()]).collect(),
    )?;
    let neighbors = knn(&xyz, k)?;
    let gt = vec![
        Box3D::new([-0.4, 2.2, -0.3], [0.6, 0.5, 0.7], 0.3, 0)?,
        Box3D::new([0.5, 2.9, 0.2], [0.8, 0.6, 0.5], -0.4, 1)?,
    ];
    Ok(SceneInput {
        id: "gradcheck".into(),
        xyz,
        pixels,
        image,
        neighbors,
        gt,
    })
}

fn model_loss(model: &Model, store: &ParamStore<f64>, input: &SceneInput) -> Result<(Graph<f64>, Var)> {
    let mut ctx = Ctx::new(store, Mode::Train);
    let outs = model.forward(&mut ctx, input)?;
    let qs = query_set(&ctx, outs.last().expect("at least one layer"));
    let assignment = hungarian(&match_cost(&qs, &input.gt, &Default::default()));
    let loss = set_loss(&mut ctx, &outs, &input.gt, &assignment, &Default::default())?;
    Ok((ctx.g, loss.total))
}

/// Loss gradient with respect to the predictions themselves: two layers of
/// four queries scored against the tiny scene's boxes.
fn loss_check(num_classes: usize, input: &SceneInput, seed: u64, fd: FdConfig) -> Result<(usize, f64)> {
    let mut rng = seed::rng(seed, "gradcheck/loss");
    let mut store = ParamStore::<f64>::new();
    let mut ids = Vec::new();
    for l in 0..2 {
        for (name, cols, lo, hi) in [
            ("logits", num_classes + 1, -1.0, 1.0),
            ("center", 3, -1.0, 3.0),
            ("log_size", 3, -0.9, 0.0),
            ("yaw", 1, -1.0, 1.0),
        ] {
            let values: Vec<f64> = (0..4 * cols).map(|_| rng.gen_range(lo..hi)).collect();
            ids.push(store.add(&format!("pred{l}.{name}"), &[4, cols], Init::Zeros, &mut rng)?);
            store.get_mut(*ids.last().expect("just added")).value = Tensor::new(&[4, cols], values)?;
        }
    }
    let gts = &input.gt;
    let assignment = vec![(1, 0), (3, 1)];
    let loss_fn = |s: &ParamStore<f64>| -> Result<(Graph<f64>, Var)> {
        let mut ctx = Ctx::new(s, Mode::Train);
        let outs: Vec<LayerOutput> = ids
            .chunks(4)
            .map(|c| {
                let state = QueryState {
                    content: ctx.p(c[0]),
                    center: ctx.p(c[1]),
                    log_size: ctx.p(c[2]),
                    yaw: ctx.p(c[3]),
                };
                LayerOutput {
                    logits: state.content,
                    state,
                }
            })
            .collect();
        let loss = set_loss(&mut ctx, &outs, gts, &assignment, &Default::default())?;
        Ok((ctx.g, loss.total))
    };
    let checks = check_params(&store, &ids, fd, loss_fn)?;
    let probed = checks.iter().map(|c| c.probed).sum();
    Ok((probed, checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)))
}

/// Runs the suite. Every trainable tensor of the tiny model is probed at up
/// to `max_entries` evenly spaced entries.
pub fn run(cfg: &RunConfig, seed: u64) -> Result<GradcheckReport> {
    let mcfg = tiny_config(&cfg.model);
    let num_classes = cfg.generator.classes.len().max(2);
    let (model, store) = Model::new::<f64>(&mcfg, num_classes, seed)?;
    let input = tiny_input(mcfg.points, mcfg.geometry.k, seed)?;
    // loss values are O(10), so difference noise is near 1e-16·10/1e-6 = 1e-9
    let fd = FdConfig {
        h: 1e-6,
        max_entries: 6,
        zero_floor: 1e-7,
    };
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let checks = check_params(&store, &ids, fd, |s| model_loss(&model, s, &input))?;
    let mut groups: BTreeMap<String, ModuleCheck> = BTreeMap::new();
    for c in &checks {
        let m = module_of(&c.name);
        let e = groups.entry(m.clone()).or_insert(ModuleCheck {
            module: m,
            tensors: 0,
            probed: 0,
            max_rel_err: 0.0,
        });
        e.tensors += 1;
        e.probed += c.probed;
        e.max_rel_err = e.max_rel_err.max(c.rel_err);
    }
    let mut modules: Vec<ModuleCheck> = groups.into_values().collect();
    let (probed, err) = loss_check(num_classes, &input, seed, fd)?;
    modules.push(ModuleCheck {
        module: "loss".into(),
        tensors: 8,
        probed,
        max_rel_err: err,
    });
    let passed = modules.iter().all(|m| m.max_rel_err < TOLERANCE);
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        modules,
        passed,
    })
}
