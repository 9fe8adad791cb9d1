mod common;

use common::{brute_assignment, softmax, vertex_hull_iou};
use detr3d_autograd::ParamStore;
use detr3d_core::decoder::{LayerOutput, QueryState};
use detr3d_core::gradcheck::{tiny_config, tiny_input};
use detr3d_core::model::Model;
use detr3d_core::nn::{Ctx, Mode};
use detr3d_core::rgbd::{wrap_angle, Box3D};
use detr3d_core::training::{hungarian, set_loss, train, LossValues, LossWeights, TrainConfig};
use detr3d_core::config::RunConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cost_matrix(rows: usize, cols: usize, ints: bool) -> impl Strategy<Value = Vec<Vec<f64>>> {
    let cell = if ints { (0u8..4).prop_map(f64::from).boxed() } else { (0.0f64..10.0).boxed() };
    prop::collection::vec(prop::collection::vec(cell, cols), rows)
}

fn shape() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=7, 1usize..=7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hungarian_matches_enumeration(c in shape().prop_flat_map(|(m, g)| cost_matrix(m, g, false))) {
        let (best, pairs) = brute_assignment(&c);
        let got = hungarian(&c);
        let total: f64 = got.iter().map(|&(i, j)| c[i][j]).sum();
        prop_assert!((total - best).abs() <= 1e-9 * (1.0 + best.abs()));
        prop_assert_eq!(got, pairs);
    }

    #[test]
    fn hungarian_ties_resolve_lexicographically(c in shape().prop_flat_map(|(m, g)| cost_matrix(m, g, true))) {
        prop_assert_eq!(hungarian(&c), brute_assignment(&c).1);
    }

    #[test]
    fn hungarian_ignores_positive_scale_and_shift(
        c in shape().prop_flat_map(|(m, g)| cost_matrix(m, g, false)),
        s in 0.5f64..4.0,
        t in -3.0f64..3.0,
    ) {
        let scaled: Vec<Vec<f64>> = c.iter().map(|r| r.iter().map(|x| s * x + t).collect()).collect();
        prop_assert_eq!(hungarian(&scaled), hungarian(&c));
    }
}

#[test]
fn hungarian_examples() {
    let c = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
    assert_eq!(hungarian(&c), vec![(0, 1), (1, 0), (2, 2)]);
    let tall = vec![vec![9.0], vec![1.0], vec![1.0]];
    assert_eq!(hungarian(&tall), vec![(1, 0)]);
}

struct Pred {
    logits: Vec<Vec<f64>>,
    center: Vec<Vec<f64>>,
    log_size: Vec<Vec<f64>>,
    yaw: Vec<Vec<f64>>,
}

fn layer(ctx: &mut Ctx<'_, f64>, p: &Pred) -> LayerOutput {
    let state = QueryState {
        content: ctx.constant_rows(&p.logits).unwrap(),
        center: ctx.constant_rows(&p.center).unwrap(),
        log_size: ctx.constant_rows(&p.log_size).unwrap(),
        yaw: ctx.constant_rows(&p.yaw).unwrap(),
    };
    LayerOutput { logits: state.content, state }
}

fn random_pred(rng: &mut ChaCha8Rng, m: usize, k: usize) -> Pred {
    let rows = |rng: &mut ChaCha8Rng, c: usize, lo: f64, hi: f64| -> Vec<Vec<f64>> {
        (0..m).map(|_| (0..c).map(|_| rng.gen_range(lo..hi)).collect()).collect()
    };
    Pred {
        logits: rows(rng, k, -2.0, 2.0),
        center: rows(rng, 3, -1.0, 1.0),
        log_size: rows(rng, 3, -1.0, 0.3),
        yaw: rows(rng, 1, -3.0, 3.0),
    }
}

fn loss_values(preds: &[Pred], gts: &[Box3D], assignment: &[(usize, usize)], w: &LossWeights) -> (Vec<LossValues>, f64) {
    let store = ParamStore::<f64>::new();
    let mut ctx = Ctx::new(&store, Mode::Train);
    let outs: Vec<LayerOutput> = preds.iter().map(|p| layer(&mut ctx, p)).collect();
    let l = set_loss(&mut ctx, &outs, gts, &assignment.to_vec(), w).unwrap();
    let per = l.layers.iter().map(|x| LossValues::read(&ctx, x)).collect();
    (per, ctx.g.value(l.total).item())
}

/// The layer loss written out term by term.
fn oracle(p: &Pred, gts: &[Box3D], assignment: &[(usize, usize)], w: &LossWeights) -> [f64; 6] {
    let m = p.logits.len();
    let k = p.logits[0].len();
    let mut ce = 0.0;
    for q in 0..m {
        let pr = softmax(&p.logits[q]);
        ce += match assignment.iter().find(|a| a.0 == q) {
            Some(&(_, t)) => -pr[gts[t].class_id].ln(),
            None => -w.no_object * pr[k - 1].ln(),
        };
    }
    let class = ce / m as f64;
    let g = gts.len().max(1) as f64;
    let (mut center, mut size, mut yaw, mut iou) = (0.0, 0.0, 0.0, 0.0);
    for &(q, t) in assignment {
        let gt = &gts[t];
        let sz: Vec<f64> = p.log_size[q].iter().map(|x| x.exp()).collect();
        for a in 0..3 {
            center += (p.center[q][a] - gt.center[a]).abs();
            size += (sz[a] - gt.size[a]).abs();
        }
        yaw += wrap_angle(p.yaw[q][0] - gt.yaw).abs();
        let b = Box3D::new([p.center[q][0], p.center[q][1], p.center[q][2]], [sz[0], sz[1], sz[2]], p.yaw[q][0], 0).unwrap();
        iou += 1.0 - vertex_hull_iou(&b, gt);
    }
    let (center, size, yaw, iou) = (center / g, size / g, yaw / g, iou / g);
    let total = w.class * class + w.center * center + w.size * size + w.yaw * yaw + w.iou * iou;
    [class, center, size, yaw, iou, total]
}

fn two_boxes() -> Vec<Box3D> {
    vec![
        Box3D::new([0.2, -0.3, 0.1], [0.6, 0.5, 0.8], 0.7, 1).unwrap(),
        Box3D::new([-0.4, 0.5, -0.2], [0.9, 0.4, 0.5], -2.5, 0).unwrap(),
    ]
}

#[test]
fn loss_matches_term_by_term_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gts = two_boxes();
    let w = LossWeights::default();
    for trial in 0..20 {
        let preds: Vec<Pred> = (0..3).map(|_| random_pred(&mut rng, 5, 4)).collect();
        let assignment = if trial % 2 == 0 { vec![(1, 1), (3, 0)] } else { vec![(0, 0), (4, 1)] };
        let (per, total) = loss_values(&preds, &gts, &assignment, &w);
        let mut mean = 0.0;
        for (p, v) in preds.iter().zip(&per) {
            let o = oracle(p, &gts, &assignment, &w);
            let got = [v.class, v.center, v.size, v.yaw, v.iou, v.total];
            for i in 0..6 {
                assert!((got[i] - o[i]).abs() < 1e-10, "term {i}: {} vs {}", got[i], o[i]);
            }
            mean += o[5] / 3.0;
        }
        assert!((total - mean).abs() < 1e-10);
        assert!(total >= 0.0);
    }
}

#[test]
fn perfect_predictions_cost_nothing() {
    let gts = two_boxes();
    let confident = |c: usize| (0..4).map(|j| if j == c { 60.0 } else { -60.0 }).collect::<Vec<f64>>();
    let p = Pred {
        logits: vec![confident(3), confident(0), confident(1)],
        center: vec![vec![0.0; 3], gts[1].center.to_vec(), gts[0].center.to_vec()],
        log_size: vec![vec![0.0; 3], gts[1].size.iter().map(|s| s.ln()).collect(), gts[0].size.iter().map(|s| s.ln()).collect()],
        yaw: vec![vec![0.0], vec![gts[1].yaw + 2.0 * std::f64::consts::PI], vec![gts[0].yaw]],
    };
    let (_, total) = loss_values(&[p], &gts, &[(1, 1), (2, 0)], &LossWeights::default());
    assert!(total.abs() < 1e-12, "{total}");
}

#[test]
fn empty_scene_costs_no_object_cross_entropy() {
    let classes = 3;
    let p = Pred {
        logits: vec![vec![0.0; classes + 1]; 6],
        center: vec![vec![0.0; 3]; 6],
        log_size: vec![vec![0.0; 3]; 6],
        yaw: vec![vec![0.0]; 6],
    };
    let w = LossWeights::default();
    let (per, total) = loss_values(&[p], &[], &[], &w);
    let expect = 0.1 * ((classes + 1) as f64).ln();
    assert!((per[0].class - expect).abs() < 1e-12);
    assert_eq!((per[0].center, per[0].size, per[0].yaw, per[0].iou), (0.0, 0.0, 0.0, 0.0));
    assert!((total - w.class * expect).abs() < 1e-12);
}

fn tiny_run(seed: u64, lr: f64, threads: usize) -> (ParamStore<f32>, ParamStore<f32>, Vec<f64>) {
    let cfg = RunConfig::default();
    let mcfg = tiny_config(&cfg.model);
    let (model, store) = Model::new::<f32>(&mcfg, 3, seed).unwrap();
    let inputs: Vec<_> = (0..3).map(|i| tiny_input(mcfg.points, mcfg.geometry.k, seed + i).unwrap()).collect();
    let mut inputs = inputs;
    for (i, s) in inputs.iter_mut().enumerate() {
        s.id = format!("s{i}");
    }
    let tcfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        eval_every: 1,
        threads,
        optimizer: detr3d_core::training::AdamConfig { lr, ..Default::default() },
        ..Default::default()
    };
    let mut trained = store.clone();
    let summary = train(&model, &mut trained, &inputs, &inputs[..1], &tcfg, seed, None).unwrap();
    let losses = summary.history.iter().map(|h| h.loss.total).collect();
    (store, trained, losses)
}

#[test]
fn training_is_deterministic_and_thread_independent() {
    let (init, a, la) = tiny_run(5, 1e-3, 1);
    let (_, b, lb) = tiny_run(5, 1e-3, 2);
    assert!(a.bitwise_eq(&b));
    assert_eq!(la, lb);
    assert!(!a.bitwise_eq(&init));
}

#[test]
fn zero_learning_rate_keeps_trainable_weights() {
    let (init, after, _) = tiny_run(6, 0.0, 1);
    for ((_, p), (_, q)) in init.iter().zip(after.iter()) {
        if p.trainable {
            assert_eq!(p.value.data(), q.value.data(), "{}", p.name);
        }
    }
}
