//! The training loop: one tape per batch, Adam.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use detr3d_autograd::{checkpoint, ParamStore, TensorError};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{set_loss, LossValues, LossWeights};
use super::matching::{hungarian, match_cost, CostWeights};
use super::optim::{Adam, AdamConfig};
use crate::decoder::{query_set, softmax};
use crate::error::{DetrError, Result};
use crate::model::{non_finite, Model, SceneInput};
use crate::nn::{apply_bn_observations, BnObservation, Ctx, Mode};
use crate::seed;

/// Which scenes the periodic evaluation scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub loss: LossWeights,
    pub matching: CostWeights,
    /// Evaluate every this many epochs (and after the last); `0` disables.
    pub eval_every: usize,
    pub eval_split: EvalSplit,
    /// Minimum detection score kept for evaluation.
    pub score_thresh: f64,
    /// Stop once an evaluation reaches this mean AP50.
    pub target_ap50: Option<f64>,
    /// Write an intermediate checkpoint every this many epochs; `0` keeps
    /// only the final one.
    pub checkpoint_every: usize,
    /// Worker threads for the evaluation passes.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            optimizer: AdamConfig::default(),
            loss: LossWeights::default(),
            matching: CostWeights::default(),
            eval_every: 10,
            eval_split: EvalSplit::Val,
            score_thresh: 0.05,
            target_ap50: None,
            checkpoint_every: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DetrError::Config("train.batch_size must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(DetrError::Config("train.threads must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(DetrError::Config("optimizer needs lr ≥ 0, betas in [0, 1) and eps > 0".into()));
        }
        if !(o.clip_norm >= 0.0) || !(o.decay > 0.0) {
            return Err(DetrError::Config("optimizer needs clip_norm ≥ 0 and decay > 0".into()));
        }
        Ok(())
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Loss components averaged over decoder layers and scenes.
    #[serde(flatten)]
    pub loss: LossValues,
    pub ap25: Option<f64>,
    pub ap50: Option<f64>,
    /// Mean pre-clip gradient norm over the epoch's steps.
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub steps: u64,
    pub history: Vec<EpochMetrics>,
    /// Epoch at which `target_ap50` was reached, if it was.
    pub reached_target: Option<usize>,
}

/// Result of one batch's forward and backward pass.
struct BatchGrad {
    grads: Vec<Vec<f32>>,
    /// Sum of the per-scene loss values.
    loss: LossValues,
    bn: Vec<BnObservation<f32>>,
}

/// One tape for the whole batch: the encoders normalize over every scene,
/// then each scene is matched and scored on its own and the scene losses
/// are averaged.
fn batch_pass(model: &Model, store: &ParamStore<f32>, inputs: &[&SceneInput], cfg: &TrainConfig) -> Result<BatchGrad> {
    let ids = || inputs.iter().map(|i| i.id.as_str()).collect::<Vec<_>>().join(",");
    let mut ctx = Ctx::new(store, Mode::Train);
    let outs = model.forward_batch(&mut ctx, inputs)?;
    ctx.g.check_finite().map_err(|e| non_finite(e, &ids()))?;
    let mut loss = LossValues::default();
    let mut total = None;
    for (input, outs) in inputs.iter().zip(&outs) {
        let last = outs.last().ok_or_else(|| DetrError::Config("decoder has no layers".into()))?;
        let assignment = if input.gt.is_empty() {
            Vec::new()
        } else {
            hungarian(&match_cost(&query_set(&ctx, last), &input.gt, &cfg.matching))
        };
        let breakdown = set_loss(&mut ctx, outs, &input.gt, &assignment, &cfg.loss)?;
        let share = 1.0 / breakdown.layers.len().max(1) as f64;
        for l in &breakdown.layers {
            loss.add(&LossValues::read(&ctx, l), share);
        }
        total = Some(match total {
            None => breakdown.total,
            Some(t) => ctx.g.add(t, breakdown.total)?,
        });
    }
    let total = total.ok_or_else(|| DetrError::Contract("empty batch".into()))?;
    let mean = ctx.g.scale(total, 1.0 / inputs.len() as f64);
    ctx.g.check_finite().map_err(|e| non_finite(e, &ids()))?;
    let grads = ctx.g.backward(mean)?.all_params(store);
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(non_finite(TensorError::NonFinite { op: "backward" }, &ids()));
    }
    Ok(BatchGrad {
        grads,
        loss,
        bn: ctx.bn_obs,
    })
}

/// Fraction of ground-truth objects whose matched final-layer query
/// predicts the right class (argmax over real classes).
pub fn matched_accuracy(model: &Model, store: &ParamStore<f32>, inputs: &[SceneInput], w: &CostWeights) -> Result<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for input in inputs {
        if input.gt.is_empty() {
            continue;
        }
        let qs = model.queries(store, input)?;
        for (q, t) in hungarian(&match_cost(&qs, &input.gt, w)) {
            let p = softmax(&qs.logits[q]);
            let real = &p[..p.len() - 1];
            let best = (0..real.len()).fold(0, |b, j| if real[j] > real[b] { j } else { b });
            right += usize::from(best == input.gt[t].class_id);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { right as f64 / total as f64 })
}

/// Output locations of a training run.
pub struct RunDir {
    pub dir: PathBuf,
    metrics: File,
}

impl RunDir {
    /// Creates `dir` and truncates its `metrics.jsonl`.
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| DetrError::io(dir, e))?;
        let path = dir.join("metrics.jsonl");
        let metrics = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|e| DetrError::io(&path, e))?;
        Ok(RunDir { dir: dir.to_path_buf(), metrics })
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }

    fn log(&mut self, m: &EpochMetrics) -> Result<()> {
        let line = serde_json::to_string(m).map_err(|e| DetrError::Format(e.to_string()))?;
        let path = self.dir.join("metrics.jsonl");
        writeln!(self.metrics, "{line}").map_err(|e| DetrError::io(&path, e))
    }

    fn checkpoint(&self, store: &ParamStore<f32>, name: &str) -> Result<()> {
        Ok(checkpoint::save(store, &self.dir.join(name))?)
    }
}

/// Trains `store` in place. Scenes are visited in a seeded shuffled order;
/// each batch takes one Adam step on its mean loss and then folds in the
/// batchnorm statistics it observed. The result is independent of `threads`.
pub fn train(
    model: &Model,
    store: &mut ParamStore<f32>,
    train_set: &[SceneInput],
    val_set: &[SceneInput],
    cfg: &TrainConfig,
    seed: u64,
    mut run: Option<&mut RunDir>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(DetrError::Config("training set is empty".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| DetrError::Config(format!("thread pool: {e}")))?;
    let mut adam = Adam::new(cfg.optimizer, store);
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut reached_target = None;
    let eval_set = match cfg.eval_split {
        EvalSplit::Val if !val_set.is_empty() => val_set,
        _ => train_set,
    };
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seed::rng(seed, &format!("shuffle/{epoch}")));
        let mut epoch_loss = LossValues::default();
        let mut norm_sum = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for batch in &batches {
            let inputs: Vec<&SceneInput> = batch.iter().map(|&i| &train_set[i]).collect();
            let pass = batch_pass(model, store, &inputs, cfg).map_err(|e| match e {
                DetrError::NonFinite { op, context } => DetrError::NonFinite {
                    op,
                    context: format!("{context}, epoch {epoch}"),
                },
                other => other,
            })?;
            epoch_loss.add(&pass.loss, 1.0 / train_set.len() as f64);
            let mut sum: Vec<Vec<f64>> = pass.grads.iter().map(|g| g.iter().map(|&v| v as f64).collect()).collect();
            norm_sum += adam.update(store, &mut sum);
            apply_bn_observations(store, &pass.bn);
        }
        let lr = adam.lr;
        adam.end_epoch();
        let due = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let (ap25, ap50) = if due {
            let report = pool.install(|| model.evaluate(store, eval_set, cfg.score_thresh))?;
            (Some(report.mean_ap25), Some(report.mean_ap50))
        } else {
            (None, None)
        };
        let metrics = EpochMetrics {
            epoch,
            loss: epoch_loss,
            ap25,
            ap50,
            grad_norm: norm_sum / batches.len() as f64,
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (cls {:.4} ctr {:.4} size {:.4} yaw {:.4} iou {:.4}) ap25 {} ap50 {}",
            metrics.loss.total,
            metrics.loss.class,
            metrics.loss.center,
            metrics.loss.size,
            metrics.loss.yaw,
            metrics.loss.iou,
            fmt_ap(ap25),
            fmt_ap(ap50)
        );
        if let Some(run) = run.as_deref_mut() {
            run.log(&metrics)?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                run.checkpoint(store, &format!("epoch_{epoch:04}.ckpt"))?;
            }
        }
        history.push(metrics);
        if let (Some(target), Some(ap)) = (cfg.target_ap50, ap50) {
            if ap >= target {
                reached_target = Some(epoch);
                break;
            }
        }
    }
    if let Some(run) = run.as_deref_mut() {
        run.checkpoint(store, "model.ckpt")?;
    }
    Ok(TrainSummary {
        epochs_run: history.len(),
        steps: adam.step,
        history,
        reached_target,
    })
}

fn fmt_ap(ap: Option<f64>) -> String {
    ap.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}
