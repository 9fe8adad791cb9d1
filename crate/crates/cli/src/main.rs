//! `detr3d`: dataset generation, training, evaluation, inference, gradient
//! checking and checkpoint inspection.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use detr3d_autograd::{checkpoint, CheckpointError, ParamStore};
use detr3d_core::config::RunConfig;
use detr3d_core::dataset::{self, Split};
use detr3d_core::eval::{evaluate, Detection};
use detr3d_core::model::{prepare_input, Model, SceneInput};
use detr3d_core::rgbd::io::{read_scene_dir, write_ply};
use detr3d_core::rgbd::{ColoredPointCloud, CloudPoint};
use detr3d_core::training::{self, RunDir};
use detr3d_core::{gradcheck, DetrError};
use serde::Serialize;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "detr3d", version, about = "Multi-modal RGBD 3D object detection on synthetic scenes")]
struct Cli {
    /// Worker threads for evaluation passes during training (overrides
    /// train.threads).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Zero the wall-clock fields so repeated runs print identical bytes.
    #[arg(long, global = true)]
    stable_output: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON). Missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set model.decoder.layers=2`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes checkpoints, metrics.jsonl and config.json.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Start from these weights instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Allow `--init` to cover only part of the model.
        #[arg(long)]
        partial: bool,
    },
    /// Score a checkpoint (or a detection file) against a dataset split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Score this detection file instead of running a model.
        #[arg(long)]
        dets: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        partial: bool,
    },
    /// Detect objects in one scene directory.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Also write the sampled points, colored by detection, as PLY.
        #[arg(long)]
        ply: Option<PathBuf>,
        #[arg(long)]
        partial: bool,
    },
    /// Finite-difference gradient check over a tiny model.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List the tensors of a checkpoint.
    Inspect {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
    },
}

/// Process exit status: 0 success, 2 config, 3 numeric (including a failed
/// gradient check), 4 I/O.
fn exit_code(e: &DetrError) -> u8 {
    match e {
        DetrError::Config(_) | DetrError::Placement { .. } | DetrError::Contract(_) => 2,
        DetrError::Checkpoint(c) => match c {
            CheckpointError::Io(_) | CheckpointError::BadMagic | CheckpointError::Header(_) => 4,
            _ => 2,
        },
        DetrError::NonFinite { .. } | DetrError::Tensor(_) => 3,
        DetrError::Io { .. } | DetrError::Format(_) | DetrError::EmptyCloud => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(args: &ConfigArgs, fallback: Option<&Path>) -> Result<RunConfig, DetrError> {
    let path = args.config.clone().or_else(|| fallback.map(Path::to_path_buf).filter(|p| p.exists()));
    let base = match path {
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(|e| DetrError::io(&p, e))?;
            RunConfig::from_json(&text).map_err(|e| match e {
                DetrError::Config(m) => DetrError::Config(format!("{}: {m}", p.display())),
                other => other,
            })?
        }
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn write_file(path: &Path, text: &str) -> Result<(), DetrError> {
    fs::write(path, text).map_err(|e| DetrError::io(path, e))
}

fn run(cli: Cli) -> Result<u8, DetrError> {
    let stable = cli.stable_output;
    match cli.cmd {
        Cmd::GenData { config, out, count, seed } => {
            let cfg = load_config(&config, None)?;
            let seed = seed.unwrap_or(cfg.seed);
            let manifest = dataset::generate(&out, count, seed, &cfg.generator, &cfg.camera)?;
            let train = manifest.ids(Split::Train).count();
            #[derive(Serialize)]
            struct Out<'a> {
                out: &'a Path,
                seed: u64,
                count: usize,
                train: usize,
                val: usize,
            }
            print_json(&Out {
                out: &out,
                seed,
                count,
                train,
                val: count - train,
            });
            Ok(0)
        }
        Cmd::Train {
            config,
            data,
            out,
            seed,
            init,
            partial,
        } => {
            let mut cfg = load_config(&config, None)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = cli.threads {
                cfg.train.threads = t;
            }
            cfg.validate()?;
            let data = data
                .or_else(|| cfg.paths.data.as_ref().map(PathBuf::from))
                .ok_or_else(|| DetrError::Config("no dataset: pass --data or set paths.data".into()))?;
            let out = out
                .or_else(|| cfg.paths.out.as_ref().map(PathBuf::from))
                .ok_or_else(|| DetrError::Config("no run directory: pass --out or set paths.out".into()))?;
            let manifest = dataset::read_manifest(&data)?;
            if manifest.classes.len() != cfg.generator.classes.len() {
                return Err(DetrError::Config(format!(
                    "dataset has {} classes but the config's generator lists {}",
                    manifest.classes.len(),
                    cfg.generator.classes.len()
                )));
            }
            let train_set = inputs(&dataset::load_split(&data, &manifest, Split::Train)?, &cfg)?;
            let val_set = inputs(&dataset::load_split(&data, &manifest, Split::Val)?, &cfg)?;
            log::info!("{} training scenes, {} validation scenes", train_set.len(), val_set.len());
            let (model, mut store) = Model::new::<f32>(&cfg.model, manifest.classes.len(), cfg.seed)?;
            if let Some(p) = &init {
                let n = checkpoint::load(&mut store, p, partial)?;
                log::info!("initialized {n} tensors from {}", p.display());
            }
            let mut run_dir = RunDir::create(&out)?;
            let echoed = cfg.to_json();
            write_file(&out.join("config.json"), &echoed)?;
            eprint!("{echoed}");
            let mut summary = training::train(&model, &mut store, &train_set, &val_set, &cfg.train, cfg.seed, Some(&mut run_dir))?;
            if stable {
                summary.history.iter_mut().for_each(|m| m.wall_ms = 0);
            }
            #[derive(Serialize)]
            struct Out {
                epochs_run: usize,
                steps: u64,
                reached_target: Option<usize>,
                last: Option<training::EpochMetrics>,
                checkpoint: PathBuf,
            }
            print_json(&Out {
                epochs_run: summary.epochs_run,
                steps: summary.steps,
                reached_target: summary.reached_target,
                last: summary.history.last().cloned(),
                checkpoint: run_dir.final_checkpoint(),
            });
            Ok(0)
        }
        Cmd::Eval {
            config,
            ckpt,
            data,
            dets,
            split,
            partial,
        } => {
            let cfg = load_config(&config, ckpt.as_deref().and_then(Path::parent).map(|d| d.join("config.json")).as_deref())?;
            let manifest = dataset::read_manifest(&data)?;
            let records = match split {
                SplitArg::Train => dataset::load_split(&data, &manifest, Split::Train)?,
                SplitArg::Val => dataset::load_split(&data, &manifest, Split::Val)?,
                SplitArg::All => dataset::load_all(&data, &manifest)?,
            };
            let num_classes = manifest.classes.len();
            let report = match (dets, ckpt) {
                (Some(path), _) => {
                    let text = fs::read_to_string(&path).map_err(|e| DetrError::io(&path, e))?;
                    let dets: Vec<Detection> = if text.trim().is_empty() {
                        Vec::new()
                    } else {
                        serde_json::from_str(&text).map_err(|e| DetrError::Format(format!("{}: {e}", path.display())))?
                    };
                    let gts: BTreeMap<String, _> = records.iter().map(|r| (r.id.clone(), r.boxes.clone())).collect();
                    evaluate(&dets, &gts, num_classes)
                }
                (None, Some(ckpt)) => {
                    let (model, store) = load_model(&cfg, num_classes, &ckpt, partial)?;
                    model.evaluate(&store, &inputs(&records, &cfg)?, cfg.eval.score_thresh)?
                }
                (None, None) => return Err(DetrError::Config("eval needs --ckpt or --dets".into())),
            };
            for c in &report.classes {
                let name = manifest.classes.get(c.class_id).map_or("?", String::as_str);
                eprintln!(
                    "{:>3} {:<10} gt {:>4} dets {:>5} AP25 {} AP50 {}",
                    c.class_id,
                    name,
                    c.gt,
                    c.detections,
                    fmt_ap(c.ap25),
                    fmt_ap(c.ap50)
                );
            }
            eprintln!("mean AP25 {:.4} AP50 {:.4}", report.mean_ap25, report.mean_ap50);
            print_json(&report);
            Ok(0)
        }
        Cmd::Infer {
            config,
            ckpt,
            scene,
            ply,
            partial,
        } => {
            let cfg = load_config(&config, ckpt.parent().map(|d| d.join("config.json")).as_deref())?;
            let record = read_scene_dir(&scene)?;
            let (model, store) = load_model(&cfg, cfg.generator.classes.len(), &ckpt, partial)?;
            let input = prepare_input(&record, &cfg.model, cfg.seed)?;
            let dets = model.detect(&store, &input, cfg.eval.score_thresh)?;
            if let Some(path) = ply {
                let (cloud, colors) = detection_cloud(&input, &dets)?;
                write_ply(&path, &cloud, Some(&colors))?;
            }
            print_json(&dets);
            Ok(0)
        }
        Cmd::Gradcheck { config, seed } => {
            let cfg = load_config(&config, None)?;
            let report = gradcheck::run(&cfg, seed.unwrap_or(cfg.seed))?;
            for m in &report.modules {
                eprintln!("{:<26} tensors {:>3} probes {:>4} max rel err {:.3e}", m.module, m.tensors, m.probed, m.max_rel_err);
            }
            print_json(&report);
            Ok(if report.passed { 0 } else { 3 })
        }
        Cmd::Inspect { config, ckpt } => {
            let bytes = fs::read(&ckpt).map_err(|e| DetrError::io(&ckpt, e))?;
            let entries = checkpoint::parse(&bytes)?;
            #[derive(Serialize)]
            struct Entry {
                name: String,
                shape: Vec<usize>,
                scalars: usize,
            }
            #[derive(Serialize)]
            struct Out {
                tensors: usize,
                scalars: usize,
                entries: Vec<Entry>,
                /// Tensors the configured model expects but the file lacks.
                missing: Vec<String>,
                /// Tensors in the file the configured model does not have.
                unexpected: Vec<String>,
            }
            let cfg = load_config(&config, ckpt.parent().map(|d| d.join("config.json")).as_deref())?;
            let (_, store) = Model::new::<f32>(&cfg.model, cfg.generator.classes.len(), cfg.seed)?;
            let names: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
            let out = Out {
                tensors: entries.len(),
                scalars: entries.iter().map(|(_, t)| t.numel()).sum(),
                missing: store
                    .iter()
                    .map(|(_, p)| p.name.clone())
                    .filter(|n| !names.contains(&n.as_str()))
                    .collect(),
                unexpected: names.iter().filter(|n| store.id(n).is_none()).map(|n| n.to_string()).collect(),
                entries: entries
                    .iter()
                    .map(|(n, t)| Entry {
                        name: n.clone(),
                        shape: t.shape().to_vec(),
                        scalars: t.numel(),
                    })
                    .collect(),
            };
            print_json(&out);
            Ok(0)
        }
    }
}

fn fmt_ap(ap: Option<f64>) -> String {
    ap.map_or_else(|| "  -   ".to_string(), |v| format!("{v:.4}"))
}

fn inputs(records: &[detr3d_core::rgbd::io::SceneRecord], cfg: &RunConfig) -> Result<Vec<SceneInput>, DetrError> {
    records.iter().map(|r| prepare_input(r, &cfg.model, cfg.seed)).collect()
}

fn load_model(cfg: &RunConfig, num_classes: usize, ckpt: &Path, partial: bool) -> Result<(Model, ParamStore<f32>), DetrError> {
    let (model, mut store) = Model::new::<f32>(&cfg.model, num_classes, cfg.seed)?;
    checkpoint::load(&mut store, ckpt, partial)?;
    Ok((model, store))
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// The sampled points with a color per point: the palette color of the
/// highest-scoring detection whose box contains it, gray otherwise.
fn detection_cloud(input: &SceneInput, dets: &[Detection]) -> Result<(ColoredPointCloud, Vec<[u8; 3]>), DetrError> {
    let boxes = dets.iter().map(Detection::to_box).collect::<Result<Vec<_>, _>>()?;
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
    let mut colors = Vec::with_capacity(input.xyz.len());
    let mut points = Vec::with_capacity(input.xyz.len());
    for (p, px) in input.xyz.iter().zip(&input.pixels) {
        let inside = order.iter().find(|&&i| {
            let q = boxes[i].to_local(*p);
            (0..3).all(|a| q[a].abs() <= boxes[i].size[a] / 2.0)
        });
        colors.push(inside.map_or([128, 128, 128], |&i| PALETTE[i % PALETTE.len()]));
        let c = input.image.at(px[0].floor() as usize, px[1].floor() as usize);
        points.push(CloudPoint {
            position: *p,
            color: c,
            pixel: *px,
        });
    }
    Ok((ColoredPointCloud { points }, colors))
}
