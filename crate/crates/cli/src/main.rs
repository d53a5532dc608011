use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fbocc_core::container::TensorContainer;
use fbocc_core::io::{
    occ_gt_to_container, prediction_from_container, prediction_to_container, read_occ_gt, ModelWeights,
};
use fbocc_core::losses::{total_loss, voxel_losses, LossTerms, LossWeights};
use fbocc_core::metrics::{ConfusionMatrix, EvalReport};
use fbocc_core::occ_head::{decode, OccupancyGrid, PredictionResult};
use fbocc_core::pipeline::{bundled_scene, frame_inputs, report_json, run_pipeline, PipelineConfig};
use fbocc_core::postprocess::{
    ensemble, score_predictions, search_weights, weights_from_json, weights_to_json, EnsembleMember, EnsembleWeights,
};
use fbocc_core::scene::SceneSpec;
use fbocc_core::NUM_CLASSES;

#[derive(Parser)]
#[command(name = "fbocc", version, about = "Camera-based 3D semantic occupancy engine")]
struct Cli {
    /// Pipeline configuration JSON (defaults to the desk-scale config).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for weight initialization and weight search.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a scene spec plus per-frame ground-truth containers.
    GenScene {
        #[arg(long)]
        out: PathBuf,
        /// Scene spec to rasterize instead of the bundled street scene.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        frames: usize,
    },
    /// Run the full pipeline and print the metrics report.
    #[command(alias = "run-pipeline")]
    Infer(InferArgs),
    /// Score prediction containers against ground-truth containers.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        pred: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        gt: Vec<PathBuf>,
        /// Count camera-invisible voxels too.
        #[arg(long)]
        no_mask: bool,
    },
    /// Print the voxel loss breakdown of one prediction.
    EvalLoss {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Loss weights JSON (`{"focal": 1.0, ...}`); defaults to all 1.
        #[arg(long)]
        loss_weights: Option<PathBuf>,
    },
    /// Run the pipeline with flip TTA (and optionally temporal TTA).
    Tta {
        #[command(flatten)]
        infer: InferArgs,
        #[arg(long)]
        temporal: bool,
    },
    /// Combine member predictions with two-factor weights.
    Ensemble {
        #[arg(long, num_args = 1.., required = true)]
        pred: Vec<PathBuf>,
        /// Weight table from `search-weights`; members in table order.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Ground truth used to derive default weights when no table is given.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search per-member, per-class ensemble weights on validation frames.
    SearchWeights {
        /// `id=pred0.octc,pred1.octc,...`, one per member.
        #[arg(long, num_args = 1.., required = true)]
        member: Vec<String>,
        #[arg(long, num_args = 1.., required = true)]
        gt: Vec<PathBuf>,
        #[arg(long, default_value_t = 32)]
        budget: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct InferArgs {
    /// Scene spec JSON; defaults to the bundled street scene.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    frames: usize,
    /// Weight container; seeded random weights when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Write the weights actually used to this container.
    #[arg(long)]
    save_weights: Option<PathBuf>,
    /// Replace the model by one-hot ground truth.
    #[arg(long)]
    oracle: bool,
    /// Directory for per-frame prediction containers.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write per-stage timings (JSON) here instead of stderr.
    #[arg(long)]
    timings: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::from_json(&read_text(p)?).with_context(|| format!("config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::GenScene { out, scene, frames } => gen_scene(&cfg, &out, scene.as_deref(), frames),
        Command::Infer(args) => infer(&cfg, cli.seed, &args),
        Command::Tta { infer: args, temporal } => {
            let cfg = PipelineConfig {
                flip_tta: true,
                temporal_tta: temporal || cfg.temporal_tta,
                ..cfg
            };
            infer(&cfg, cli.seed, &args)
        }
        Command::Eval { pred, gt, no_mask } => eval(&pred, &gt, !no_mask),
        Command::EvalLoss { pred, gt, loss_weights } => eval_loss(&cfg, &pred, &gt, loss_weights.as_deref()),
        Command::Ensemble { pred, table, gt, out } => run_ensemble(&pred, table.as_deref(), gt.as_deref(), &out),
        Command::SearchWeights { member, gt, budget, out } => run_search(&member, &gt, budget, cli.seed, out.as_deref()),
    }
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn read_container(p: &Path) -> Result<TensorContainer> {
    TensorContainer::read(p).with_context(|| format!("reading {}", p.display()))
}

fn read_pred(p: &Path) -> Result<PredictionResult> {
    prediction_from_container(&read_container(p)?).with_context(|| format!("prediction {}", p.display()))
}

fn read_gt(p: &Path) -> Result<OccupancyGrid> {
    read_occ_gt(&read_container(p)?).with_context(|| format!("ground truth {}", p.display()))
}

fn load_scene(cfg: &PipelineConfig, path: Option<&Path>, frames: usize) -> Result<SceneSpec> {
    match path {
        Some(p) => SceneSpec::from_json(&read_text(p)?).with_context(|| format!("scene {}", p.display())),
        None => Ok(bundled_scene(cfg, frames)?),
    }
}

fn gen_scene(cfg: &PipelineConfig, out: &Path, scene: Option<&Path>, frames: usize) -> Result<()> {
    let spec = load_scene(cfg, scene, frames)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("scene.json"), spec.to_json())?;
    for f in 0..spec.num_frames() {
        let inputs = frame_inputs(&spec, &cfg.grid, f)?;
        let path = out.join(format!("gt_{f:03}.octc"));
        occ_gt_to_container(&inputs.gt).write(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn infer(cfg: &PipelineConfig, seed: u64, args: &InferArgs) -> Result<()> {
    let scene = load_scene(cfg, args.scene.as_deref(), args.frames)?;
    let weights = match &args.weights {
        Some(p) => ModelWeights::from_container(&read_container(p)?, &cfg.encoder)
            .with_context(|| format!("weights {}", p.display()))?,
        None => ModelWeights::random(&cfg.encoder, seed),
    };
    if let Some(p) = &args.save_weights {
        weights.to_container().write(p)?;
    }
    let out = run_pipeline(&scene, &weights, cfg, args.oracle)?;
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir)?;
        for (f, (pred, gt)) in out.predictions.iter().zip(&out.ground_truth).enumerate() {
            prediction_to_container(pred).write(dir.join(format!("pred_{f:03}.octc")))?;
            occ_gt_to_container(gt).write(dir.join(format!("gt_{f:03}.octc")))?;
        }
    }
    let report = report_json(&out.report);
    match &args.report {
        Some(p) => fs::write(p, report + "\n")?,
        None => println!("{report}"),
    }
    let timings = serde_json::to_string_pretty(&out.timings)?;
    match &args.timings {
        Some(p) => fs::write(p, timings + "\n")?,
        None => eprintln!("{timings}"),
    }
    Ok(())
}

fn eval(preds: &[PathBuf], gts: &[PathBuf], use_mask: bool) -> Result<()> {
    if preds.len() != gts.len() {
        bail!("{} predictions for {} ground-truth files", preds.len(), gts.len());
    }
    let mut cm = ConfusionMatrix::default();
    for (p, g) in preds.iter().zip(gts) {
        cm.accumulate(&decode(&read_pred(p)?), &read_gt(g)?, use_mask)?;
    }
    println!("{}", serde_json::to_string_pretty(&EvalReport::from_confusion(&cm))?);
    Ok(())
}

fn eval_loss(cfg: &PipelineConfig, pred: &Path, gt: &Path, weights: Option<&Path>) -> Result<()> {
    let weights = match weights {
        Some(p) => LossWeights::new(serde_json::from_str::<LossTerms>(&read_text(p)?)?)?,
        None => LossWeights::default(),
    };
    let pred = read_pred(pred)?;
    let gt = read_gt(gt)?;
    if <[usize; 3]>::from(gt.dim()) != cfg.grid.shape() {
        bail!("ground truth {:?} does not match the configured grid {:?}", gt.dim(), cfg.grid.shape());
    }
    let terms = voxel_losses(&pred, &gt, &cfg.grid)?;
    println!("{}", serde_json::to_string_pretty(&total_loss(&terms, &weights))?);
    Ok(())
}

fn run_ensemble(preds: &[PathBuf], table: Option<&Path>, gt: Option<&Path>, out: &Path) -> Result<()> {
    let predictions = preds.iter().map(|p| read_pred(p)).collect::<Result<Vec<_>>>()?;
    let weights = match (table, gt) {
        (Some(t), _) => {
            let (ids, w) = weights_from_json(&read_text(t)?)?;
            if ids.len() != predictions.len() {
                bail!("weight table lists {} members, {} predictions given", ids.len(), predictions.len());
            }
            Some(w)
        }
        (None, Some(_)) => None,
        (None, None) => Some(EnsembleWeights {
            model: vec![1.0; predictions.len()],
            class: vec![[1.0; NUM_CLASSES]; predictions.len()],
        }),
    };
    let members = match gt {
        Some(g) if weights.is_none() => {
            let gt = read_gt(g)?;
            predictions
                .into_iter()
                .map(|p| {
                    let (m, c) = score_predictions(std::slice::from_ref(&p), std::slice::from_ref(&gt))?;
                    Ok(EnsembleMember::new(p, m, c)?)
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => predictions
            .into_iter()
            .map(|p| EnsembleMember::new(p, 1.0, [1.0; NUM_CLASSES]))
            .collect::<fbocc_core::Result<Vec<_>>>()?,
    };
    let combined = ensemble(&members, weights.as_ref())?;
    prediction_to_container(&combined).write(out)?;
    println!("{}", out.display());
    Ok(())
}

fn run_search(members: &[String], gts: &[PathBuf], budget: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let gts = gts.iter().map(|g| read_gt(g)).collect::<Result<Vec<_>>>()?;
    let mut ids = Vec::new();
    let mut preds = Vec::new();
    for m in members {
        let Some((id, files)) = m.split_once('=') else {
            bail!("member `{m}` must look like id=pred0.octc,pred1.octc");
        };
        ids.push(id.to_string());
        preds.push(
            files
                .split(',')
                .map(|f| read_pred(Path::new(f)))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let result = search_weights(&preds, &gts, budget, seed)?;
    let json = weights_to_json(&result.weights, &ids, Some(result.miou))?;
    match out {
        Some(p) => fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}
