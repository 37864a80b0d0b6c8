use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eyolo_core::bench::{bench_nms, bench_speed, format_speed_table, random_candidates};
use eyolo_core::checkpoint::{load_network, Checkpoint};
use eyolo_core::dataset::{generate_synthetic, load_dataset, load_sample, LoadOptions, DEPTH_RANGE_M};
use eyolo_core::eval::{detect, evaluate_detections, evaluate_oracle};
use eyolo_core::geometry::format_detections;
use eyolo_core::ply::export_ply;
use eyolo_core::train::{fit, TrainConfig, CONFIG_FILE};
use eyolo_core::{
    AdamConfig, Error, Intrinsics, LossConfig, NetConfig, Network, NmsConfig, Preset, SceneSpec, Trainer,
};

#[derive(Parser)]
#[command(name = "eyolo", version, about = "RGB-D 3D object detection with an S×S×S YOLO grid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic RGB-D dataset of colored cuboids.
    Synth(SynthArgs),
    /// Train a network; writes loss.csv, steps.csv, config.toml and checkpoints.
    Train(TrainArgs),
    /// Detect boxes in one sample directory.
    Detect(DetectArgs),
    /// Report mean/max 2D IoU, 3D IoU and 3D IoU^(2/3) over a dataset.
    Eval(EvalArgs),
    /// Time the detection pipeline and compare the NMS variants.
    Bench(BenchArgs),
    /// Export a sample's point cloud and ground-truth boxes as PLY.
    Export(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    scenes: usize,
    #[arg(long, default_value_t = 128)]
    image_size: usize,
    #[arg(long, default_value_t = 1)]
    min_objects: usize,
    #[arg(long, default_value_t = 5)]
    max_objects: usize,
    /// Probability that an object is a person.
    #[arg(long, default_value_t = 0.5)]
    person_fraction: f64,
    /// Working depth range in meters.
    #[arg(long, default_value_t = DEPTH_RANGE_M)]
    depth_range: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ModelArgs {
    /// Network preset: tiny (128 px input, 8³ grid) or full (416 px, 26³ grid).
    #[arg(long, default_value = "tiny")]
    preset: Preset,
    /// Network config TOML; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelArgs {
    fn net_config(&self) -> Result<NetConfig, Error> {
        match &self.config {
            Some(path) => NetConfig::load(path),
            None => NetConfig::from_preset(self.preset),
        }
    }
}

#[derive(Args)]
struct NmsArgs {
    /// 3D IoU above which a lower-confidence box is suppressed.
    #[arg(long, default_value_t = 0.35)]
    nms: f64,
    /// Minimum confidence for a cell to become a detection.
    #[arg(long, default_value_t = 0.5)]
    conf: f64,
    /// Suppress only boxes of the same class.
    #[arg(long)]
    per_class: bool,
}

impl NmsArgs {
    fn config(&self) -> NmsConfig {
        NmsConfig {
            iou_threshold_3d: self.nms,
            confidence_floor: self.conf,
            class_agnostic: !self.per_class,
            ..NmsConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long, env = "EYOLO_DATA")]
    data: PathBuf,
    /// Output directory for logs and checkpoints.
    #[arg(long, default_value = "runs/eyolo")]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Minibatch size [default: 4 for tiny, 8 for full].
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_coord: f64,
    #[arg(long, default_value_t = 10.0)]
    lambda_noobj: f64,
    /// Fraction of the manifest (taken from the end) held out for validation.
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Seeds weight initialization and minibatch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Network config TOML [default: config.toml beside the checkpoint].
    #[arg(long)]
    config: Option<PathBuf>,
}

impl CheckpointArgs {
    fn load(&self) -> Result<Network, Error> {
        let cfg_path = match &self.config {
            Some(p) => p.clone(),
            None => self.ckpt.with_file_name(CONFIG_FILE),
        };
        load_network(NetConfig::load(&cfg_path)?, &self.ckpt)
    }
}

#[derive(Args)]
struct DetectArgs {
    /// Sample directory with color.png and depth.png.
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[command(flatten)]
    nms: NmsArgs,
    /// Detection list output [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a PLY with the cloud, ground truth (red) and detections (yellow).
    #[arg(long)]
    ply: Option<PathBuf>,
    /// Detection is deterministic; accepted so every subcommand takes a seed.
    #[arg(long, default_value_t = 0)]
    #[allow(dead_code)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, env = "EYOLO_DATA")]
    data: PathBuf,
    /// Trained checkpoint; required unless --oracle.
    #[arg(long, required_unless_present = "oracle")]
    ckpt: Option<PathBuf>,
    /// Network config TOML [default: config.toml beside the checkpoint].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feed ground truth through the metric path as detections.
    #[arg(long)]
    oracle: bool,
    #[command(flatten)]
    nms: NmsArgs,
    /// Evaluation is deterministic; accepted so every subcommand takes a seed.
    #[arg(long, default_value_t = 0)]
    #[allow(dead_code)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Benchmark these weights instead of a seeded initialization.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Timed pipeline runs.
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    /// Candidate boxes for the NMS comparison.
    #[arg(long, default_value_t = 1000)]
    candidates: usize,
    #[command(flatten)]
    nms: NmsArgs,
    /// Seeds the weights, the input image and the NMS candidates.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    /// Sample directory.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Image size to load at [default: stored size].
    #[arg(long)]
    size: Option<usize>,
    /// Export is deterministic; accepted so every subcommand takes a seed.
    #[arg(long, default_value_t = 0)]
    #[allow(dead_code)]
    seed: u64,
}

fn synth(a: &SynthArgs) -> Result<(), Error> {
    let spec = SceneSpec {
        seed: a.seed,
        scenes: a.scenes,
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        depth_range_m: a.depth_range,
        image_size: a.image_size,
        person_fraction: a.person_fraction,
        ..SceneSpec::default()
    };
    let scenes = generate_synthetic(&spec, &a.out)?;
    let objects: usize = scenes.iter().map(|s| s.objects.len()).sum();
    println!("wrote {} scenes ({objects} objects) to {}", scenes.len(), a.out.display());
    Ok(())
}

fn require_dir(path: &Path) -> Result<(), Error> {
    if path.is_dir() {
        return Ok(());
    }
    Err(Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
    })
}

fn train(a: &TrainArgs) -> Result<(), Error> {
    require_dir(&a.data)?;
    let net_cfg = a.model.net_config()?;
    net_cfg.validate()?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a
            .batch_size
            .unwrap_or_else(|| eyolo_core::train::default_batch_size(net_cfg.preset)),
        seed: a.seed,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        loss: LossConfig {
            lambda_coord: a.lambda_coord,
            lambda_noobj: a.lambda_noobj,
        },
    };
    cfg.validate()?;
    if !(0.0..1.0).contains(&a.val_fraction) {
        return Err(Error::Usage("--val-fraction must lie in [0, 1)".into()));
    }
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(net_cfg.clone(), &Checkpoint::load(path)?, cfg.adam, cfg.loss)?,
        None => Trainer::new(Network::build(net_cfg.clone(), a.seed)?, cfg.adam, cfg.loss)?,
    };
    let mut samples = load_dataset(&a.data, &LoadOptions::sized(net_cfg.input_size))?;
    let n_val = (samples.len() as f64 * a.val_fraction).floor() as usize;
    let val = samples.split_off(samples.len() - n_val);
    println!(
        "training {} preset on {} scenes ({} held out), batch {}",
        net_cfg.preset.name(),
        samples.len(),
        val.len(),
        cfg.batch_size
    );
    let report = fit(&mut trainer, &samples, &val, &cfg, &a.out, |e| {
        println!("epoch {:>4}  train_loss {:>12.4}  val_loss {:>12.4}", e.epoch, e.train_loss, e.val_loss);
    })?;
    if let Some(best) = report.best_epoch {
        println!("best val_loss {:.4} at epoch {best}; outputs in {}", report.best_val_loss, a.out.display());
    }
    Ok(())
}

fn detect_cmd(a: &DetectArgs) -> Result<(), Error> {
    require_dir(&a.image)?;
    let net = a.ckpt.load()?;
    let sample = load_sample(&a.image, &LoadOptions::sized(net.config().input_size))?;
    let dets = detect(&net, std::slice::from_ref(&sample), &a.nms.config(), 1)?.remove(0);
    let text = format_detections(&dets);
    match &a.out {
        Some(path) => std::fs::write(path, &text).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?,
        None => print!("{text}"),
    }
    if let Some(ply) = &a.ply {
        export_ply(&sample, &dets, &Intrinsics::default_for(sample.image_size()), ply)?;
    }
    eprintln!("{} detections in {}", dets.len(), a.image.display());
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<(), Error> {
    require_dir(&a.data)?;
    let report = if a.oracle {
        evaluate_oracle(&load_dataset(&a.data, &LoadOptions::default())?)?
    } else {
        let ckpt = CheckpointArgs {
            ckpt: a.ckpt.clone().expect("clap requires --ckpt without --oracle"),
            config: a.config.clone(),
        };
        let net = ckpt.load()?;
        let samples = load_dataset(&a.data, &LoadOptions::sized(net.config().input_size))?;
        let dets = detect(&net, &samples, &a.nms.config(), 4)?;
        let scenes: Vec<_> = samples.iter().map(|s| s.boxes.clone()).zip(dets).collect();
        evaluate_detections(&scenes)?
    };
    print!("{}", report.to_table());
    Ok(())
}

fn bench_cmd(a: &BenchArgs) -> Result<(), Error> {
    let nms = a.nms.config();
    nms.validate()?;
    let net = match &a.ckpt {
        Some(path) => load_network(a.model.net_config()?, path)?,
        None => Network::build(a.model.net_config()?, a.seed)?,
    };
    let pipeline = bench_speed(&net, &nms, a.warmup, a.iterations, a.seed)?;
    println!("{}", format_speed_table(&[pipeline]));
    let candidates = random_candidates(a.candidates, a.seed);
    let rows = bench_nms(&candidates, &nms, a.warmup, a.iterations)?;
    println!("NMS over {} candidates", candidates.len());
    print!("{}", format_speed_table(&rows));
    Ok(())
}

fn export_cmd(a: &ExportArgs) -> Result<(), Error> {
    require_dir(&a.image)?;
    let opts = LoadOptions {
        input_size: a.size,
        ..LoadOptions::default()
    };
    let sample = load_sample(&a.image, &opts)?;
    export_ply(&sample, &[], &Intrinsics::default_for(sample.image_size()), &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Detect(a) => detect_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Export(a) => export_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
