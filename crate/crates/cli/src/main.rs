use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agsenet::data::{
    self, load_image, load_samples, save_depth_png, save_gray_png, save_raw_f32, save_rgb_png, synth_fog,
    synth_scene, write_manifest, ManifestEntry, SynthSpec,
};
use agsenet::metrics::DEFAULT_THRESHOLD;
use agsenet::model::round_size;
use agsenet::trainer::{evaluate_with, predict_fused};
use agsenet::{load_checkpoint, Agsenet, Error, FogParams, ModelConfig, Sample, Tensor, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "agsenet", version, about = "Road-ponding segmentation: train, evaluate, infer, synthesize data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a TSV manifest (image, mask[, depth]).
    Train(TrainArgs),
    /// Evaluate a checkpoint; writes a table to REPORT and metric=value lines to REPORT.kv.
    Eval(EvalArgs),
    /// Predict the fused probability map of one image.
    Infer(InferArgs),
    /// Generate synthetic road scenes with puddle masks and depth.
    Synth(SynthArgs),
    /// Add homogeneous fog to every image of a manifest (needs depth).
    Fog(FogArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoints and train.log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f32,
    /// Learning rate of the loss scales gamma and delta (defaults to --lr; 0 fixes them).
    #[arg(long = "scale-lr")]
    scale_lr: Option<f32>,
    #[arg(long, default_value_t = 5e-4)]
    wd: f32,
    #[arg(long, default_value_t = 0.0)]
    momentum: f32,
    /// Epochs during which SSIE parameters stay frozen.
    #[arg(long = "freeze-ssie", default_value_t = 50)]
    freeze_ssie: usize,
    /// Square training resolution; must be a multiple of 32 and at least 64.
    #[arg(long, default_value_t = 320)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Validate and checkpoint every N epochs (0 disables).
    #[arg(long = "eval-every", default_value_t = 50)]
    eval_every: usize,
    /// Disable flip / brightness / saturation jitter.
    #[arg(long = "no-augment")]
    no_augment: bool,
    /// Train the ablation baseline (no CSIF, no SSIE).
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f32,
    /// Square network input size; images are resized to it and maps resized back.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output PNG: 8-bit fused probability map, round(p·255).
    #[arg(long)]
    out: PathBuf,
    /// Optional color overlay PNG (foreground tinted red).
    #[arg(long)]
    overlay: Option<PathBuf>,
    /// Optional raw f32 sidecar with exact probabilities.
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Square network input size; required when the image sides are not multiples of 32.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FogArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Extinction coefficient (1/m), >= 0.
    #[arg(long)]
    beta: f32,
    /// Atmospheric light in [0, 1].
    #[arg(long)]
    light: f32,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Synth(a) => synth(a),
        Command::Fog(a) => fog(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("AGSENET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("AGSENET_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

type Result<T> = std::result::Result<T, Error>;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn train(a: TrainArgs) -> Result<()> {
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        scale_lr: a.scale_lr.unwrap_or(a.lr),
        weight_decay: a.wd,
        momentum: a.momentum,
        ssie_freeze_epochs: a.freeze_ssie,
        seed: a.seed,
        train_size: (a.size, a.size),
        augment: !a.no_augment,
        checkpoint_dir: Some(a.out.clone()),
        eval_every: a.eval_every,
    };
    config.validate()?;
    let samples = load_samples(&a.manifest)?;
    let (mut train, mut val) = data::split_train_val(samples);
    if train.is_empty() {
        train = std::mem::take(&mut val);
    }
    log::info!("{} training and {} validation samples", train.len(), val.len());
    let model_config = if a.baseline {
        ModelConfig::baseline(a.seed)
    } else {
        ModelConfig::agsenet(a.seed)
    };
    let mut trainer = Trainer::new(config, Agsenet::new(model_config)?)?;
    trainer.fit(&train, &val)?;
    println!("{}", a.out.join("final").display());
    Ok(())
}

/// Network input size for an `h×w` image.
fn network_size(h: usize, w: usize, size: Option<usize>) -> Result<Option<(usize, usize)>> {
    match size {
        Some(s) => {
            Agsenet::check_input(s, s)?;
            Ok(Some((s, s)))
        }
        None => match Agsenet::check_input(h, w) {
            Ok(()) => Ok(None),
            Err(_) => Err(Error::Config(format!(
                "image is {h}x{w}; sides must be multiples of 32 (at least 64). Pass --size {}",
                round_size(h.max(w))
            ))),
        },
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, _, _) = load_checkpoint(&a.ckpt)?;
    let samples = load_samples(&a.manifest)?;
    let report = evaluate_with(&samples, a.threshold, |s: &Sample| {
        let size = network_size(s.height(), s.width(), a.size)?;
        predict_fused(&model, s, size)
    })?;
    let table = report.to_table();
    print!("{table}");
    write_text(&a.report, &table)?;
    let mut kv_path = a.report.clone().into_os_string();
    kv_path.push(".kv");
    write_text(Path::new(&kv_path), &report.to_kv())
}

fn infer(a: InferArgs) -> Result<()> {
    let (model, _, _) = load_checkpoint(&a.ckpt)?;
    let image = load_image(&a.image)?;
    let (h, w) = (image.shape()[2], image.shape()[3]);
    let size = network_size(h, w, a.size)?;
    let sample = Sample::new("infer", image, Tensor::zeros(&[1, 1, h, w]), None)?;
    let prob = predict_fused(&model, &sample, size)?;
    save_gray_png(&a.out, &prob)?;
    if let Some(path) = &a.raw {
        save_raw_f32(path, &prob)?;
    }
    if let Some(path) = &a.overlay {
        save_rgb_png(path, &overlay(&sample.image, &prob))?;
    }
    Ok(())
}

/// Blends foreground pixels (p ≥ 0.5) halfway toward red.
fn overlay(image: &Tensor, prob: &Tensor) -> Tensor {
    let plane = prob.numel();
    let mut out = image.clone();
    let data = out.data_mut();
    for (i, &p) in prob.data().iter().enumerate() {
        if p >= DEFAULT_THRESHOLD {
            for (c, tint) in [1.0f32, 0.0, 0.0].into_iter().enumerate() {
                let v = &mut data[c * plane + i];
                *v = 0.5 * *v + 0.5 * tint;
            }
        }
    }
    out
}

fn scene_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::Config("--count must be positive".into()));
    }
    let dirs = ["images", "masks", "depth"].map(|d| a.out.join(d));
    for d in &dirs {
        create_dir(d)?;
    }
    let mut entries = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let scene = synth_scene(&SynthSpec::new(a.size, scene_seed(a.seed, i as u64)))?;
        let name = format!("scene_{i:04}.png");
        let entry = ManifestEntry {
            image: dirs[0].join(&name),
            mask: dirs[1].join(&name),
            depth: Some(dirs[2].join(&name)),
        };
        let s = &scene.sample;
        save_rgb_png(&entry.image, &s.image)?;
        save_gray_png(&entry.mask, &s.mask)?;
        save_depth_png(entry.depth.as_ref().expect("set above"), s.depth.as_ref().expect("synthetic depth"))?;
        entries.push(entry);
    }
    write_manifest(&a.out.join("manifest.tsv"), &entries)?;
    println!("{}", a.out.join("manifest.tsv").display());
    Ok(())
}

fn fog(a: FogArgs) -> Result<()> {
    let params = FogParams::new(a.beta, a.light);
    let entries = data::load_manifest(&a.manifest)?;
    let samples = load_samples(&a.manifest)?;
    let dirs = ["images", "masks", "depth"].map(|d| a.out.join(d));
    for d in &dirs {
        create_dir(d)?;
    }
    let mut out_entries = Vec::with_capacity(entries.len());
    for (entry, sample) in entries.iter().zip(&samples) {
        let fogged = synth_fog(sample, &params)?;
        let file = |p: &Path| p.file_name().map(PathBuf::from).unwrap_or_default();
        let image = dirs[0].join(file(&entry.image)).with_extension("png");
        save_rgb_png(&image, &fogged.image)?;
        let mask = dirs[1].join(file(&entry.mask));
        copy(&entry.mask, &mask)?;
        let depth = match &entry.depth {
            Some(d) => {
                let to = dirs[2].join(file(d));
                copy(d, &to)?;
                Some(to)
            }
            None => None,
        };
        out_entries.push(ManifestEntry { image, mask, depth });
    }
    write_manifest(&a.out.join("manifest.tsv"), &out_entries)?;
    println!("{}", a.out.join("manifest.tsv").display());
    Ok(())
}

fn copy(from: &Path, to: &Path) -> Result<()> {
    fs::copy(from, to)
        .map(|_| ())
        .map_err(|e| Error::Data(format!("cannot copy {} to {}: {e}", from.display(), to.display())))
}
