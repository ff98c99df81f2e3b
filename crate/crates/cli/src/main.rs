use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use deblock::arch::{Arch, Objective};
use deblock::dataset::{load_pairs, DatasetManifest, ManifestEntry};
use deblock::experiments::{
    export_first_layer_filters, load_image_dir, run_dataset_size_study, run_quality_generalization,
    size_results_csv, synthesize_pairs, NamedImage,
};
use deblock::image::{load_gray, save_gray};
use deblock::metrics::{ImageMetrics, MetricOptions, MetricsReport};
use deblock::train::{load_checkpoint, Preset, TrainConfig, TrainOptions, Trainer};
use deblock::{jpeg_degrade, load_model, save_model, spp_filter, Error};

const DEFAULT_SEED: u64 = 1;

#[derive(Parser, Debug)]
#[command(name = "deblock", version, about = "JPEG deblocking with small fully convolutional networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// JPEG-degrade every image of a directory
    Degrade(DegradeArgs),
    /// Train a network from a manifest of clean/distorted pairs
    Train(TrainArgs),
    /// Restore every image of a directory with a trained model
    Restore(RestoreArgs),
    /// Score restored images against references, CSV to stdout or --out
    Evaluate(EvaluateArgs),
    /// Apply the shift-averaging baseline filter
    Spp(SppArgs),
    /// IPSNR of several models on several qualities
    QualityMatrix(QualityMatrixArgs),
    /// Train on growing subsets and report train and test IPSNR
    DatasetSize(DatasetSizeArgs),
    /// Save the first-layer filters of a model as an image grid
    ExportFilters(ExportFiltersArgs),
}

#[derive(Args, Debug, Serialize)]
struct DegradeArgs {
    #[arg(long)]
    quality: u8,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    /// Also write a clean/distorted/quality manifest here
    #[arg(long)]
    manifest: Option<PathBuf>,
}

/// Flags that override a training preset.
#[derive(Args, Debug, Serialize)]
struct TrainFlags {
    #[arg(long, default_value = "l4")]
    arch: Arch,
    #[arg(long, default_value = "residual")]
    objective: Objective,
    #[arg(long, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    lr_halving_period: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Comma-separated; empty keeps every manifest entry
    #[arg(long, value_delimiter = ',')]
    qualities: Option<Vec<u8>>,
    #[arg(long)]
    checkpoint_period: Option<u64>,
    #[arg(long)]
    log_period: Option<u64>,
}

impl TrainFlags {
    fn resolve(&self) -> TrainConfig {
        let mut c = TrainConfig::preset(self.preset, self.arch, self.objective);
        c.seed = self.seed;
        macro_rules! set {
            ($($field:ident <- $flag:ident),*) => {$(
                if let Some(v) = self.$flag.clone() { c.$field = v; }
            )*};
        }
        set!(base_lr <- lr, weight_decay <- wd, momentum <- momentum, iterations <- iterations,
             lr_halving_period <- lr_halving_period, batch_size <- batch_size,
             patch_size <- patch_size, qualities <- qualities,
             checkpoint_period <- checkpoint_period, log_period <- log_period);
        c
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    manifest: PathBuf,
    /// Held-out pairs scored at every checkpoint
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Final model file
    #[arg(long = "out")]
    output: PathBuf,
    /// Training log CSV
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Checkpoint model to continue from
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct RestoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    restored: PathBuf,
    #[arg(long)]
    distorted: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long = "out")]
    output: Option<PathBuf>,
    /// Compare real-valued images instead of 8-bit values
    #[arg(long)]
    no_quantize: bool,
    /// Pixels ignored on every side
    #[arg(long, default_value_t = 0)]
    border: usize,
}

#[derive(Args, Debug, Serialize)]
struct SppArgs {
    #[arg(long)]
    quality: u8,
    #[arg(long, default_value_t = 64)]
    shifts: usize,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct QualityMatrixArgs {
    /// NAME=PATH, repeatable
    #[arg(long = "model", required = true)]
    models: Vec<String>,
    /// Clean held-out images, degraded at each quality
    #[arg(long)]
    clean: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50,60")]
    qualities: Vec<u8>,
    #[arg(long = "out")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct DatasetSizeArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    #[arg(long)]
    train_dir: PathBuf,
    #[arg(long)]
    test_dir: PathBuf,
    #[arg(long = "out")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ExportFiltersArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 3,
        Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

fn echo_config<T: Serialize>(name: &str, config: &T) {
    let json = serde_json::to_string(config).expect("configuration serializes");
    log::info!("{name} configuration: {json}");
}

fn create_dir(dir: &Path) -> deblock::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: Option<&Path>, text: &str) -> deblock::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn output_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.pgm"))
}

/// Applies `f` to every image, logging per-file failures; fails if any file failed.
fn for_each_image(
    images: &[NamedImage],
    out_dir: &Path,
    f: impl Fn(&NamedImage) -> deblock::Result<deblock::GrayImage> + Sync,
) -> deblock::Result<()> {
    use rayon::prelude::*;
    let failures: Vec<Error> = images
        .par_iter()
        .filter_map(|img| {
            let r = f(img).and_then(|out| save_gray(&out, output_path(out_dir, &img.name)));
            r.err().map(|e| {
                log::error!("{}: {e}", img.name);
                e
            })
        })
        .collect();
    match failures.into_iter().next() {
        None => Ok(()),
        Some(first) => Err(first),
    }
}

fn degrade(a: &DegradeArgs) -> deblock::Result<()> {
    echo_config("degrade", a);
    let images = load_image_dir(&a.input)?;
    create_dir(&a.output)?;
    for_each_image(&images, &a.output, |img| jpeg_degrade(&img.image, a.quality))?;
    if let Some(m) = &a.manifest {
        let abs = |p: PathBuf| std::path::absolute(&p).unwrap_or(p);
        let entries = images
            .iter()
            .map(|img| ManifestEntry {
                clean: abs(source_path(&a.input, &img.name)),
                distorted: abs(output_path(&a.output, &img.name)),
                quality: a.quality,
            })
            .collect();
        DatasetManifest { entries }.save(m)?;
    }
    log::info!("degraded {} images", images.len());
    Ok(())
}

/// The file a directory image was loaded from.
fn source_path(dir: &Path, stem: &str) -> PathBuf {
    ["pgm", "ppm", "pnm", "png", "PGM", "PPM", "PNM", "PNG"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.exists())
        .unwrap_or_else(|| dir.join(stem))
}

fn train_cmd(a: &TrainArgs) -> deblock::Result<()> {
    let config = a.flags.resolve();
    echo_config("train", &(&config, a));
    let manifest = DatasetManifest::load(&a.manifest)?.with_qualities(&config.qualities);
    if manifest.entries.is_empty() {
        return Err(Error::invalid("manifest has no entries at the requested qualities"));
    }
    let pairs = load_pairs(&manifest)?;
    let validation = match &a.val_manifest {
        Some(p) => load_pairs(&DatasetManifest::load(p)?.with_qualities(&config.qualities))?,
        None => Vec::new(),
    };
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            let (net, state) = load_checkpoint(ckpt)?;
            log::info!("resuming at iteration {}", state.iteration);
            Trainer::resume(config, net, state.iteration)?
        }
        None => Trainer::new(config)?,
    };
    let opts = TrainOptions {
        validation: &validation,
        checkpoint_dir: a.checkpoint_dir.clone(),
    };
    let log = trainer.run(&pairs, &opts)?;
    save_model(trainer.network(), &a.output)?;
    if let Some(p) = &a.log {
        log.save(p)?;
    }
    log::info!("model written to {}", a.output.display());
    Ok(())
}

fn restore(a: &RestoreArgs) -> deblock::Result<()> {
    echo_config("restore", a);
    let net = load_model(&a.model)?;
    let images = load_image_dir(&a.input)?;
    create_dir(&a.output)?;
    for_each_image(&images, &a.output, |img| net.restore(&img.image))
}

fn counterpart(dir: &Path, stem: &str) -> deblock::Result<deblock::GrayImage> {
    let p = source_path(dir, stem);
    if !p.exists() {
        return Err(Error::Io {
            path: dir.join(stem),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no file with this stem"),
        });
    }
    load_gray(p)
}

fn evaluate(a: &EvaluateArgs) -> deblock::Result<()> {
    echo_config("evaluate", a);
    let opts = MetricOptions {
        quantize: !a.no_quantize,
        border: a.border,
    };
    let restored = load_image_dir(&a.restored)?;
    let mut report = MetricsReport::default();
    for r in &restored {
        let distorted = counterpart(&a.distorted, &r.name)?;
        let reference = counterpart(&a.reference, &r.name)?;
        report.push(ImageMetrics::compute_with(&r.name, &r.image, &distorted, &reference, opts)?);
    }
    write_text(a.output.as_deref(), &report.to_csv())
}

fn spp(a: &SppArgs) -> deblock::Result<()> {
    echo_config("spp", a);
    deblock::spp::shift_set(a.shifts)?;
    let images = load_image_dir(&a.input)?;
    create_dir(&a.output)?;
    for_each_image(&images, &a.output, |img| spp_filter(&img.image, a.quality, a.shifts))
}

fn quality_matrix(a: &QualityMatrixArgs) -> deblock::Result<()> {
    echo_config("quality-matrix", a);
    let models = a
        .models
        .iter()
        .map(|m| {
            let (name, path) = m
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("--model expects NAME=PATH, got '{m}'")))?;
            Ok((name.to_string(), load_model(path)?))
        })
        .collect::<deblock::Result<Vec<_>>>()?;
    let clean = load_image_dir(&a.clean)?;
    let sets = a
        .qualities
        .iter()
        .map(|&q| Ok((q, synthesize_pairs(&clean, &[q])?)))
        .collect::<deblock::Result<Vec<_>>>()?;
    let matrix = run_quality_generalization(&models, &sets)?;
    write_text(a.output.as_deref(), &matrix.to_csv())
}

fn dataset_size(a: &DatasetSizeArgs) -> deblock::Result<()> {
    let config = a.flags.resolve();
    echo_config("dataset-size", &(&config, a));
    let pool = synthesize_pairs(&load_image_dir(&a.train_dir)?, &config.qualities)?;
    let test = synthesize_pairs(&load_image_dir(&a.test_dir)?, &config.qualities)?;
    let rows = run_dataset_size_study(&a.sizes, &config, &pool, &test)?;
    write_text(a.output.as_deref(), &size_results_csv(&rows))
}

fn export_filters(a: &ExportFiltersArgs) -> deblock::Result<()> {
    echo_config("export-filters", a);
    let net = load_model(&a.model)?;
    save_gray(&export_first_layer_filters(&net)?, &a.output)
}

fn run(cli: &Cli) -> deblock::Result<()> {
    let threads = deblock::init_threads_from_env()?;
    log::info!("worker threads: {threads}");
    match &cli.command {
        Command::Degrade(a) => degrade(a),
        Command::Train(a) => train_cmd(a),
        Command::Restore(a) => restore(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Spp(a) => spp(a),
        Command::QualityMatrix(a) => quality_matrix(a),
        Command::DatasetSize(a) => dataset_size(a),
        Command::ExportFilters(a) => export_filters(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
