//! `rpl`: data generation, training, evaluation, prediction, ablations and plots.
//!
//! Every subcommand accepts `--config <file.toml>`; explicit flags override
//! the file. Outputs go under `$RPL_OUTPUT_ROOT` (default `runs`).
//! Exit codes: 0 success, 2 configuration error, 3 invariant violation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rpl_core::checkpoint::{load_rpl, load_segnet, save_rpl, save_segnet, Dtype};
use rpl_core::inference::{predict, SmoothingConfig};
use rpl_core::io::{
    export_prediction, file_sha256, heatmap, histogram_plot, rgb8_to_image, write_dataset, DatasetManifest,
    PredictionMeta,
};
use rpl_core::losses::OutlierObjective;
use rpl_core::metrics::MetricsReport;
use rpl_core::segnet::{build_segnet, pretrain_segnet, ArchConfig, PretrainConfig};
use rpl_core::synthdata::{generate_inlier_dataset, DatasetConfig, Split};
use rpl_core::train::{
    ablation_suite, embed_dim_arms, evaluate, projector_arms, sampling_arms, score_split, table5_arms, train_rpl,
    AblationRow, EvalData, Histogram, TrainConfig,
};

const OUTPUT_ROOT_ENV: &str = "RPL_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "rpl", version, about = "Residual pattern learning for pixel-wise anomaly segmentation")]
struct Cli {
    /// TOML file with optional [dataset], [arch], [pretrain], [train] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for all outputs.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset as PNGs plus manifest.json.
    GenData(GenData),
    /// Pre-train and freeze the closed-set segmentation network.
    TrainSeg(TrainSeg),
    /// Train the residual adapter against a frozen network.
    TrainRpl(TrainRpl),
    /// Evaluate an adapter on the held-out OE split.
    Eval(Eval),
    /// Export class maps and anomaly maps for PNG images.
    Predict(Predict),
    /// Run an ablation suite over shared seeds.
    Ablate(Ablate),
    /// Anomaly heatmaps and inlier/outlier energy histograms.
    Plot(Plot),
}

#[derive(Args, Debug)]
struct GenData {
    /// Dataset directory name under the output root.
    #[arg(long, default_value = "data")]
    name: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    val_count: Option<usize>,
    #[arg(long)]
    objects_per_image: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainSeg {
    /// Dataset directory (written by gen-data).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "segnet")]
    name: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Flags mirroring `TrainConfig`.
#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    head_lr_multiplier: Option<f64>,
    #[arg(long)]
    projector_lr_multiplier: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Global gradient-norm cap; 0 disables.
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `positive-energy` or `hinge-energy`.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    dissimilarity: Option<bool>,
    #[arg(long)]
    corocl: Option<bool>,
    #[arg(long)]
    corocl_weight: Option<f64>,
    #[arg(long)]
    direct: Option<bool>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainRpl {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    segnet: PathBuf,
    #[arg(long, default_value = "rpl")]
    name: String,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    segnet: PathBuf,
    #[arg(long)]
    rpl: PathBuf,
    /// Score the adapter output directly instead of the residual sum.
    #[arg(long)]
    direct: bool,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args, Debug)]
struct Predict {
    #[arg(long)]
    segnet: PathBuf,
    #[arg(long)]
    rpl: PathBuf,
    /// Input PNG images.
    #[arg(required = true)]
    images: Vec<PathBuf>,
    #[arg(long, default_value = "predictions")]
    name: String,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args, Debug)]
struct Ablate {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    segnet: PathBuf,
    /// `table5`, `sampling`, `embed-dim` or `projector`.
    #[arg(long, default_value = "table5")]
    suite: String,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,48,64")]
    dims: Vec<usize>,
    #[arg(long, default_value = "ablation")]
    name: String,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct Plot {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    segnet: PathBuf,
    /// One or more adapters; each gets its own histogram.
    #[arg(long, required = true)]
    rpl: Vec<PathBuf>,
    /// Number of validation composites rendered as heatmaps.
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 40)]
    bins: usize,
    #[arg(long, default_value = "plots")]
    name: String,
}

/// Contents of a `--config` file.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    dataset: DatasetConfig,
    arch: ArchConfig,
    pretrain: PretrainConfig,
    train: TrainConfig,
}

/// Failure classes that map onto exit codes.
#[derive(Debug)]
enum Failure {
    Config(String),
    Invariant(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Invariant(m) => write!(f, "invariant violated: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Failure::Config(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Config(_) => 2,
                Failure::Invariant(_) => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<rpl_core::Error>() {
            return match e {
                rpl_core::Error::Config(_) => 2,
                rpl_core::Error::Invariant(_) => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn apply_smoothing(s: &mut SmoothingConfig, kernel_size: Option<usize>, sigma: Option<f64>) {
    set(&mut s.kernel_size, kernel_size);
    set(&mut s.sigma, sigma);
}

fn apply_train_flags(cfg: &mut TrainConfig, f: &TrainFlags) -> Result<()> {
    set(&mut cfg.lr, f.lr);
    set(&mut cfg.head_lr_multiplier, f.head_lr_multiplier);
    set(&mut cfg.projector_lr_multiplier, f.projector_lr_multiplier);
    set(&mut cfg.momentum, f.momentum);
    set(&mut cfg.grad_clip, f.grad_clip);
    set(&mut cfg.steps, f.steps);
    set(&mut cfg.batch_size, f.batch_size);
    set(&mut cfg.seed, f.seed);
    set(&mut cfg.dissimilarity, f.dissimilarity);
    set(&mut cfg.corocl, f.corocl);
    set(&mut cfg.corocl_weight, f.corocl_weight);
    set(&mut cfg.direct, f.direct);
    set(&mut cfg.loss.alpha, f.alpha);
    set(&mut cfg.sampling.budget, f.budget);
    if f.embed_dim.is_some() {
        cfg.rpl.embed_dim = f.embed_dim;
    }
    apply_smoothing(&mut cfg.smoothing, f.kernel_size, f.sigma);
    if let Some(o) = &f.objective {
        cfg.objective = match o.as_str() {
            "positive-energy" => OutlierObjective::PositiveEnergy,
            "hinge-energy" => OutlierObjective::HingeEnergy,
            other => return Err(config_error(format!("unknown objective {other:?}"))),
        };
    }
    cfg.validate()?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    DatasetManifest::read(dir).with_context(|| format!("reading dataset manifest in {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn print_metrics(label: &str, m: &MetricsReport) {
    println!("{:<16}{}", "", MetricsReport::table_header());
    println!("{label:<16}{}", m.table_row());
}

fn run(cli: Cli) -> Result<()> {
    let file = load_file_config(cli.config.as_deref())?;
    let root = cli.output_root;
    match cli.command {
        Command::GenData(a) => {
            let mut cfg = file.dataset;
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.train_count, a.train_count);
            set(&mut cfg.val_count, a.val_count);
            set(&mut cfg.objects_per_image, a.objects_per_image);
            cfg.validate()?;
            let dir = root.join(&a.name);
            let m = write_dataset(&dir, &cfg)?;
            println!("wrote {} samples to {}", m.samples.len(), dir.display());
        }
        Command::TrainSeg(a) => {
            let manifest = read_manifest(&a.data)?;
            let mut pcfg = file.pretrain;
            set(&mut pcfg.steps, a.steps);
            set(&mut pcfg.lr, a.lr);
            set(&mut pcfg.seed, a.seed);
            pcfg.crop_size = manifest.config.crop_size;
            let arch = ArchConfig { num_classes: manifest.config.num_classes, ..file.arch };
            let train = generate_inlier_dataset(&manifest.config, Split::Train)?;
            let out = pretrain_segnet(build_segnet(&arch)?, &train, &pcfg)?;
            let dir = root.join(&a.name);
            fs::create_dir_all(&dir)?;
            let log: String = out
                .losses
                .iter()
                .enumerate()
                .map(|(step, l)| serde_json::json!({ "step": step, "ce": l }).to_string() + "\n")
                .collect();
            fs::write(dir.join("train_log.jsonl"), log)?;
            save_segnet(&dir.join("segnet.rplt"), &out.model, Dtype::F64)?;
            let miou = rpl_core::train::closed_set_miou(&out.model, &rpl_core::synthdata::validation_inliers(&manifest.config)?)?;
            println!("closed-set mIoU {:.2}  checksum {}", 100.0 * miou, out.model.checksum());
            println!("saved {}", dir.join("segnet.rplt").display());
        }
        Command::TrainRpl(a) => {
            let manifest = read_manifest(&a.data)?;
            let mut cfg = file.train;
            apply_train_flags(&mut cfg, &a.train)?;
            let seg = load_segnet(&a.segnet)?;
            let dir = root.join(&a.name);
            fs::create_dir_all(&dir)?;
            let every = (cfg.steps / 20).max(1);
            let (mut record, rpl) = train_rpl(&seg, &manifest.config, &cfg, &mut |r: &rpl_core::losses::LossReport| {
                if r.step % every == 0 {
                    eprintln!("step {:>5} lr {:.5} l_rpl {:.4} l_corocl {:.4}", r.step, r.lr, r.l_rpl, r.l_corocl);
                }
            })?;
            fs::write(dir.join("train_log.jsonl"), record.loss_log())?;
            save_rpl(&dir.join("rpl.rplt"), &rpl, &seg, Dtype::F64)?;
            let eval = evaluate(&seg, &rpl, &EvalData::new(&manifest.config)?, &cfg.smoothing, cfg.direct)?;
            print_metrics(&a.name, &eval.metrics);
            record.eval = Some(eval);
            write_json(&dir.join("run_record.json"), &record)?;
            println!("saved {}", dir.display());
        }
        Command::Eval(a) => {
            let manifest = read_manifest(&a.data)?;
            let mut smoothing = file.train.smoothing;
            apply_smoothing(&mut smoothing, a.kernel_size, a.sigma);
            let seg = load_segnet(&a.segnet)?;
            let (rpl, trained_against) = load_rpl(&a.rpl, false)?;
            check_pairing(&seg, trained_against.as_deref())?;
            let eval = evaluate(&seg, &rpl, &EvalData::new(&manifest.config)?, &smoothing, a.direct)?;
            print_metrics("rpl", &eval.metrics);
            let dir = root.join("eval");
            fs::create_dir_all(&dir)?;
            write_json(&dir.join("metrics.json"), &eval)?;
        }
        Command::Predict(a) => {
            let mut smoothing = file.train.smoothing;
            apply_smoothing(&mut smoothing, a.kernel_size, a.sigma);
            let seg = load_segnet(&a.segnet)?;
            let (rpl, trained_against) = load_rpl(&a.rpl, false)?;
            check_pairing(&seg, trained_against.as_deref())?;
            let dir = root.join(&a.name);
            let (seg_sha, rpl_sha) = (file_sha256(&a.segnet)?, file_sha256(&a.rpl)?);
            for path in &a.images {
                let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.into_rgb8();
                let tensor = rgb8_to_image(&img).to_tensor();
                let pred = predict(&seg, &rpl, &tensor, &smoothing)?.remove(0);
                let s = &pred.scores.smoothed;
                let meta = PredictionMeta {
                    source: path.display().to_string(),
                    height: pred.scores.h,
                    width: pred.scores.w,
                    smoothing,
                    segnet_checksum: seg.checksum(),
                    segnet_file_sha256: seg_sha.clone(),
                    rpl_file_sha256: rpl_sha.clone(),
                    score_min: s.iter().copied().fold(f64::INFINITY, f64::min),
                    score_max: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                };
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                let files = export_prediction(&dir, stem, &pred, &meta)?;
                println!("{} -> {}", path.display(), files.meta.display());
            }
        }
        Command::Ablate(a) => {
            let manifest = read_manifest(&a.data)?;
            let mut base = file.train;
            apply_train_flags(&mut base, &a.train)?;
            let arms = match a.suite.as_str() {
                "table5" => table5_arms(&base),
                "sampling" => sampling_arms(&base),
                "embed-dim" => embed_dim_arms(&base, &a.dims),
                "projector" => projector_arms(&base),
                other => return Err(config_error(format!("unknown suite {other:?}"))),
            };
            if a.seeds.is_empty() {
                bail!(config_error("at least one seed is required"));
            }
            let seg = load_segnet(&a.segnet)?;
            let data = EvalData::new(&manifest.config)?;
            let table = ablation_suite(&seg, &manifest.config, &data, &arms, &a.seeds, &mut |r: &AblationRow| {
                match (&r.eval, &r.error) {
                    (Some(e), _) => eprintln!("{:<24} seed {:<3} {}", r.arm, r.seed, e.metrics.table_row()),
                    (_, Some(err)) => eprintln!("{:<24} seed {:<3} failed: {err}", r.arm, r.seed),
                    _ => {}
                }
            });
            println!("{}", table.render());
            let dir = root.join(&a.name);
            fs::create_dir_all(&dir)?;
            write_json(&dir.join(format!("{}.json", a.suite)), &table)?;
        }
        Command::Plot(a) => {
            let manifest = read_manifest(&a.data)?;
            let seg = load_segnet(&a.segnet)?;
            let data = EvalData::new(&manifest.config)?;
            let smoothing = file.train.smoothing;
            let dir = root.join(&a.name);
            fs::create_dir_all(&dir)?;
            for path in &a.rpl {
                let (rpl, trained_against) = load_rpl(path, false)?;
                check_pairing(&seg, trained_against.as_deref())?;
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("rpl").to_string();
                let (raw, _) = score_split(&seg, &rpl, &data.oe, &smoothing, false)?;
                histogram_plot(&Histogram::auto(&raw, a.bins), 480, 240).save(dir.join(format!("{stem}_hist.png")))?;
                write_json(&dir.join(format!("{stem}_hist.json")), &Histogram::auto(&raw, a.bins))?;
                for (i, s) in data.oe.iter().take(a.count).enumerate() {
                    let pred = predict(&seg, &rpl, &s.image.to_tensor(), &smoothing)?.remove(0);
                    heatmap(&pred.scores.smoothed, pred.scores.h, pred.scores.w)
                        .save(dir.join(format!("{stem}_heatmap_{i:02}.png")))?;
                    rpl_core::io::image_to_rgb8(&s.image).save(dir.join(format!("input_{i:02}.png")))?;
                }
            }
            println!("wrote plots to {}", dir.display());
        }
    }
    Ok(())
}

/// An adapter is only meaningful against the frozen model it was trained with.
fn check_pairing(seg: &rpl_core::segnet::SegNet, trained_against: Option<&str>) -> Result<()> {
    match trained_against {
        Some(c) if c != seg.checksum() => Err(Failure::Invariant(format!(
            "adapter was trained against frozen model {c}, loaded model is {}",
            seg.checksum()
        ))
        .into()),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
