//! `lobekit` command-line interface.
//!
//! Subcommands: `phantom-gen`, `preprocess`, `train`, `infer`, `evaluate`,
//! `ablate`. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
//! failure. Logs are one JSON object per line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lobekit::config::{ablate, preprocess_pair, AblationMode, RunConfig};
use lobekit::error::Error;
use lobekit::metaimage::{read_metaimage, write_labels, write_volume};
use lobekit::metrics::dice_average;
use lobekit::model::LobeNet;
use lobekit::phantom::{load_pairs, write_phantom_set, PhantomConfig};
use lobekit::preprocess::lung_crop_pipeline;
use lobekit::trainer::{infer, train, write_history_csv};
use lobekit::volume::{hu_normalize, ElementType, LabelMask, Volume};

#[derive(Parser)]
#[command(name = "lobekit", version, about = "Pulmonary lobe segmentation toolkit")]
struct Cli {
    /// Override every seed (network init, shuffle, augmentation, phantoms).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run-config JSON file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Threads for the data-parallel kernels (1 forces sequential).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic five-lobe phantoms with ground-truth labels.
    PhantomGen(PhantomGenArgs),
    /// Crop a CT volume to the dilated convex hull of the lungs.
    Preprocess(PreprocessArgs),
    /// Train the segmentation network on (image, labels) pairs.
    Train(TrainArgs),
    /// Predict a lobe mask for a volume using a checkpoint.
    Infer(InferArgs),
    /// Score a predicted mask against ground truth.
    Evaluate(EvaluateArgs),
    /// Train and compare the DL / DL+FL / DL+FL+CH arms on one split.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct PhantomGenArgs {
    /// Number of phantoms.
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Volume dims as z y x (all even).
    #[arg(long, num_args = 3, value_names = ["Z", "Y", "X"], default_values_t = [32, 64, 64])]
    dims: Vec<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input scan (.mhd, raw HU).
    #[arg(long = "in")]
    input: PathBuf,
    /// Cropped, normalized output volume (.mhd).
    #[arg(long)]
    out: PathBuf,
    /// Optional dilated hull mask output (.mhd).
    #[arg(long)]
    hull: Option<PathBuf>,
    /// Optional crop-region JSON output.
    #[arg(long)]
    region: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of image/label pairs (manifest.json or *_image.mhd naming).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Loss-history CSV path (defaults next to the checkpoint).
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Input volume (.mhd); MET_SHORT inputs are HU-normalized first.
    #[arg(long = "in")]
    input: PathBuf,
    /// Predicted label mask output (.mhd).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted label mask (.mhd).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth label mask (.mhd).
    #[arg(long)]
    gt: PathBuf,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Directory of image/label pairs.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the report.
    #[arg(long)]
    out: PathBuf,
}

fn log_json(level: &str, msg: &str, fields: serde_json::Value) {
    let mut obj = serde_json::json!({ "level": level, "msg": msg });
    if let (Some(map), Some(extra)) = (obj.as_object_mut(), fields.as_object()) {
        for (k, v) in extra {
            map.insert(k.clone(), v.clone());
        }
    }
    eprintln!("{obj}");
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::Json(_) => 2,
        Error::NonFiniteLoss { .. }
        | Error::NotScalar(_)
        | Error::DetachedGraph
        | Error::MissingGradient(_)
        | Error::ShapeMismatch(_)
        | Error::OddSpatialDim(_) => 4,
        _ => 3,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.network.seed = seed;
        cfg.train.seed = seed;
        if let Some(aug) = cfg.train.augment.as_mut() {
            aug.seed = seed;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Mode the `train`/`ablate` preprocessing follows: an explicit ablation
/// mode wins; otherwise the full pipeline with the configured loss.
fn hull_crop_enabled(cfg: &RunConfig) -> bool {
    cfg.mode.is_none_or(AblationMode::hull_crop)
}

fn read_volume(path: &Path) -> Result<Volume, Error> {
    read_metaimage(path)?.into_volume()
}

fn read_labels(path: &Path) -> Result<LabelMask, Error> {
    read_metaimage(path)?.into_labels()
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Some(threads) = cli.threads {
        lobekit::exec::configure_threads(threads);
    }
    match &cli.command {
        Command::PhantomGen(args) => {
            if args.dims.len() != 3 {
                return Err(Error::InvalidConfig("--dims takes exactly z y x".into()));
            }
            let cfg = PhantomConfig {
                dims: [args.dims[0], args.dims[1], args.dims[2]],
                seed: cli.seed.unwrap_or(0),
                ..PhantomConfig::default()
            };
            let manifest = write_phantom_set(&args.out, args.n, &cfg)?;
            log_json(
                "info",
                "phantom set written",
                serde_json::json!({
                    "n": manifest.entries.len(),
                    "dims": manifest.dims,
                    "seed": manifest.base_seed,
                    "dir": args.out.display().to_string(),
                }),
            );
        }
        Command::Preprocess(args) => {
            let cfg = load_config(cli)?;
            let scan = read_volume(&args.input)?;
            let crop = lung_crop_pipeline(&scan, &cfg.preprocess)?;
            write_volume(&crop.volume, &args.out)?;
            if let Some(hull_path) = &args.hull {
                let hull_labels = LabelMask::new(
                    crop.hull.dims,
                    scan.spacing,
                    scan.origin,
                    crop.hull.data.iter().map(|v| *v as u8).collect(),
                )?;
                write_labels(&hull_labels, hull_path)?;
            }
            if let Some(region_path) = &args.region {
                let region = serde_json::json!({
                    "lo": crop.region.lo,
                    "hi": crop.region.hi,
                    "spacing": scan.spacing,
                });
                std::fs::write(region_path, serde_json::to_vec_pretty(&region)?)?;
            }
            log_json(
                "info",
                "preprocess complete",
                serde_json::json!({
                    "in_dims": scan.dims,
                    "out_dims": crop.volume.dims,
                    "lo": crop.region.lo,
                    "hi": crop.region.hi,
                }),
            );
        }
        Command::Train(args) => {
            let cfg = load_config(cli)?;
            let cfg = match cfg.mode {
                Some(mode) => cfg.resolved_for(mode),
                None => cfg,
            };
            let raw = load_pairs(&args.data)?;
            let hull = hull_crop_enabled(&cfg);
            let mut dataset = Vec::with_capacity(raw.len());
            for (v, m) in &raw {
                let (pv, pm, _) = preprocess_pair(v, m, &cfg.preprocess, hull)?;
                dataset.push((pv, pm));
            }
            log_json(
                "info",
                "training",
                serde_json::json!({
                    "samples": dataset.len(),
                    "epochs": cfg.train.epochs,
                    "lambda": cfg.train.loss.lambda,
                    "hull_crop": hull,
                    "seed": cfg.train.seed,
                }),
            );
            let outcome = train(&cfg.network, &cfg.train, &dataset)?;
            outcome.net.save(&args.out)?;
            let history_path = args
                .history
                .clone()
                .unwrap_or_else(|| args.out.with_extension("history.csv"));
            write_history_csv(&history_path, &outcome.history)?;
            log_json(
                "info",
                "training complete",
                serde_json::json!({
                    "ckpt": args.out.display().to_string(),
                    "final_loss": outcome.history.last().map(|h| h.mean_loss),
                    "history": history_path.display().to_string(),
                }),
            );
        }
        Command::Infer(args) => {
            let mut net = LobeNet::<f32>::load(&args.ckpt)?;
            let scan = read_volume(&args.input)?;
            let normalized = match scan.element_type {
                ElementType::Short => hu_normalize(&scan),
                _ => scan,
            };
            let mask = infer(&mut net, &normalized)?;
            write_labels(&mask, &args.out)?;
            log_json(
                "info",
                "inference complete",
                serde_json::json!({
                    "dims": mask.dims,
                    "out": args.out.display().to_string(),
                }),
            );
        }
        Command::Evaluate(args) => {
            let pred = read_labels(&args.pred)?;
            let gt = read_labels(&args.gt)?;
            let report = dice_average(&pred, &gt)?;
            print!("{}", report.render_table());
            if let Some(out) = &args.out {
                std::fs::write(out, serde_json::to_vec_pretty(&report)?)?;
            }
            log_json(
                "info",
                "evaluation complete",
                serde_json::json!({ "average": report.average }),
            );
        }
        Command::Ablate(args) => {
            let cfg = load_config(cli)?;
            let data = load_pairs(&args.data)?;
            log_json(
                "info",
                "ablation starting",
                serde_json::json!({ "samples": data.len(), "epochs": cfg.train.epochs }),
            );
            let report = ablate(&data, &cfg)?;
            std::fs::create_dir_all(&args.out)?;
            std::fs::write(
                args.out.join("ablation_report.json"),
                serde_json::to_vec_pretty(&report)?,
            )?;
            let table = report.render_table();
            std::fs::write(args.out.join("ablation_table.txt"), &table)?;
            print!("{table}");
            for arm in &report.arms {
                log_json(
                    "info",
                    "arm complete",
                    serde_json::json!({
                        "mode": arm.mode.label(),
                        "lambda": arm.lambda,
                        "hull_crop": arm.hull_crop,
                        "average": arm.average,
                        "order_digest": arm.order_digest,
                    }),
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code_for(&err);
            log_json(
                "error",
                &err.to_string(),
                serde_json::json!({ "exit_code": code }),
            );
            ExitCode::from(code)
        }
    }
}
