//! Command-line entry point wiring the two-stage workflow: adversarial
//! training and inference for mass segmentation, then shape
//! classification and subtype cross-tabulation of the resulting masks.
//!
//! Every subcommand takes an `--out` directory, writes its artifacts
//! there together with a `run.cfg` echo of the fully resolved
//! configuration, and produces byte-identical outputs when re-run with
//! identical flags. Exit codes: 0 success, 2 argument or input error,
//! 3 numeric failure during training or inference.

use cganseg::checkpoint::{read_weights, save_weights};
use cganseg::data::{load_dataset, preprocess, split, SplitSpec, StratifyBy};
use cganseg::error::Error;
use cganseg::losses::LossConfig;
use cganseg::metrics::{confusion, evaluate_set, metrics, SegMetrics};
use cganseg::morpho::morpho_clean;
use cganseg::nets::Variant;
use cganseg::pgm::{read_pgm, write_pgm8};
use cganseg::shape_analysis::{
    classify_shapes, ContingencyTable, ShapeLabel, Subtype,
};
use cganseg::synth::{synth_generate, write_dataset};
use cganseg::trainer::{
    evaluate_generator, fit_shape_classifier, segment, train_cgan,
    train_shape_cnn, ShapeCnnConfig, TrainConfig,
};
use cganseg::Tensor;
use clap::{Parser, Subcommand, ValueEnum};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser)]
#[command(
    name = "cganseg",
    version,
    about = "Adversarial mass segmentation and shape analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset of mass-like shapes.
    Synth(SynthArgs),
    /// Train the segmentation generator/discriminator pair.
    TrainSeg(TrainSegArgs),
    /// Segment one image with trained generator weights.
    Segment(SegmentArgs),
    /// Score predicted masks against ground-truth masks.
    Eval(EvalArgs),
    /// Cross-validate and fit the shape classifier.
    TrainShape(TrainShapeArgs),
    /// Predict shape classes for the masks listed in a manifest.
    Classify(ClassifyArgs),
    /// Cross-tabulate shape classes against molecular subtypes.
    Analyze(AnalyzeArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Number of image/mask pairs to generate.
    #[arg(long)]
    count: usize,
    /// Seed for all synthesis randomness.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Square image resolution in pixels.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Output directory (images, masks, manifest.csv).
    #[arg(long)]
    out: PathBuf,
}

/// Generator architecture selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    /// Encoder-decoder with skip connections.
    Unet,
    /// Plain encoder-decoder without skip connections.
    Autoenc,
}

impl VariantArg {
    fn variant(self) -> Variant {
        match self {
            VariantArg::Unet => Variant::GenUnet,
            VariantArg::Autoenc => Variant::GenAutoEnc,
        }
    }
    fn name(self) -> &'static str {
        match self {
            VariantArg::Unet => "unet",
            VariantArg::Autoenc => "autoenc",
        }
    }
}

/// Which label column drives stratified splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StratifyArg {
    None,
    Shape,
    Subtype,
}

impl StratifyArg {
    fn stratify_by(self) -> Option<StratifyBy> {
        match self {
            StratifyArg::None => None,
            StratifyArg::Shape => Some(StratifyBy::Shape),
            StratifyArg::Subtype => Some(StratifyBy::Subtype),
        }
    }
    fn name(self) -> &'static str {
        match self {
            StratifyArg::None => "none",
            StratifyArg::Shape => "shape",
            StratifyArg::Subtype => "subtype",
        }
    }
}

#[derive(clap::Args)]
struct TrainSegArgs {
    /// Dataset manifest CSV (id,image,mask,shape,subtype).
    #[arg(long)]
    manifest: PathBuf,
    /// Generator architecture.
    #[arg(long, value_enum, default_value_t = VariantArg::Unet)]
    variant: VariantArg,
    /// Training epochs.
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Samples per optimization step.
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Adam learning rate for both networks.
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    /// Adam first-moment decay.
    #[arg(long, default_value_t = 0.5)]
    beta1: f64,
    /// Adam second-moment decay.
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    /// Weight of the L1 reconstruction term in the generator loss.
    #[arg(long, default_value_t = 100.0)]
    lambda: f64,
    /// Square working resolution; inputs are resized to it.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Encoder/decoder stages per network.
    #[arg(long, default_value_t = 4)]
    depth: usize,
    /// Channels after the first encoder stage.
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    /// Seed for weight init, batch order and dropout.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Write epoch checkpoints every N epochs (0 = finals only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Fraction of samples assigned to the training split.
    #[arg(long, default_value_t = 0.7)]
    train_frac: f64,
    /// Fraction assigned to the validation split.
    #[arg(long, default_value_t = 0.15)]
    val_frac: f64,
    /// Fraction assigned to the held-out test split.
    #[arg(long, default_value_t = 0.15)]
    test_frac: f64,
    /// Stratify the split by this label column.
    #[arg(long, value_enum, default_value_t = StratifyArg::None)]
    stratify: StratifyArg,
    /// Output directory (checkpoints, report.csv, split.csv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct SegmentArgs {
    /// Generator checkpoint produced by train-seg.
    #[arg(long)]
    weights: PathBuf,
    /// Input image (PGM); resized to the checkpoint's resolution.
    #[arg(long)]
    image: PathBuf,
    /// Probability threshold for mask binarization.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Structuring-element radius for morphological opening
    /// (0 skips cleaning).
    #[arg(long, default_value_t = 1)]
    clean_radius: usize,
    /// Output directory (mask.pgm).
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Directory of predicted masks (*.pgm).
    #[arg(long)]
    pred_dir: PathBuf,
    /// Directory of ground-truth masks with matching filenames.
    #[arg(long)]
    truth_dir: PathBuf,
    /// Output directory (metrics.csv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainShapeArgs {
    /// Dataset manifest CSV; every row needs a shape label.
    #[arg(long)]
    manifest: PathBuf,
    /// Number of stratified cross-validation folds.
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Training epochs per fold.
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Samples per optimization step.
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Square working resolution; masks are resized to it.
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Channels after the first convolution.
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    /// Seed for fold assignment and weight init.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory (cv_report.csv, confusion.csv, checkpoints).
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ClassifyArgs {
    /// Shape-classifier checkpoint produced by train-shape.
    #[arg(long)]
    weights: PathBuf,
    /// Manifest listing the masks to classify.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory (predictions.csv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    /// Labels CSV with header id,shape,subtype.
    #[arg(long)]
    labels: PathBuf,
    /// Output directory (contingency.csv, contingency.txt).
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => run_synth(args),
        Command::TrainSeg(args) => run_train_seg(args),
        Command::Segment(args) => run_segment(args),
        Command::Eval(args) => run_eval(args),
        Command::TrainShape(args) => run_train_shape(args),
        Command::Classify(args) => run_classify(args),
        Command::Analyze(args) => run_analyze(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        let code = match e {
            Error::Numeric(_) | Error::NonFinite(_) => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}

/// Writes the resolved configuration as sorted `key=value` lines so
/// identical runs leave identical traces (no timestamps, no host info).
fn write_run_cfg(dir: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut lines: Vec<String> = entries
        .iter()
        .map(|(key, value)| format!("{key}={value}"))
        .collect();
    lines.sort();
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(dir.join("run.cfg"), text)?;
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let pairs = synth_generate(args.count, args.seed, args.resolution)?;
    fs::create_dir_all(&args.out)?;
    write_run_cfg(
        &args.out,
        &[
            ("command", "synth".into()),
            ("count", args.count.to_string()),
            ("seed", args.seed.to_string()),
            ("resolution", args.resolution.to_string()),
            ("out", args.out.display().to_string()),
        ],
    )?;
    let manifest = write_dataset(&args.out, &pairs)?;
    println!(
        "wrote {} sample pairs and {}",
        pairs.len(),
        manifest.display()
    );
    Ok(())
}

fn metrics_cells(m: &SegMetrics) -> String {
    format!(
        "{},{},{},{},{}",
        m.accuracy, m.dice, m.jaccard, m.sensitivity, m.specificity
    )
}

fn run_train_seg(args: &TrainSegArgs) -> Result<()> {
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        beta1: args.beta1,
        beta2: args.beta2,
        loss: LossConfig {
            lambda_l1: args.lambda,
            ..LossConfig::default()
        },
        seed: args.seed,
        variant: args.variant.variant(),
        resolution: args.resolution,
        depth: args.depth,
        base_channels: args.base_channels,
        checkpoint_every: args.checkpoint_every,
    };
    cfg.validate()?;
    let samples = load_dataset(&args.manifest, args.resolution)?;
    let split_spec = SplitSpec {
        train: args.train_frac,
        val: args.val_frac,
        test: args.test_frac,
        seed: args.seed,
        stratify_by: args.stratify.stratify_by(),
    };
    let (train, val, test) = split(samples, &split_spec)?;

    fs::create_dir_all(&args.out)?;
    write_run_cfg(
        &args.out,
        &[
            ("command", "train-seg".into()),
            ("manifest", args.manifest.display().to_string()),
            ("variant", args.variant.name().into()),
            ("epochs", cfg.epochs.to_string()),
            ("batch_size", cfg.batch_size.to_string()),
            ("lr", cfg.lr.to_string()),
            ("beta1", cfg.beta1.to_string()),
            ("beta2", cfg.beta2.to_string()),
            ("lambda", cfg.loss.lambda_l1.to_string()),
            ("epsilon_log", cfg.loss.epsilon_log.to_string()),
            ("resolution", cfg.resolution.to_string()),
            ("depth", cfg.depth.to_string()),
            ("base_channels", cfg.base_channels.to_string()),
            ("seed", cfg.seed.to_string()),
            ("checkpoint_every", cfg.checkpoint_every.to_string()),
            ("train_frac", split_spec.train.to_string()),
            ("val_frac", split_spec.val.to_string()),
            ("test_frac", split_spec.test.to_string()),
            ("stratify", args.stratify.name().into()),
            ("out", args.out.display().to_string()),
        ],
    )?;

    let mut split_csv = String::from("id,split\n");
    for (bucket, name) in [(&train, "train"), (&val, "val"), (&test, "test")] {
        for sample in bucket.iter() {
            writeln!(split_csv, "{},{name}", sample.id).expect("string write");
        }
    }
    fs::write(args.out.join("split.csv"), split_csv)?;

    let outcome = train_cgan(&train, &val, &cfg, Some(&args.out))?;
    fs::write(args.out.join("report.csv"), outcome.report.to_csv())?;
    if !test.is_empty() {
        let m = evaluate_generator(&outcome.best_generator, &test)?;
        let csv = format!(
            "subset,accuracy,dice,jaccard,sensitivity,specificity\ntest,{}\n",
            metrics_cells(&m)
        );
        fs::write(args.out.join("test_metrics.csv"), csv)?;
    }

    let last = outcome.report.epochs.last().expect("epochs >= 1");
    match (last.val_dice, outcome.best_epoch) {
        (Some(dice), Some(best)) => println!(
            "trained {} epochs: g_loss {:.4}, d_loss {:.4}, val dice {:.4} \
             (best epoch {best})",
            last.epoch, last.g_loss, last.d_loss, dice
        ),
        _ => println!(
            "trained {} epochs: g_loss {:.4}, d_loss {:.4}",
            last.epoch, last.g_loss, last.d_loss
        ),
    }
    Ok(())
}

fn run_segment(args: &SegmentArgs) -> Result<()> {
    let weights = read_weights(&args.weights)?;
    let resolution = weights.spec().input_resolution;
    let raw = read_pgm(&args.image)?;
    let image = preprocess(&raw, resolution)?;
    let mask = segment(&weights, &image, args.threshold)?;
    let mask = if args.clean_radius > 0 {
        morpho_clean(&mask, args.clean_radius)?
    } else {
        mask
    };

    fs::create_dir_all(&args.out)?;
    write_run_cfg(
        &args.out,
        &[
            ("command", "segment".into()),
            ("weights", args.weights.display().to_string()),
            ("image", args.image.display().to_string()),
            ("threshold", args.threshold.to_string()),
            ("clean_radius", args.clean_radius.to_string()),
            ("resolution", resolution.to_string()),
            ("out", args.out.display().to_string()),
        ],
    )?;
    let bytes: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| if v >= 0.5 { 255 } else { 0 })
        .collect();
    let path = args.out.join("mask.pgm");
    write_pgm8(&path, resolution, resolution, &bytes)?;
    println!(
        "wrote {} ({} foreground pixels)",
        path.display(),
        bytes.iter().filter(|&&b| b > 0).count()
    );
    Ok(())
}

/// Reads a mask PGM at its native size, thresholding at half maxval.
fn read_mask_tensor(path: &Path) -> Result<Tensor> {
    let raw = read_pgm(path)?;
    let max = raw.maxval as f64;
    let data: Vec<f64> = raw
        .pixels
        .iter()
        .map(|&p| if p as f64 / max >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(&[1, raw.height, raw.width], data)
}

fn pgm_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.insert(name.to_string());
            }
        }
    }
    Ok(names)
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let pred_names = pgm_names(&args.pred_dir)?;
    let truth_names = pgm_names(&args.truth_dir)?;
    let pred_only: Vec<&String> = pred_names.difference(&truth_names).collect();
    let truth_only: Vec<&String> = truth_names.difference(&pred_names).collect();
    if !pred_only.is_empty() || !truth_only.is_empty() {
        let mut msg = String::from("mask filenames do not match:");
        if !pred_only.is_empty() {
            write!(
                msg,
                " only in {}: {:?};",
                args.pred_dir.display(),
                pred_only
            )
            .expect("string write");
        }
        if !truth_only.is_empty() {
            write!(
                msg,
                " only in {}: {:?};",
                args.truth_dir.display(),
                truth_only
            )
            .expect("string write");
        }
        return Err(Error::InvalidArgument(msg));
    }
    if pred_names.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .pgm masks found in {}",
            args.pred_dir.display()
        )));
    }

    let mut preds = Vec::with_capacity(pred_names.len());
    let mut truths = Vec::with_capacity(pred_names.len());
    let mut csv = String::from(
        "name,accuracy,dice,jaccard,sensitivity,specificity\n",
    );
    for name in &pred_names {
        let pred = read_mask_tensor(&args.pred_dir.join(name))?;
        let truth = read_mask_tensor(&args.truth_dir.join(name))?;
        let m = metrics(&confusion(&pred, &truth).map_err(|e| {
            Error::ShapeMismatch(format!("{name}: {e}"))
        })?)?;
        writeln!(csv, "{name},{}", metrics_cells(&m)).expect("string write");
        preds.push(pred);
        truths.push(truth);
    }
    let pooled = evaluate_set(&preds, &truths)?;
    writeln!(csv, "pooled,{}", metrics_cells(&pooled)).expect("string write");

    fs::create_dir_all(&args.out)?;
    write_run_cfg(
        &args.out,
        &[
            ("command", "eval".into()),
            ("pred_dir", args.pred_dir.display().to_string()),
            ("truth_dir", args.truth_dir.display().to_string()),
            ("out", args.out.display().to_string()),
        ],
    )?;
    fs::write(args.out.join("metrics.csv"), csv)?;
    println!(
        "evaluated {} masks: pooled dice {:.4}, jaccard {:.4}",
        preds.len(),
        pooled.dice,
        pooled.jaccard
    );
    Ok(())
}

fn run_train_shape(args: &TrainShapeArgs) -> Result<()> {
    let cfg = ShapeCnnConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        seed: args.seed,
        resolution: args.resolution,
        base_channels: args.base_channels,
        ..ShapeCnnConfig::default()
    };
    cfg.validate()?;
    let samples = load_dataset(&args.manifest, args.resolution)?;

    fs::create_dir_all(&args.out)?;
    write_run_cfg(
        &args.out,
        &[
            ("command", "train-shape".into()),
            ("manifest", args.manifest.display().to_string()),
            ("folds", args.folds.to_string()),
            ("epochs", cfg.epochs.to_string()),
            ("batch_size", cfg.batch_size.to_string()),
            ("lr", cfg.lr.to_string()),
            ("beta1", cfg.beta1.to_string()),
            ("beta2", cfg.beta2.to_string()),
            ("resolution", cfg.resolution.to_string()),
            ("base_channels", cfg.base_channels.to_string()),
            ("seed", cfg.seed.to_string()),
            ("out", args.out.display().to_string()),
        ],
    )?;

    let (fold_weights, report) = train_shape_cnn(&samples, args.folds, &cfg)?;
    for (fold, weights) in fold_weights.iter().enumerate() {
        save_weights(
            weights,
            &args.out.join(format!("shape_fold_{fold:02}.ckpt")),
        )?;
    }
    let final_weights = fit_shape_classifier(&samples, &cfg)?;
    save_weights(&final_weights, &args.out.join("shape_final.ckpt"))?;
    fs::write(args.out.join("cv_report.csv"), report.to_csv())?;
    fs::write(args.out.join("confusion.csv"), report.confusion_csv())?;
    println!(
        "cross-validated {} folds: mean accuracy {:.4}, pooled accuracy {:.4}",
        args.folds, report.mean_accuracy, report.pooled_accuracy
    );
    Ok(())
}

fn run_classify(args: &ClassifyArgs) -> Result<()> {
    let weights = read_weights(&args.weights)?;
    let resolution = weights.spec().input_resolution;
    let samples = load_dataset(&args.manifest, resolution)?;
    let masks: Vec<Tensor> = samples.iter().map(|s| s.mask.clone()).collect();
    let predicted = classify_shapes(&weights, &masks)?;

    let mut rows: Vec<(String, ShapeLabel)> = samples
        .iter()
        .map(|s| s.id.clone())
        .zip(predicted)
        .collect();
    rows.sort();
    let mut csv = String::from("id,shape\n");
    for (id, label) in &rows {
        writeln!(csv, "{id},{label}").expect("string write");
    }

    fs::create_dir_all(&args.out)?;
    write_run_cfg(
        &args.out,
        &[
            ("command", "classify".into()),
            ("weights", args.weights.display().to_string()),
            ("manifest", args.manifest.display().to_string()),
            ("resolution", resolution.to_string()),
            ("out", args.out.display().to_string()),
        ],
    )?;
    fs::write(args.out.join("predictions.csv"), csv)?;
    println!("classified {} masks", rows.len());
    Ok(())
}

/// Reads an `id,shape,subtype` CSV into (subtype, shape) pairs.
fn read_label_pairs(path: &Path) -> Result<Vec<(Subtype, ShapeLabel)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let expected = ["id", "shape", "subtype"];
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Format(format!(
            "{}: expected header {:?}, got {:?}",
            path.display(),
            expected.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut pairs = Vec::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let line = record
            .position()
            .map(|p| p.line().to_string())
            .unwrap_or_else(|| "?".into());
        let shape = ShapeLabel::from_str(&record[1]).map_err(|e| {
            Error::Format(format!("{} line {line}: {e}", path.display()))
        })?;
        let subtype = Subtype::from_str(&record[2]).map_err(|e| {
            Error::Format(format!("{} line {line}: {e}", path.display()))
        })?;
        pairs.push((subtype, shape));
    }
    Ok(pairs)
}

fn run_analyze(args: &AnalyzeArgs) -> Result<()> {
    let pairs = read_label_pairs(&args.labels)?;
    let table = ContingencyTable::from_pairs(&pairs)?;

    fs::create_dir_all(&args.out)?;
    write_run_cfg(
        &args.out,
        &[
            ("command", "analyze".into()),
            ("labels", args.labels.display().to_string()),
            ("out", args.out.display().to_string()),
        ],
    )?;
    fs::write(args.out.join("contingency.csv"), table.to_csv())?;
    fs::write(args.out.join("contingency.txt"), table.to_text())?;
    println!("tabulated {} labeled masses", table.grand_total());
    Ok(())
}
