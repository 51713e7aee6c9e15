//! Command-line surface: split generation, training, evaluation,
//! classification, feature visualization, gradient checking, forward-pass
//! benchmarking, and synthetic-corpus generation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
//! Reports go to standard output as `key=value` or CSV lines; diagnostics go
//! to standard error.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::ava::{self, LabeledExample, Partition, Protocol};
use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::gradcheck::{check_all, check_op, CheckedOp, GradCheckConfig};
use crate::graph::{assemble, ArchConfig, Network, Variant};
use crate::image::{
    compute_channel_means, decode_ppm, encode_pgm, preprocess, render_activations, resize_bilinear,
};
use crate::synth::{synth_dataset, SynthRule};
use crate::tensor::Tensor;
use crate::train::{self, evaluate, parse_config, Example, TrainConfig};

#[derive(Parser)]
#[command(
    name = "ilgnet",
    version,
    about = "Image aesthetic-quality classification with a reduced-depth inception network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a labeled train/test split from vote-histogram metadata.
    Split(SplitArgs),
    /// Train a network on a split and write a checkpoint plus metrics CSV.
    Train(TrainArgs),
    /// Score a checkpoint against one partition of a split.
    Eval(EvalArgs),
    /// Classify images with a trained checkpoint.
    Classify(ClassifyArgs),
    /// Render the network's feature taps for one image as PGM images.
    Features(FeaturesArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Time inference-mode forward passes on random weights.
    Bench(BenchArgs),
    /// Generate a synthetic labeled corpus (PPM images plus metadata).
    Synth(SynthArgs),
}

/// Parses the command line and runs the command, translating every failure
/// into the documented exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.exit_code() == 0 { 0 } else { 1 };
            let _ = err.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Split(args) => cmd_split(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Classify(args) => cmd_classify(args),
        Command::Features(args) => cmd_features(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

#[derive(Args)]
struct SplitArgs {
    /// Vote-histogram CSV: `image_id,c1,...,c10` per line, no header.
    #[arg(long)]
    metadata: PathBuf,
    /// `ava1` (mean-score threshold) or `ava2` (top/bottom deciles).
    #[arg(long)]
    protocol: Protocol,
    /// Ambiguity margin: training records with |mean - 5| <= delta are
    /// dropped (ava1 only; the test set is never filtered).
    #[arg(long, default_value_t = 0.0)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random test-set size (required for ava1, ignored for ava2).
    #[arg(long)]
    test_count: Option<usize>,
    /// Output split CSV: `image_id,label,partition,mean_score`.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_split(args: SplitArgs) -> Result<i32> {
    let file = fs::File::open(&args.metadata).map_err(|e| Error::io(&args.metadata, e))?;
    let records = ava::parse_metadata(BufReader::new(file))?;
    let spec = match args.protocol {
        Protocol::Ava1 => ava::SplitSpec {
            protocol: Protocol::Ava1,
            delta: args.delta,
            seed: args.seed,
            test_count: args.test_count.ok_or_else(|| {
                Error::usage("--test-count is required for the ava1 protocol".to_string())
            })?,
        },
        Protocol::Ava2 => ava::SplitSpec {
            protocol: Protocol::Ava2,
            delta: 0.0,
            seed: args.seed,
            test_count: 0,
        },
    };
    let split = ava::build_split(&records, &spec)?;

    let out = fs::File::create(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut writer = BufWriter::new(out);
    ava::write_split_csv(&split, &mut writer).map_err(|e| Error::io(&args.out, e))?;

    use ava::Label::{Bad, Good};
    use Partition::{Test, Train};
    println!(
        "good={}",
        split.count(Train, Good) + split.count(Test, Good)
    );
    println!("bad={}", split.count(Train, Bad) + split.count(Test, Bad));
    println!("train_good={}", split.count(Train, Good));
    println!("train_bad={}", split.count(Train, Bad));
    println!("test_good={}", split.count(Test, Good));
    println!("test_bad={}", split.count(Test, Bad));
    Ok(0)
}

#[derive(Args)]
struct TrainArgs {
    /// Split CSV produced by the `split` command.
    #[arg(long)]
    split: PathBuf,
    /// Directory holding one `<image_id>.ppm` per split row.
    #[arg(long)]
    images: PathBuf,
    /// Overrides the variant named in the config file.
    #[arg(long)]
    variant: Option<Variant>,
    /// `key = value` lines; omit for defaults. Keys match the training
    /// configuration fields (base_lr, gamma, stepsize, max_iter, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path [default: `<out>.metrics.csv`].
    #[arg(long)]
    metrics: Option<PathBuf>,
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let mut cfg = match &args.config {
        Some(path) => {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            parse_config(BufReader::new(file))?
        }
        None => TrainConfig::default(),
    };
    if let Some(variant) = args.variant {
        cfg.variant = variant;
    }
    cfg.validate()?;

    let (train_set, test_set, channel_means) =
        load_examples(&args.split, &args.images, cfg.input_side)?;
    if train_set.is_empty() {
        return Err(Error::empty("split has no training rows".to_string()));
    }

    let mut net = assemble(cfg.arch(), cfg.seed)?;
    let eval_set = (!test_set.is_empty()).then_some(&test_set[..]);
    let log = train::train(&mut net, &train_set, eval_set, &cfg)?;

    checkpoint::save(&net, channel_means, &cfg.to_key_values(), &args.out)?;
    let metrics_path = args
        .metrics
        .unwrap_or_else(|| args.out.with_extension("metrics.csv"));
    let metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    log.write_csv(BufWriter::new(metrics))
        .map_err(|e| Error::io(&metrics_path, e))?;

    println!("checkpoint={}", args.out.display());
    println!("metrics={}", metrics_path.display());
    println!("iterations={}", net.iteration);
    println!("metrics_rows={}", log.rows.len());
    if let Some(row) = log.rows.last() {
        println!("final_loss={}", row.loss);
        if let Some(accuracy) = row.accuracy {
            println!("final_accuracy={accuracy:.6}");
        }
    }
    Ok(0)
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Split CSV produced by the `split` command.
    #[arg(long)]
    split: PathBuf,
    /// Directory holding one `<image_id>.ppm` per split row.
    #[arg(long)]
    images: PathBuf,
    /// Which side of the split to score.
    #[arg(long, default_value = "test")]
    partition: Partition,
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let saved = Checkpoint::read(&args.ckpt)?;
    let net = saved.build_network()?;
    let rows = read_split(&args.split)?;
    let wanted: Vec<&LabeledExample> = rows
        .iter()
        .filter(|r| r.partition == args.partition)
        .collect();
    if wanted.is_empty() {
        return Err(Error::empty(format!(
            "split has no rows in the {} partition",
            args.partition.name()
        )));
    }
    let mut examples = Vec::with_capacity(wanted.len());
    for row in wanted {
        let input = load_input(&args.images, &row.image_id, &saved)?;
        examples.push(Example {
            image_id: row.image_id.clone(),
            input,
            label: row.label.index(),
        });
    }
    let report = evaluate(&net, &examples)?;
    println!("partition={}", args.partition.name());
    println!("examples={}", report.examples);
    println!("correct={}", report.correct);
    println!("accuracy={:.6}", report.accuracy);
    println!("confusion_bad_bad={}", report.confusion[0][0]);
    println!("confusion_bad_good={}", report.confusion[0][1]);
    println!("confusion_good_bad={}", report.confusion[1][0]);
    println!("confusion_good_good={}", report.confusion[1][1]);
    Ok(0)
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// PPM images to classify, one CSV output row each.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

fn cmd_classify(args: ClassifyArgs) -> Result<i32> {
    let saved = Checkpoint::read(&args.ckpt)?;
    let net = saved.build_network()?;
    let mut failures = 0;
    for path in &args.images {
        match classify_one(&net, &saved, path) {
            Ok(p_good) => {
                let label = if p_good > 0.5 { "good" } else { "bad" };
                println!("{},{:.6},{}", path.display(), p_good, label);
            }
            Err(err) => {
                failures += 1;
                eprintln!("error: {}: {err}", path.display());
                println!("{},,error", path.display());
            }
        }
    }
    Ok(if failures > 0 { 2 } else { 0 })
}

fn classify_one(net: &Network, saved: &Checkpoint, path: &Path) -> Result<f32> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let image = decode_ppm(&bytes)?;
    let input = preprocess(&image, saved.input_side, saved.channel_means)?;
    let probs = net.classify(&input)?;
    Ok(probs.data()[1])
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// PPM image to trace through the network.
    #[arg(long)]
    image: PathBuf,
    /// Directory receiving tap1.pgm ... tap7.pgm and concat.pgm.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_features(args: FeaturesArgs) -> Result<i32> {
    let saved = Checkpoint::read(&args.ckpt)?;
    let net = saved.build_network()?;
    let bytes = fs::read(&args.image).map_err(|e| Error::io(&args.image, e))?;
    let image = decode_ppm(&bytes)?;
    let input = preprocess(&image, saved.input_side, saved.channel_means)?;
    let taps = net.tap_features(&input)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let renders: [(&str, &Tensor<f32>); 8] = [
        ("tap1.pgm", &taps.stem),
        ("tap2.pgm", &taps.inception1),
        ("tap3.pgm", &taps.inception2),
        ("tap4.pgm", &taps.inception3),
        ("tap5.pgm", &taps.local1),
        ("tap6.pgm", &taps.local2),
        ("tap7.pgm", &taps.global_feature),
        ("concat.pgm", &taps.concat),
    ];
    for (name, tensor) in renders {
        let (w, h, pixels) = render_activations(tensor)?;
        let path = args.out.join(name);
        fs::write(&path, encode_pgm(w, h, &pixels)?).map_err(|e| Error::io(&path, e))?;
        println!("{name}={w}x{h}");
    }
    println!("activation_density={:.6}", taps.activation_density);
    Ok(0)
}

#[derive(Args)]
struct GradcheckArgs {
    /// One operation name, or `all`.
    #[arg(long, default_value = "all")]
    op: String,
    /// Random configurations per operation.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let cfg = GradCheckConfig {
        trials: args.trials,
        seed: args.seed,
        ..GradCheckConfig::default()
    };
    let reports = if args.op == "all" {
        check_all(&cfg)
    } else {
        vec![check_op(args.op.parse::<CheckedOp>()?, &cfg)]
    };
    let mut all_passed = true;
    for report in &reports {
        let passed = report.passed(cfg.tolerance);
        all_passed &= passed;
        println!(
            "op={} max_rel_err={:.3e} checked={} skipped={} {}",
            report.op.name(),
            report.max_rel_err,
            report.checked,
            report.skipped,
            if passed { "ok" } else { "FAIL" }
        );
    }
    if all_passed {
        Ok(0)
    } else {
        eprintln!(
            "error: gradient check exceeded tolerance {:.1e}",
            cfg.tolerance
        );
        Ok(3)
    }
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "ilgnet-inc-v1-bn")]
    variant: Variant,
    /// Timed forward passes (after 3 untimed warmups).
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
}

fn cmd_bench(args: BenchArgs) -> Result<i32> {
    if args.iters == 0 || args.batch == 0 {
        return Err(Error::usage(
            "--iters and --batch must be positive".to_string(),
        ));
    }
    let arch = ArchConfig::new(args.variant);
    let net = assemble(arch, 0)?;
    let volume = args.batch * 3 * arch.input_side * arch.input_side;
    let input = Tensor::new(
        vec![args.batch, 3, arch.input_side, arch.input_side],
        (0..volume)
            .map(|i| ((i % 251) as f32 - 125.0) / 125.0)
            .collect(),
    )?;

    for _ in 0..3 {
        net.classify(&input)?;
    }
    let mut per_image = Vec::with_capacity(args.iters);
    for _ in 0..args.iters {
        let start = Instant::now();
        net.classify(&input)?;
        per_image.push(start.elapsed().as_secs_f64() / args.batch as f64);
    }
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    let min = per_image.iter().copied().fold(f64::INFINITY, f64::min);
    let max = per_image.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!("variant={}", args.variant.cli_name());
    println!("input_side={}", arch.input_side);
    println!("batch={}", args.batch);
    println!("iters={}", args.iters);
    println!("mean_s_per_image={mean:.6}");
    println!("min_s_per_image={min:.6}");
    println!("max_s_per_image={max:.6}");
    Ok(0)
}

#[derive(Args)]
struct SynthArgs {
    /// Directory receiving `synth_*.ppm` and `metadata.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Even number of images, half per class.
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// What separates the classes visually: `brightness` or `hue`.
    #[arg(long, default_value = "brightness")]
    rule: SynthRule,
}

fn cmd_synth(args: SynthArgs) -> Result<i32> {
    let summary = synth_dataset(&args.out, args.count, args.seed, args.rule)?;
    println!("rule={}", summary.rule.name());
    println!("count={}", summary.count);
    println!("good={}", summary.good);
    println!("bad={}", summary.bad);
    println!("metadata={}", summary.metadata_path.display());
    Ok(0)
}

fn read_split(path: &Path) -> Result<Vec<LabeledExample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ava::read_split_csv(BufReader::new(file))
}

/// Reads every split row's image, resized to `side`. Channel means come
/// from the training partition alone; both partitions are centered by them.
fn load_examples(
    split_path: &Path,
    images_dir: &Path,
    side: usize,
) -> Result<(Vec<Example>, Vec<Example>, [f32; 3])> {
    let rows = read_split(split_path)?;
    if rows.is_empty() {
        return Err(Error::empty(format!(
            "split {} has no rows",
            split_path.display()
        )));
    }
    let mut resized = Vec::with_capacity(rows.len());
    for row in &rows {
        let path = images_dir.join(format!("{}.ppm", row.image_id));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        resized.push(resize_bilinear(&decode_ppm(&bytes)?, side, side)?);
    }
    let channel_means = compute_channel_means(
        rows.iter()
            .zip(&resized)
            .filter(|(row, _)| row.partition == Partition::Train)
            .map(|(_, image)| image),
    )?;

    let mut train_set = Vec::new();
    let mut test_set = Vec::new();
    for (row, mut input) in rows.into_iter().zip(resized) {
        let area = side * side;
        for (ch, &mean) in channel_means.iter().enumerate() {
            for v in &mut input.data_mut()[ch * area..(ch + 1) * area] {
                *v -= mean;
            }
        }
        let example = Example {
            image_id: row.image_id,
            input,
            label: row.label.index(),
        };
        match row.partition {
            Partition::Train => train_set.push(example),
            Partition::Test => test_set.push(example),
        }
    }
    Ok((train_set, test_set, channel_means))
}

/// Decodes and preprocesses one image with a checkpoint's geometry and
/// channel means.
fn load_input(images_dir: &Path, image_id: &str, saved: &Checkpoint) -> Result<Tensor<f32>> {
    let path = images_dir.join(format!("{image_id}.ppm"));
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    preprocess(&decode_ppm(&bytes)?, saved.input_side, saved.channel_means)
}
