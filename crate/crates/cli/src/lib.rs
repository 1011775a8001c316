//! The `zed` command line: train, analyze, score, calibrate, evaluate,
//! compress, decompress and report.

pub mod config;
mod help;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rayon::prelude::*;

use config::{parse_config, ConfigError, Settings};
use zed::corpus_io::{
    load_feature_table, load_image, load_manifest, save_feature_table, save_image, FeatureRow, Label,
};
use zed::eval::{self, EvalOptions, StatisticChoice};
use zed::features::{aggregate, export_maps, nll_entropy_maps};
use zed::pyramid::{build_pyramid, crop_to_multiple_of_8};
use zed::{codec, trainer, Error, ModelWeights};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "zed",
    version,
    about = "Detect generated images from the coding-cost gap of a learned lossless model"
)]
struct Cli {
    /// Experiment file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every random choice; recorded in reports.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the context model on the real images of a manifest.
    Train(TrainArgs),
    /// Compute an image's level-wise features (and optionally its maps).
    Analyze(AnalyzeArgs),
    /// Print `<path>\t<stat>\t<score>` for each image.
    Score(ScoreArgs),
    /// Pick a threshold from the real images of a manifest.
    Calibrate(CalibrateArgs),
    /// Score a labeled manifest and write AUC / accuracy reports.
    Evaluate(EvaluateArgs),
    /// Losslessly compress an image with the model.
    Compress(CompressArgs),
    /// Restore an image compressed with the same model.
    Decompress(DecompressArgs),
    /// Turn a feature table into histogram, sweep and gap-vs-level data.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output weights file.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines training log (default: `<out>.train.jsonl`).
    #[arg(long)]
    report_out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// One-row feature table.
    #[arg(long)]
    features_out: PathBuf,
    /// Directory for gap-map PNGs and their sidecar.
    #[arg(long)]
    maps_out: Option<PathBuf>,
    /// Label written into the feature row.
    #[arg(long, default_value = "real")]
    label: Label,
    #[arg(long, default_value = "unknown")]
    generator: String,
    #[arg(long, default_value = "unknown")]
    group: String,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    image: Vec<PathBuf>,
    #[arg(long)]
    stat: Option<StatisticChoice>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    target_fpr: Option<f64>,
    #[arg(long)]
    stat: Option<StatisticChoice>,
    /// Also write the calibration as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    stat: Option<StatisticChoice>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Report JSON; the sweep and gap CSVs are written next to it as
    /// `<stem>.sweep.csv` and `<stem>.gaps.csv`.
    #[arg(long)]
    report_out: PathBuf,
    /// Also write the per-image feature table.
    #[arg(long)]
    features_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompressArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Center-crop to a multiple of 8 instead of rejecting other sizes.
    #[arg(long)]
    crop: bool,
}

#[derive(Args, Debug)]
struct DecompressArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output image (.png or .ppm).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Histogram bins per statistic and label.
    #[arg(long, default_value_t = 30)]
    bins: usize,
}

fn command() -> clap::Command {
    let with = |parts: &[&str]| parts.join("\n\n");
    Cli::command()
        .after_help(with(&[help::CONFIG, &help::config_keys(), help::EXIT_CODES]))
        .mut_subcommand("train", |c| {
            c.after_help(with(&[
                help::MANIFEST,
                help::WEIGHTS,
                help::TRAIN_REPORT,
                help::CONFIG,
                &help::config_keys(),
            ]))
        })
        .mut_subcommand("analyze", |c| {
            c.after_help(with(&[help::WEIGHTS, help::FEATURE_TABLE, help::MAPS]))
        })
        .mut_subcommand("score", |c| c.after_help(with(&[help::WEIGHTS, help::EXIT_CODES])))
        .mut_subcommand("calibrate", |c| c.after_help(with(&[help::MANIFEST, help::WEIGHTS])))
        .mut_subcommand("evaluate", |c| {
            c.after_help(with(&[
                help::MANIFEST,
                help::WEIGHTS,
                help::EVAL_REPORT,
                help::FEATURE_TABLE,
            ]))
        })
        .mut_subcommand("compress", |c| c.after_help(with(&[help::WEIGHTS, help::BITSTREAM])))
        .mut_subcommand("decompress", |c| c.after_help(with(&[help::WEIGHTS, help::BITSTREAM])))
        .mut_subcommand("report", |c| {
            c.after_help(with(&[help::FEATURE_TABLE, help::EVAL_REPORT]))
        })
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.0)
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Runs the command line with the process's standard streams.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_io(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with_io<I, T>(argv: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let informational = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            if informational {
                let _ = write!(out, "{}", e.render());
                return EXIT_OK;
            }
            let _ = write!(err, "{}", e.render());
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return EXIT_USAGE;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}\n\n{}", command().render_usage());
            EXIT_USAGE
        }
        Err(Failure::Core(e)) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Numerical(_) => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            }
        }
    }
}

fn settings(cli: &Cli) -> std::result::Result<Settings, Failure> {
    let mut s = Settings::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Failure::Core(Error::Io {
                path: path.clone(),
                source: e,
            })
        })?;
        s.apply_file(&parse_config(&text, path)?)?;
    }
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        s.threads = Some(t);
    }
    Ok(s)
}

fn execute(cli: Cli, out: &mut (dyn Write + Send)) -> Outcome {
    let mut s = settings(&cli)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = s.threads {
        pool = pool.num_threads(t);
    }
    let pool = pool
        .build()
        .map_err(|e| Failure::Usage(format!("cannot start {:?} worker threads: {e}", s.threads)))?;
    pool.install(|| match cli.command {
        Command::Train(a) => train(&mut s, a, out),
        Command::Analyze(a) => analyze(a),
        Command::Score(a) => score(&s, a, out),
        Command::Calibrate(a) => calibrate(&s, a, out),
        Command::Evaluate(a) => evaluate(&s, a, out),
        Command::Compress(a) => compress(a, out),
        Command::Decompress(a) => decompress(a),
        Command::Report(a) => report(&s, a, out),
    })
}

fn say(out: &mut (dyn Write + Send), line: String) -> Outcome {
    writeln!(out, "{line}").map_err(|e| {
        Failure::Core(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        })
    })
}

fn load_weights(path: &Path) -> std::result::Result<ModelWeights, Failure> {
    Ok(ModelWeights::load(path)?)
}

fn train(s: &mut Settings, a: TrainArgs, out: &mut (dyn Write + Send)) -> Outcome {
    let t = &mut s.train;
    t.seed = s.seed;
    t.steps = a.steps.unwrap_or(t.steps);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.crop_size = a.crop_size.unwrap_or(t.crop_size);
    t.learning_rate = a.learning_rate.unwrap_or(t.learning_rate);
    t.log_every = a.log_every.unwrap_or(t.log_every);
    t.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let manifest = load_manifest(&a.manifest)?;
    let (weights, report) = trainer::train(&manifest, t)?;
    weights.save(&a.out)?;
    let log_path = a.report_out.unwrap_or_else(|| sibling(&a.out, ".train.jsonl"));
    report.save_json_lines(&log_path, t.log_every)?;
    say(
        out,
        format!(
            "seed {}: {} steps, validation NLL {:.4} -> {:.4} nats; weights {}",
            s.seed,
            report.records.len(),
            report.initial_nll,
            report.final_validation_nll,
            a.out.display()
        ),
    )
}

/// `dir/name.ext` -> `dir/name<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn analyze(a: AnalyzeArgs) -> Outcome {
    let weights = load_weights(&a.weights)?;
    let img = load_image(&a.image)?;
    let pyramid = build_pyramid(&crop_to_multiple_of_8(&img).map_err(|e| with_path(&a.image, e))?)?;
    let maps = nll_entropy_maps(&weights, &pyramid)?;
    let row = FeatureRow {
        path: a.image.display().to_string(),
        label: a.label,
        generator: a.generator,
        group: a.group,
        features: aggregate(&maps)?,
    };
    save_feature_table(&[row], &a.features_out)?;
    if let Some(dir) = a.maps_out {
        export_maps(&maps, dir)?;
    }
    Ok(())
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::InvalidInput(msg) => Error::Format {
            path: path.to_path_buf(),
            message: msg,
        },
        Error::Numerical(msg) => Error::Numerical(format!("{}: {msg}", path.display())),
        other => other,
    }
}

fn score(s: &Settings, a: ScoreArgs, out: &mut (dyn Write + Send)) -> Outcome {
    let stat = a.stat.unwrap_or(s.stat);
    let weights = load_weights(&a.weights)?;
    let scores: Vec<f64> = a
        .image
        .par_iter()
        .map(|p| {
            let img = load_image(p)?;
            eval::score(&img, &weights, stat).map_err(|e| with_path(p, e))
        })
        .collect::<zed::Result<_>>()?;
    for (p, v) in a.image.iter().zip(scores) {
        say(out, format!("{}\t{stat}\t{v}", p.display()))?;
    }
    Ok(())
}

fn calibrate(s: &Settings, a: CalibrateArgs, out: &mut (dyn Write + Send)) -> Outcome {
    let stat = a.stat.unwrap_or(s.stat);
    let target = a.target_fpr.unwrap_or(s.target_fpr);
    let weights = load_weights(&a.weights)?;
    let mut manifest = load_manifest(&a.manifest)?;
    manifest.entries.retain(|e| e.label == Label::Real);
    let rows = eval::feature_rows(&manifest, &weights)?;
    let scores: Vec<f64> = rows.iter().map(|r| stat.pick(&r.features.statistics())).collect();
    let threshold = eval::calibrate_threshold(&scores, target).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::Format {
            path: a.manifest.clone(),
            message: msg,
        },
        other => other,
    })?;
    let fpr = scores.iter().filter(|&&v| v > threshold).count() as f64 / scores.len() as f64;
    if let Some(path) = a.out {
        let json = serde_json::json!({
            "statistic": stat,
            "seed": s.seed,
            "target_fpr": target,
            "n_real": scores.len(),
            "threshold": threshold,
            "empirical_fpr": fpr,
        });
        std::fs::write(
            &path,
            format!("{}\n", serde_json::to_string_pretty(&json).expect("json")),
        )
        .map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    say(out, format!("{stat}\tthreshold\t{threshold}\tempirical_fpr\t{fpr}"))
}

fn evaluate(s: &Settings, a: EvaluateArgs, out: &mut (dyn Write + Send)) -> Outcome {
    let options = EvalOptions {
        statistic: a.stat.unwrap_or(s.stat),
        threshold: a.threshold.or(s.threshold),
        sweep_points: s.sweep_points,
        seed: s.seed,
    };
    let weights = load_weights(&a.weights)?;
    let manifest = load_manifest(&a.manifest)?;
    let (ev, rows) = eval::evaluate(&manifest, &weights, &options).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::Format {
            path: a.manifest.clone(),
            message: msg,
        },
        other => other,
    })?;
    ev.report.save(&a.report_out)?;
    eval::save_sweep_csv(&ev.report.sweep, sibling(&a.report_out, ".sweep.csv"))?;
    eval::save_gap_levels_csv(&ev.gap_levels, sibling(&a.report_out, ".gaps.csv"))?;
    if let Some(path) = a.features_out {
        save_feature_table(&rows, path)?;
    }
    say(
        out,
        format!(
            "{}: global AUC {:.4}, threshold {} ({}), seed {}",
            ev.report.statistic, ev.report.global_auc, ev.report.threshold, ev.report.threshold_source, ev.report.seed
        ),
    )?;
    for g in &ev.report.groups {
        say(
            out,
            format!(
                "  {}\treal {}\tsynthetic {}\tAUC {:.4}\tBA {:.4}",
                g.name, g.n_real, g.n_fake, g.auc, g.ba_at_threshold
            ),
        )?;
    }
    Ok(())
}

fn compress(a: CompressArgs, out: &mut (dyn Write + Send)) -> Outcome {
    let weights = load_weights(&a.weights)?;
    let mut img = load_image(&a.image)?;
    if a.crop {
        img = crop_to_multiple_of_8(&img).map_err(|e| with_path(&a.image, e))?;
    }
    let bs = codec::encode(&img, &weights).map_err(|e| with_path(&a.image, e))?;
    let bytes = bs.to_bytes();
    std::fs::write(&a.out, &bytes).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let samples = (img.width() * img.height() * 3) as f64;
    say(
        out,
        format!(
            "{}\t{} bytes\t{:.4} bits/sample\tside info {} bits\tcoded {} bits",
            a.out.display(),
            bytes.len(),
            8.0 * bytes.len() as f64 / samples,
            bs.side_info_bits(),
            bs.coded_bits()
        ),
    )
}

fn decompress(a: DecompressArgs) -> Outcome {
    let weights = load_weights(&a.weights)?;
    let bytes = std::fs::read(&a.input).map_err(|e| Error::Io {
        path: a.input.clone(),
        source: e,
    })?;
    let img = codec::decode_bytes(&bytes, &weights).map_err(|e| match e {
        Error::Corrupt(msg) => Error::Format {
            path: a.input.clone(),
            message: format!("corrupt bitstream: {msg}"),
        },
        other => other,
    })?;
    save_image(&a.out, &img)?;
    Ok(())
}

fn report(s: &Settings, a: ReportArgs, out: &mut (dyn Write + Send)) -> Outcome {
    let rows = load_feature_table(&a.features)?;
    if rows.is_empty() {
        return Err(Failure::Core(Error::Format {
            path: a.features.clone(),
            message: "feature table has no rows".into(),
        }));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    eval::save_histograms_csv(&rows, a.bins, a.out.join("histograms.csv"))?;
    eval::save_gap_levels_csv(&eval::gap_levels(&rows), a.out.join("gap_levels.csv"))?;
    let has_both = [Label::Real, Label::Synthetic]
        .iter()
        .all(|l| rows.iter().any(|r| r.label == *l));
    if has_both {
        let mut sweep = String::from("statistic,threshold,balanced_accuracy\n");
        let mut summary = Vec::new();
        for stat in StatisticChoice::ALL {
            let (real, fake): (Vec<_>, Vec<_>) = rows.iter().partition(|r| r.label == Label::Real);
            let pick = |v: Vec<&FeatureRow>| {
                v.iter()
                    .map(|r| stat.pick(&r.features.statistics()))
                    .collect::<Vec<f64>>()
            };
            let (real, fake) = (pick(real), pick(fake));
            let sw = eval::threshold_sweep(&real, &fake, s.sweep_points)?;
            for (t, ba) in &sw.curve {
                sweep.push_str(&format!("{stat},{t:.16e},{ba:.16e}\n"));
            }
            summary.push(serde_json::json!({
                "statistic": stat,
                "pooled_auc": eval::roc_auc(&real, &fake)?.auc,
                "best_threshold": sw.best_threshold,
                "best_balanced_accuracy": sw.best_accuracy,
            }));
        }
        let path = a.out.join("sweep.csv");
        std::fs::write(&path, sweep).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let path = a.out.join("summary.json");
        let json = serde_json::json!({ "seed": s.seed, "n_rows": rows.len(), "statistics": summary });
        std::fs::write(
            &path,
            format!("{}\n", serde_json::to_string_pretty(&json).expect("json")),
        )
        .map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    say(out, format!("{} rows -> {}", rows.len(), a.out.display()))
}
