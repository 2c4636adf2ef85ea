//! The `camo` command line: `eval`, `forward`, `gradcheck` and `overfit`.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gradcheck::{self, Registry};
use crate::io::{self, Skipped};
use crate::metrics::{aggregate, evaluate_pair, ImageScores, MetricReport, MetricSelection};
use crate::model::{CamoFormer, ModelConfig};
use crate::ops;
use crate::train::{self, OverfitConfig, TARGET_LOSS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "camo",
    version,
    about = "Masked separable attention model and segmentation-map evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score prediction maps against ground truth.
    Eval(EvalArgs),
    /// Run the model on one image and write the final map.
    Forward(ForwardArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Fit the micro model to the built-in synthetic set.
    Overfit(OverfitArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Comma-separated subset of sm,wf,em,mae,curves.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<String>>,
    /// Border-band kernel sizes, e.g. 15,30.
    #[arg(long, value_delimiter = ',')]
    pub br: Vec<usize>,
    /// Output directory for report files; the summary goes to stdout if unset.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write all five side outputs next to `--out`.
    #[arg(long)]
    pub dump_all: bool,
    /// Resize the image to the configured input size first.
    #[arg(long)]
    pub resize: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Suite file; the built-in suite runs if unset.
    #[arg(long)]
    pub suite: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OverfitArgs {
    #[arg(long, default_value_t = train::DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = train::DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = train::DEFAULT_SEED)]
    pub seed: u64,
    /// Loss trajectory CSV.
    #[arg(long, default_value = "overfit_loss.csv")]
    pub out: PathBuf,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Diverged { .. } => EXIT_CHECK,
        _ => EXIT_DATA,
    }
}

/// Parses `--metrics` and `--br` into a selection.
pub fn metric_selection(metrics: Option<&[String]>, border: &[usize]) -> Result<MetricSelection> {
    let mut sel = match metrics {
        None => MetricSelection::default(),
        Some(list) => {
            let mut sel = MetricSelection::none();
            for m in list.iter().map(|m| m.trim()).filter(|m| !m.is_empty()) {
                match m {
                    "sm" => sel.sm = true,
                    "wf" => sel.wf = true,
                    "em" => sel.em = true,
                    "mae" => sel.mae = true,
                    "curves" => sel.curves = true,
                    other => return Err(usage(format!("unknown metric '{other}'"))),
                }
            }
            sel
        }
    };
    if border.contains(&0) {
        return Err(usage("border kernels must be positive"));
    }
    sel.border = border.to_vec();
    if !sel.any_scalar() && !sel.curves {
        return Err(usage("select at least one metric"));
    }
    Ok(sel)
}

/// Result of evaluating two directories.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub selection: MetricSelection,
    pub skipped: Vec<Skipped>,
}

enum PairResult {
    Scored(ImageScores),
    Skipped(Skipped),
}

fn score_pair(pair: &io::Pair, sel: &MetricSelection) -> Result<PairResult> {
    let skip = |reason: String| {
        log::warn!("skipping {}: {reason}", pair.stem);
        Ok(PairResult::Skipped(Skipped {
            name: pair.stem.clone(),
            reason,
        }))
    };
    let pred = match io::load_gray_png(&pair.pred) {
        Ok(m) => m,
        Err(e) => return skip(e.to_string()),
    };
    let gt = match io::load_gray_png(&pair.gt) {
        Ok(m) => m,
        Err(e) => return skip(e.to_string()),
    };
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return skip(format!(
            "size mismatch: prediction {}x{}, ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        ));
    }
    if !gt.is_binary() {
        log::info!("{}: ground truth is not binary; thresholding at 0.5", pair.stem);
    }
    evaluate_pair(&pair.stem, &pred, &gt, sel).map(PairResult::Scored)
}

/// Pairs, loads and scores every image. Results keep stem order whatever
/// the thread count.
pub fn evaluate_directories(pred: &Path, gt: &Path, sel: &MetricSelection, jobs: usize) -> Result<EvalOutcome> {
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let pairing = io::pair_directories(pred, gt)?;
    let mut skipped: Vec<Skipped> = pairing
        .unmatched_pred
        .iter()
        .map(|p| Skipped {
            name: p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            reason: "no matching ground truth".into(),
        })
        .collect();
    for p in &pairing.unmatched_gt {
        log::info!("ground truth without prediction: {}", p.display());
    }
    if pairing.pairs.is_empty() {
        return Err(Error::Data(format!(
            "no prediction/ground-truth pairs between {} and {}",
            pred.display(),
            gt.display()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Data(format!("cannot start worker pool: {e}")))?;
    let results: Vec<PairResult> = pool.install(|| {
        pairing
            .pairs
            .par_iter()
            .map(|p| score_pair(p, sel))
            .collect::<Result<_>>()
    })?;
    let mut scored = Vec::with_capacity(results.len());
    for r in results {
        match r {
            PairResult::Scored(s) => scored.push(s),
            PairResult::Skipped(s) => skipped.push(s),
        }
    }
    if scored.is_empty() {
        return Err(Error::Data("every pair was skipped".into()));
    }
    Ok(EvalOutcome {
        report: aggregate(scored)?,
        selection: sel.clone(),
        skipped,
    })
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let sel = metric_selection(args.metrics.as_deref(), &args.br)?;
    let outcome = evaluate_directories(&args.pred, &args.gt, &sel, args.jobs)?;
    let summary = io::format_report(&outcome.report, &outcome.skipped);
    match &args.out {
        Some(dir) => {
            for path in io::write_reports(dir, &outcome.report, &outcome.selection, &outcome.skipped)? {
                log::info!("wrote {}", path.display());
            }
        }
        None => print!("{summary}"),
    }
    Ok(EXIT_OK)
}

fn side_output_path(out: &Path, level: usize) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = out
        .extension()
        .map(|e| e.to_string_lossy().into_owned())
        .unwrap_or_else(|| "png".into());
    out.with_file_name(format!("{stem}_p{level}.{ext}"))
}

fn cmd_forward(args: ForwardArgs) -> Result<i32> {
    let config = ModelConfig::from_file(&args.config)?;
    let model = CamoFormer::new(config)?;
    let img = io::load_rgb_png(&args.image)?;
    let (_, h, w) = img.dims3()?;
    let input = if h % 32 == 0 && w % 32 == 0 {
        img
    } else if args.resize {
        let (th, tw) = model.config.input_size;
        ops::bilinear_resize(&img, th, tw)?
    } else {
        return Err(Error::Data(format!(
            "image is {h}x{w}, not divisible by 32; pass --resize to use the configured input size"
        )));
    };
    let maps = model.predict_maps(&input, h, w)?;
    io::save_gray_png(&args.out, &io::tensor_to_map(&maps[0])?)?;
    if args.dump_all {
        for (i, m) in maps.iter().enumerate() {
            io::save_gray_png(&side_output_path(&args.out, i + 1), &io::tensor_to_map(m)?)?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let registry = Registry::builtin();
    let (cases, builtin) = match &args.suite {
        Some(path) => (gradcheck::parse_suite(&fs::read_to_string(path)?)?, false),
        None => (gradcheck::default_suite(), true),
    };
    let report = gradcheck::check_suite(&registry, &cases)?;
    print!("{}", report.table());
    let mut ok = report.passed();
    if !report.uncovered.is_empty() {
        println!("uncovered ops: {:?}", report.uncovered);
        ok &= !builtin;
    }
    let failed = report.results.iter().filter(|r| !r.passed).count();
    println!("{} cases, {failed} failed", report.results.len());
    Ok(if ok { EXIT_OK } else { EXIT_CHECK })
}

fn cmd_overfit(args: OverfitArgs) -> Result<i32> {
    let cfg = OverfitConfig {
        steps: args.steps,
        lr: args.lr,
        seed: args.seed,
    };
    let traj = match train::overfit(&cfg) {
        Ok((_, t)) => t,
        Err(Error::Diverged { step, loss }) => {
            eprintln!("diverged at step {step} (loss {loss})");
            return Ok(EXIT_CHECK);
        }
        Err(e) => return Err(e),
    };
    fs::write(&args.out, traj.to_csv())?;
    println!("steps: {}", args.steps);
    println!("initial_loss: {}", traj.initial());
    println!("final_loss: {}", traj.last());
    println!("converged: {}", traj.converged());
    Ok(if traj.converged() {
        EXIT_OK
    } else {
        eprintln!("final loss {} is not below {TARGET_LOSS}", traj.last());
        EXIT_CHECK
    })
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let result = match cli.command {
        Command::Eval(a) => cmd_eval(a),
        Command::Forward(a) => cmd_forward(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Overfit(a) => cmd_overfit(a),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
