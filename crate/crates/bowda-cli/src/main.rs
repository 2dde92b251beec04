//! `bowda` — one binary for the whole workflow: phantom generation, source
//! pretraining, adversarial adaptation, strategy comparison, inference,
//! evaluation, gradient checking and boundary histograms.
//!
//! Exit codes: 0 on success, 1 on validation/usage errors, 2 on runtime
//! failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use bowda::boundary::boundary_gradient_histogram;
use bowda::checkpoint::Checkpoint;
use bowda::error::{Error, Result};
use bowda::gradcheck;
use bowda::metaimage::{read_metaimage, read_metaimage_mask, write_metaimage, write_metaimage_mask};
use bowda::metrics::{evaluate_case, MetricReport};
use bowda::phantom::{gen_dataset, DomainSpec};
use bowda::pipeline::WindowSpec;
use bowda::trainer::{
    infer_volume, load_spec, net_config_from, run_strategy, train_source, ExperimentSpec,
    Strategy, PROB_THRESHOLD,
};
use bowda::volume::Mask;

#[derive(Parser)]
#[command(
    name = "bowda",
    version,
    about = "Boundary-weighted domain adaptation for volumetric segmentation"
)]
struct Cli {
    /// Upper bound on worker threads (falls back to BOWDA_THREADS, then all
    /// cores). Compute here is single-threaded, so any bound >= 1 holds;
    /// results never depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset (MetaImage pairs + manifest).
    GenPhantom(GenPhantomArgs),
    /// Cross-entropy pretraining on the source split of an experiment spec.
    TrainSource(SpecArgs),
    /// Adversarial adaptation (spec strategy must be adapt_ce/adapt_bowda).
    TrainAdapt(SpecArgs),
    /// Run one comparison strategy end to end and evaluate it.
    RunStrategy(SpecArgs),
    /// Sliding-window inference with a trained checkpoint.
    Infer(InferArgs),
    /// Segmentation metrics for a prediction against a reference mask.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Histogram of image gradient magnitude along a mask boundary.
    Histogram(HistogramArgs),
}

#[derive(Args)]
struct GenPhantomArgs {
    /// Domain preset.
    #[arg(long, value_parser = ["source", "target"], conflicts_with = "spec")]
    preset: Option<String>,
    /// Full domain-spec JSON file (alternative to --preset).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Generation seed (overrides the spec file's seed).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 8)]
    train: usize,
    #[arg(long, default_value_t = 2)]
    val: usize,
    #[arg(long, default_value_t = 0)]
    test: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// File-name prefix.
    #[arg(long, default_value = "phantom")]
    prefix: String,
}

#[derive(Args)]
struct SpecArgs {
    /// Experiment spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Override spec fields: --set dotted.key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Override the spec's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Network checkpoint written by train-source/run-strategy.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input volume (.mhd).
    #[arg(long)]
    image: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Sliding window extent as depth,height,width.
    #[arg(long, value_delimiter = ',', default_values_t = WindowSpec::desk().window)]
    window: Vec<usize>,
    /// Window stride as depth,height,width.
    #[arg(long, value_delimiter = ',', default_values_t = WindowSpec::desk().stride)]
    stride: Vec<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted segmentation (.mhd).
    #[arg(long)]
    seg: PathBuf,
    /// Reference mask (.mhd).
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Write the metric CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check every registered op.
    #[arg(long, conflicts_with = "op")]
    all: bool,
    /// Check one op by name.
    #[arg(long)]
    op: Option<String>,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOL)]
    tol: f64,
    /// Coordinates probed per parameter group.
    #[arg(long, default_value_t = gradcheck::DEFAULT_COORDS)]
    coords: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

#[derive(Args)]
struct HistogramArgs {
    /// Input volume (.mhd).
    #[arg(long)]
    image: PathBuf,
    /// Mask whose boundary is sampled (.mhd).
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value_t = 32)]
    bins: usize,
    /// Write the histogram JSON here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = resolve_threads(cli.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Validation problems exit 1; failures during the work itself exit 2.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json { .. } => 1,
        _ => 2,
    }
}

fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("BOWDA_THREADS") {
            Ok(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("BOWDA_THREADS='{v}' is not a number")))?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    Ok(n)
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenPhantom(a) => gen_phantom_cmd(a),
        Cmd::TrainSource(a) => train_source_cmd(a),
        Cmd::TrainAdapt(a) => run_strategy_cmd(a, true),
        Cmd::RunStrategy(a) => run_strategy_cmd(a, false),
        Cmd::Infer(a) => infer_cmd(a),
        Cmd::Evaluate(a) => evaluate_cmd(a),
        Cmd::Gradcheck(a) => gradcheck_cmd(a),
        Cmd::Histogram(a) => histogram_cmd(a),
    }
}

fn gen_phantom_cmd(a: GenPhantomArgs) -> Result<()> {
    let mut spec = match (&a.preset, &a.spec) {
        (Some(p), None) => {
            let seed = a.seed.unwrap_or(0);
            if p == "source" {
                DomainSpec::source_desk(seed)
            } else {
                DomainSpec::target_desk(seed)
            }
        }
        (None, Some(path)) => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_slice(&bytes).map_err(|e| Error::Json {
                context: "domain spec".into(),
                message: e.to_string(),
            })?
        }
        _ => return Err(Error::Config("give exactly one of --preset or --spec".into())),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let mut splits: Vec<(&str, usize)> = Vec::new();
    for (name, count) in [("train", a.train), ("val", a.val), ("test", a.test)] {
        if count > 0 {
            splits.push((name, count));
        }
    }
    if splits.is_empty() {
        return Err(Error::Config("all split counts are zero".into()));
    }
    let manifest = gen_dataset(&spec, &splits, &a.out, &a.prefix)?;
    println!(
        "wrote {} cases ({}) to {}",
        manifest.entries.len(),
        splits.iter().map(|(n, c)| format!("{n}={c}")).collect::<Vec<_>>().join(", "),
        a.out.display()
    );
    Ok(())
}

fn parse_sets(sets: &[String]) -> Result<Vec<(String, String)>> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Config(format!("--set '{s}' is not KEY=VALUE")))
        })
        .collect()
}

fn load_spec_args(a: &SpecArgs) -> Result<ExperimentSpec> {
    let mut spec = load_spec(&a.spec, &parse_sets(&a.sets)?)?;
    if let Some(out) = &a.out {
        spec.out_dir = out.clone();
    }
    Ok(spec)
}

fn train_source_cmd(a: SpecArgs) -> Result<()> {
    let spec = load_spec_args(&a)?;
    let outcome = train_source(&spec)?;
    println!("final: {}", outcome.final_checkpoint.display());
    println!("best:  {}", outcome.best_checkpoint.display());
    Ok(())
}

fn run_strategy_cmd(a: SpecArgs, adapt_only: bool) -> Result<()> {
    let spec = load_spec_args(&a)?;
    if adapt_only && !matches!(spec.strategy, Strategy::AdaptCe | Strategy::AdaptBowda) {
        return Err(Error::Config(format!(
            "train-adapt needs an adaptation strategy, spec says '{}'",
            spec.strategy.name()
        )));
    }
    let outcome = run_strategy(&spec)?;
    println!(
        "strategy={} cases={} mean_dsc={:.2} out={}",
        spec.strategy.name(),
        outcome.report.cases.len(),
        outcome.report.mean_dsc(),
        outcome.out_dir.display()
    );
    Ok(())
}

fn triple(name: &str, v: &[usize]) -> Result<[usize; 3]> {
    match v {
        [d, h, w] => Ok([*d, *h, *w]),
        _ => Err(Error::Config(format!("--{name} needs exactly three values, got {}", v.len()))),
    }
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let ck = Checkpoint::read(&a.checkpoint)?;
    let cfg = net_config_from(&ck)?;
    let params = ck.extract_params("snet.")?;
    let window =
        WindowSpec { window: triple("window", &a.window)?, stride: triple("stride", &a.stride)? };
    window.validate()?;
    let image = read_metaimage(&a.image)?;
    let prob = infer_volume(&cfg, &params, &window, &image)?;
    let seg = Mask::threshold(&prob, PROB_THRESHOLD as f32);
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let stem = a
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".into());
    let prob_path = a.out.join(format!("{stem}_prob.mhd"));
    let seg_path = a.out.join(format!("{stem}_seg.mhd"));
    write_metaimage(&prob_path, &prob)?;
    write_metaimage_mask(&seg_path, &seg)?;
    println!("wrote {} and {}", prob_path.display(), seg_path.display());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let seg = read_metaimage_mask(&a.seg)?;
    let reference = read_metaimage_mask(&a.reference)?;
    let name = a
        .seg
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into());
    let mut report = MetricReport::default();
    report.push(&name, evaluate_case(&seg, &reference)?);
    let csv = report.to_csv();
    match &a.out {
        Some(path) => std::fs::write(path, &csv).map_err(|e| Error::io(path, e))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let reports = match (&a.op, a.all) {
        (Some(op), false) => vec![gradcheck::check_op(op, a.seed, a.coords)?],
        (None, _) => gradcheck::check_all(a.seed, a.coords)?,
        (Some(_), true) => unreachable!("clap enforces the conflict"),
    };
    println!("{:<22} {:>7} {:>7} {:>12}  status", "op", "groups", "coords", "max_rel");
    let mut all_pass = true;
    for r in &reports {
        let pass = r.passes(a.tol);
        all_pass &= pass;
        println!(
            "{:<22} {:>7} {:>7} {:>12.3e}  {}",
            r.op,
            r.groups.len(),
            r.coords_checked(),
            r.max_rel(),
            if pass { "pass" } else { "FAIL" }
        );
    }
    if all_pass {
        Ok(())
    } else {
        Err(Error::Config(format!("gradient check exceeded tolerance {}", a.tol)))
    }
}

fn histogram_cmd(a: HistogramArgs) -> Result<()> {
    let image = read_metaimage(&a.image)?;
    let mask = read_metaimage_mask(&a.mask)?;
    let hist = boundary_gradient_histogram(&image, &mask, a.bins)?;
    let doc = serde_json::json!({
        "edges": hist.edges,
        "counts": hist.counts,
        "mean": hist.mean,
    });
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Json { context: "histogram".into(), message: e.to_string() })?;
    match &a.out {
        Some(path) => std::fs::write(path, &text).map_err(|e| Error::io(path, e))?,
        None => println!("{text}"),
    }
    Ok(())
}
