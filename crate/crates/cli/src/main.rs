//! `htd`: synthesise scenes, train, detect, evaluate and self-check.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use htd_core::config::KeyValueConfig;
use htd_core::data::{
    generate_scene, read_cube, read_mask, read_spectrum_for, write_cube, write_mask, write_spectrum,
    SyntheticSceneSpec,
};
use htd_core::detect::{detect, read_scores, write_scores, DEFAULT_DELTA};
use htd_core::eval::{auc_all, normalize_scores, roc, separability_stats, write_reports};
use htd_core::model::{load_checkpoint, Model};
use htd_core::train::{train_with, Precision, TrainConfig, TrainOutputs};
use htd_core::verify::Suite;

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "htd", version, about = "Hyperspectral target detection with a pyramid selective state-space model")]
struct Cli {
    /// Worker threads for data-parallel work (defaults to all cores)
    #[arg(long, global = true, env = "HTD_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: cube, mask and target spectrum
    Synth(SynthArgs),
    /// Train a detector on a cube
    Train(TrainArgs),
    /// Score every pixel of a cube against a target spectrum
    Detect(DetectArgs),
    /// ROC curves, AUC metrics and separability for a score map
    Eval(EvalArgs),
    /// Run the built-in oracle checks
    Verify(VerifyArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description (`key = value` lines); defaults when omitted
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cube: PathBuf,
    /// Training configuration (`key = value` lines); defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` settings applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    cube: PathBuf,
    /// Target spectrum, one value per line
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Background suppression width
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    /// Write raw cosine scores instead of suppressed ones
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use scores as stored instead of min-max normalising them
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// grad, scan, metrics or all
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Exit status 2 for bad input, 1 for anything that fails while running.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<htd_core::Error> for Failure {
    fn from(e: htd_core::Error) -> Self {
        if e.is_validation() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn require_file(path: &Path) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("input file {} does not exist", path.display())))
    }
}

fn synth(args: SynthArgs) -> Outcome {
    let started = Instant::now();
    let mut spec = match &args.spec {
        Some(path) => {
            require_file(path)?;
            SyntheticSceneSpec::read(path)?
        }
        None => SyntheticSceneSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let scene = generate_scene(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    let (cube, mask, target) = (args.out.join("cube.hsb"), args.out.join("mask.hsm"), args.out.join("target.txt"));
    write_cube(&cube, &scene.cube)?;
    write_mask(&mask, &scene.mask)?;
    write_spectrum(&target, &scene.target)?;
    eprintln!(
        "scene {}×{}×{} with {} target pixels",
        scene.cube.height(),
        scene.cube.width(),
        scene.cube.bands(),
        scene.mask.count()
    );
    let mut m = RunManifest::new("synth", Some(spec.seed), spec.pairs());
    if let Some(path) = &args.spec {
        m.input("spec", path)?;
    }
    m.output("cube", &cube)?;
    m.output("mask", &mask)?;
    m.output("target", &target)?;
    m.finish(&args.out, started)
}

fn train(args: TrainArgs) -> Outcome {
    let started = Instant::now();
    require_file(&args.cube)?;
    let mut cfg = match &args.config {
        Some(path) => {
            require_file(path)?;
            TrainConfig::read(path)?
        }
        None => TrainConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let cube = read_cube(&args.cube)?;
    cfg.model_config(cube.bands()).validate()?;
    std::fs::create_dir_all(&args.out)?;
    let (ckpt, log) = (args.out.join("model.htdm"), args.out.join("loss.csv"));
    let outputs = TrainOutputs {
        checkpoint: Some(&ckpt),
        loss_log: Some(&log),
    };
    let progress = |e: &htd_core::train::EpochLog| {
        eprintln!("epoch {:>4}  loss {:.5}  lr {:.3e}", e.epoch, e.mean_loss, e.lr);
    };
    match cfg.precision {
        Precision::F32 => train_with::<f32>(&cube, &cfg, outputs, progress).map(|_| ())?,
        Precision::F64 => train_with::<f64>(&cube, &cfg, outputs, progress).map(|_| ())?,
    }
    let mut m = RunManifest::new("train", Some(cfg.seed), cfg.pairs());
    m.input("cube", &args.cube)?;
    if let Some(path) = &args.config {
        m.input("config", path)?;
    }
    m.output("checkpoint", &ckpt)?;
    m.output("loss_log", &log)?;
    m.finish(&args.out, started)
}

fn detect_cmd(args: DetectArgs) -> Outcome {
    let started = Instant::now();
    if !(args.delta > 0.0 && args.delta.is_finite()) {
        return Err(Failure::Usage(format!("--delta must be positive, got {}", args.delta)));
    }
    for path in [&args.cube, &args.target, &args.ckpt] {
        require_file(path)?;
    }
    let cube = read_cube(&args.cube)?;
    let target = read_spectrum_for(&args.target, cube.bands())?;
    let model: Model<f64> = load_checkpoint(&args.ckpt)?;
    let map = detect(&model, &cube, &target, args.delta)?;
    std::fs::create_dir_all(&args.out)?;
    let scores = args.out.join("scores.htds");
    let grid = if args.raw { map.raw_grid() } else { map.suppressed_grid() };
    write_scores(&scores, &grid)?;
    let kind = if args.raw { "raw" } else { "suppressed" };
    let config = vec![("delta", args.delta.to_string()), ("scores", kind.to_string())];
    let mut m = RunManifest::new("detect", None, config);
    m.input("cube", &args.cube)?;
    m.input("target", &args.target)?;
    m.input("checkpoint", &args.ckpt)?;
    m.output("scores", &scores)?;
    m.finish(&args.out, started)
}

fn eval_cmd(args: EvalArgs) -> Outcome {
    let started = Instant::now();
    require_file(&args.scores)?;
    require_file(&args.mask)?;
    let grid = read_scores(&args.scores)?;
    let mask = read_mask(&args.mask)?;
    if (mask.height(), mask.width()) != (grid.height, grid.width) {
        return Err(Failure::Usage(format!(
            "score map is {}×{} but mask is {}×{}",
            grid.height,
            grid.width,
            mask.height(),
            mask.width()
        )));
    }
    let values: Vec<f64> = grid.values.iter().map(|&v| v as f64).collect();
    let scores = if args.no_normalize { values } else { normalize_scores(&values) };
    let curves = roc(&scores, mask.labels())?;
    let report = auc_all(&curves)?;
    let stats = separability_stats(&scores, mask.labels())?;
    write_reports(&args.out, &curves, &report, &stats)?;
    println!(
        "AUC(Pf,Pd) {:.6}  AUC(tau,Pd) {:.6}  AUC(tau,Pf) {:.6}  AUC_OA {:.6}  AUC_SNPR {:.4}",
        report.auc_pf_pd, report.auc_tau_pd, report.auc_tau_pf, report.auc_oa, report.auc_snpr
    );
    let config = vec![("normalize", (!args.no_normalize).to_string())];
    let mut m = RunManifest::new("eval", None, config);
    m.input("scores", &args.scores)?;
    m.input("mask", &args.mask)?;
    for name in ["roc.csv", "auc.csv", "separability.csv"] {
        m.output(name.trim_end_matches(".csv"), &args.out.join(name))?;
    }
    m.finish(&args.out, started)
}

fn verify(args: VerifyArgs) -> Outcome {
    let suites = Suite::parse_list(&args.suite)?;
    let mut all_passed = true;
    for suite in suites {
        let started = Instant::now();
        let r = suite.run(args.seed)?;
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<8} max error {:.3e} (tolerance {:.0e}, {} cases, {:.1}s)",
            r.suite,
            r.max_error,
            r.tolerance,
            r.cases,
            started.elapsed().as_secs_f64()
        );
        all_passed &= r.passed();
    }
    if all_passed {
        Ok(())
    } else {
        Err(Failure::Runtime("verification failed".into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Detect(a) => detect_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Verify(a) => verify(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
