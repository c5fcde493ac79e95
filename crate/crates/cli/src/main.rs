//! `s2d`: command-line front-end. Exit status 0 on success, 1 on usage
//! errors, 2 when input data or files are bad.

use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2d_core::backbone::{self, describe_sparse, BackboneConfig, Weights};
use s2d_core::detector::{self, HarrisParams, Keypoint};
use s2d_core::evaluator::{self, DEFAULT_THRESHOLDS};
use s2d_core::fsutil;
use s2d_core::image::{load_image, Image};
use s2d_core::matcher::{self, Aggregation, BenchConfig, MatchConfig, MatchMode};
use s2d_core::trainer::{self, synthetic_base, TrainConfig};
use s2d_core::{gradsuite, pose};

type DataResult = Result<(), Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "s2d", version, about = "Sparse-to-dense feature matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a backbone on synthetic homography pairs.
    Train(TrainArgs),
    /// Match keypoints of image A into image B.
    Match(MatchArgs),
    /// Mean matching accuracy over a sequence manifest.
    EvalMma(EvalArgs),
    /// Pose error under Gaussian noise on 2D-3D correspondences.
    PoseNoise(PoseArgs),
    /// Online timing decomposition t_A + t_B + N*K*t_C.
    BenchTime(BenchArgs),
    /// Finite-difference gradient checks of every layer and the full pipeline.
    Gradcheck(GradArgs),
    /// Harris keypoints of an image.
    Detect(DetectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    S2d,
    S2s,
}

#[derive(Clone, Copy, ValueEnum)]
enum Agg {
    Add,
    Concat,
}

fn parse_tau(s: &str) -> Result<f32, String> {
    let v: f32 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

#[derive(Args)]
struct HarrisArgs {
    #[arg(long, default_value_t = 0.05)]
    harris_k: f32,
    #[arg(long, default_value_t = 4)]
    nms_radius: usize,
    #[arg(long, default_value_t = 1000)]
    max_keypoints: usize,
    /// Relative to the strongest response.
    #[arg(long, default_value_t = 0.01)]
    min_score: f32,
}

impl HarrisArgs {
    fn params(&self) -> HarrisParams {
        HarrisParams {
            k: self.harris_k,
            nms_radius: self.nms_radius,
            max_keypoints: self.max_keypoints,
            min_score: self.min_score,
        }
    }
}

#[derive(Args)]
struct WeightArgs {
    /// Weight file; without it a seeded initialisation is used.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Topology for seeded initialisation: desk, desk2 or vgg16.
    #[arg(long, default_value = "desk")]
    backbone: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl WeightArgs {
    fn load(&self) -> Result<Weights, Box<dyn Error>> {
        match &self.weights {
            Some(p) => Ok(Weights::load(p)?),
            None => {
                let cfg = BackboneConfig::named(&self.backbone)
                    .ok_or_else(|| format!("unknown backbone '{}'", self.backbone))?;
                Ok(Weights::init(&BackboneConfig { seed: self.seed, ..cfg })?)
            }
        }
    }
}

#[derive(Args)]
struct MatchOpts {
    #[arg(long, default_value = "0.20", value_parser = parse_tau)]
    tau: f32,
    #[arg(long, value_enum, default_value = "s2d")]
    mode: Mode,
    #[arg(long, value_enum, default_value = "add")]
    aggregation: Agg,
    #[arg(long)]
    no_cyclic: bool,
    /// Chebyshev pixels allowed in the cyclic check.
    #[arg(long, default_value_t = 0)]
    cyclic_tolerance: usize,
}

impl MatchOpts {
    fn config(&self, detector: HarrisParams) -> MatchConfig {
        MatchConfig {
            tau: self.tau,
            cyclic_check: !self.no_cyclic,
            cyclic_tolerance: self.cyclic_tolerance,
            aggregation: match self.aggregation {
                Agg::Add => Aggregation::Add,
                Agg::Concat => Aggregation::Concat,
            },
            mode: mode_of(self.mode),
            detector,
        }
    }
}

fn mode_of(m: Mode) -> MatchMode {
    match m {
        Mode::S2d => MatchMode::SparseToDense,
        Mode::S2s => MatchMode::SparseToSparse,
    }
}

#[derive(Args)]
struct TrainArgs {
    /// quick (2 levels, 64 px crops), desk (3 levels, 128 px) or paper.
    #[arg(long, default_value = "quick")]
    profile: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    batch_pairs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    holdout_pairs: Option<usize>,
    /// Base images (PGM/PPM). Synthetic clutter is generated when absent.
    #[arg(long = "base")]
    bases: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output weight file.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines epoch report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-step losses, one per line.
    #[arg(long)]
    losses: Option<PathBuf>,
}

#[derive(Args)]
struct MatchArgs {
    image_a: PathBuf,
    image_b: PathBuf,
    #[command(flatten)]
    weights: WeightArgs,
    /// Keypoints of A ("x y [score]" lines); Harris is run on A otherwise.
    #[arg(long)]
    keypoints: Option<PathBuf>,
    #[command(flatten)]
    opts: MatchOpts,
    #[command(flatten)]
    harris: HarrisArgs,
    /// Match file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    manifest: PathBuf,
    #[command(flatten)]
    weights: WeightArgs,
    #[command(flatten)]
    opts: MatchOpts,
    #[command(flatten)]
    harris: HarrisArgs,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PoseArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 1.0, 2.0, 4.0, 8.0])]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Database images.
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Keypoints per database image.
    #[arg(long, default_value_t = 1000)]
    k: usize,
    /// Side of the square query and database images.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, value_enum, default_value = "s2d")]
    mode: Mode,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[command(flatten)]
    weights: WeightArgs,
    #[command(flatten)]
    harris: HarrisArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    image: PathBuf,
    #[command(flatten)]
    harris: HarrisArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Match(a) => run_match(a),
        Command::EvalMma(a) => eval_mma(a),
        Command::PoseNoise(a) => pose_noise(a),
        Command::BenchTime(a) => bench_time(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Detect(a) => detect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn write_or_print(path: Option<&Path>, text: &str) -> std::io::Result<()> {
    match path {
        Some(p) => fsutil::write_atomic_str(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

fn train(a: TrainArgs) -> DataResult {
    let mut cfg = TrainConfig::named(&a.profile).ok_or_else(|| format!("unknown profile '{}'", a.profile))?;
    cfg.seed = a.seed;
    cfg.backbone.seed = a.seed;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.steps_per_epoch {
        cfg.steps_per_epoch = v;
    }
    if let Some(v) = a.batch_pairs {
        cfg.batch_pairs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.holdout_pairs {
        cfg.holdout_pairs = v;
    }
    let bases = if a.bases.is_empty() {
        trainer::base_images(&cfg, 0)
    } else {
        a.bases.iter().map(|p| load_image(p)).collect::<Result<Vec<_>, _>>()?
    };
    println!("{:>5}  {:>10}  {:>9}  {:>6}  {:>6}  {:>6}", "epoch", "lr", "loss", "mma@1", "mma@3", "mma@5");
    let out = trainer::train(&cfg, &bases, |r| {
        println!(
            "{:>5}  {:>10.4e}  {:>9.5}  {:>6}  {:>6}  {:>6}",
            r.epoch,
            r.lr,
            r.mean_loss,
            opt(r.holdout_mma1),
            opt(r.holdout_mma3),
            opt(r.holdout_mma5)
        );
    })?;
    out.weights.save(&a.out)?;
    if let Some(p) = &a.report {
        trainer::write_report(p, &out.epochs)?;
    }
    if let Some(p) = &a.losses {
        let text: String = out.losses.iter().map(|l| format!("{l:e}\n")).collect();
        fsutil::write_atomic_str(p, &text)?;
    }
    Ok(())
}

fn keypoints_for(image: &Image, file: Option<&Path>, harris: HarrisParams) -> Result<Vec<Keypoint>, Box<dyn Error>> {
    Ok(match file {
        Some(p) => detector::import_keypoints(p, image.width, image.height)?,
        None => detector::harris(image, &harris)?,
    })
}

fn run_match(a: MatchArgs) -> DataResult {
    let weights = a.weights.load()?;
    let img_a = load_image(&a.image_a)?;
    let img_b = load_image(&a.image_b)?;
    let harris = a.harris.params();
    let kps = keypoints_for(&img_a, a.keypoints.as_deref(), harris)?;
    let matches = matcher::match_pair(&img_a, &kps, &img_b, &weights, &a.opts.config(harris))?;
    write_or_print(a.out.as_deref(), &matcher::format_matches(&matches))?;
    eprintln!("{} keypoints, {} matches", kps.len(), matches.len());
    Ok(())
}

fn eval_mma(a: EvalArgs) -> DataResult {
    let weights = a.weights.load()?;
    let text = std::fs::read_to_string(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let manifest = evaluator::parse_manifest(&text, base)?;
    let harris = a.harris.params();
    let report = evaluator::evaluate_sequences(&manifest, &weights, &a.opts.config(harris), &harris, &DEFAULT_THRESHOLDS);
    for s in &report.sequences {
        if let Some(note) = &s.skipped {
            eprintln!("skipped in {}: {}", s.name, note);
        }
    }
    println!(
        "pairs {}  mean features {}  mean matches {}",
        report.pairs,
        report.mean_features.map_or("-".into(), |v| format!("{v:.1}")),
        report.mean_matches.map_or("-".into(), |v| format!("{v:.1}"))
    );
    for (i, t) in report.thresholds.iter().enumerate() {
        let at = |v: &Option<Vec<f64>>| v.as_ref().map_or("undefined".to_string(), |v| format!("{:.3}", v[i]));
        println!("MMA@{t} = {}  (pair-averaged {})", at(&report.match_weighted), at(&report.pair_averaged));
    }
    if let Some(p) = &a.json {
        report.save(p, a.csv.as_deref())?;
    } else if let Some(p) = &a.csv {
        fsutil::write_atomic_str(p, &report.to_csv())?;
    }
    Ok(())
}

fn pose_noise(a: PoseArgs) -> DataResult {
    if a.sigmas.windows(2).any(|w| w[0] > w[1]) || a.sigmas.iter().any(|s| !(*s >= 0.0)) {
        return Err("sigmas must be non-negative and sorted ascending".into());
    }
    let r = pose::noise_sweep(a.seed, &a.sigmas, a.trials);
    println!("{:>6}  {:>12}  {:>12}  {:>12}  {:>8}  recall", "sigma", "median_pos_m", "mean_pos_m", "median_rot°", "failures");
    for s in &r.summaries {
        let f = |v: Option<f64>| v.map_or("inf".to_string(), |x| format!("{x:.3e}"));
        let recall: Vec<String> = s.recall.iter().map(|v| format!("{v:.3}")).collect();
        println!(
            "{:>6}  {:>12}  {:>12}  {:>12}  {:>8}  {}",
            s.sigma,
            f(s.median_pos_err_m),
            f(s.mean_pos_err_m),
            f(s.median_rot_err_deg),
            s.failures,
            recall.join(" ")
        );
    }
    if let Some(p) = &a.csv {
        fsutil::write_atomic_str(p, &r.to_csv())?;
    }
    if let Some(p) = &a.json {
        fsutil::write_atomic_str(p, &r.to_json())?;
    }
    Ok(())
}

fn bench_time(a: BenchArgs) -> DataResult {
    let weights = a.weights.load()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.weights.seed);
    let query = synthetic_base(a.size, a.size, &mut rng);
    // database descriptors are computed offline and not timed
    let mut database = Vec::with_capacity(a.n);
    for _ in 0..a.n {
        let img = synthetic_base(a.size, a.size, &mut rng);
        let kps: Vec<Keypoint> = (0..a.k)
            .map(|_| Keypoint::new(rng.random_range(0..a.size) as f32, rng.random_range(0..a.size) as f32, 0.0))
            .collect();
        let pyr = backbone::forward(&img, &weights)?;
        let pts: Vec<(f32, f32)> = kps.iter().map(Keypoint::xy).collect();
        let desc = describe_sparse(&pyr, &pts)?;
        database.push((kps, desc));
    }
    let cfg = BenchConfig {
        mode: mode_of(a.mode),
        repeats: a.repeats,
        detector: a.harris.params(),
    };
    let report = matcher::bench_online(&query, &database, &weights, &cfg)?;
    let json = serde_json::to_string(&report)? + "\n";
    if let Some(p) = &a.out {
        fsutil::write_atomic_str(p, &json)?;
    }
    print!("{json}");
    Ok(())
}

fn gradcheck(a: GradArgs) -> DataResult {
    let suite = gradsuite::run_suite(a.seed)?;
    for e in &suite {
        println!(
            "{:<26} max_rel_error {:.3e}  coords {:>5}  {}",
            e.name,
            e.report.max_rel_error,
            e.report.coords_checked,
            if e.report.passed { "ok" } else { "FAILED" }
        );
    }
    if let Some(p) = &a.json {
        fsutil::write_atomic_str(p, &(serde_json::to_string_pretty(&suite)? + "\n"))?;
    }
    let failed = suite.iter().filter(|e| !e.report.passed).count();
    if failed > 0 {
        return Err(format!("{failed} gradient checks failed").into());
    }
    Ok(())
}

fn detect(a: DetectArgs) -> DataResult {
    let img = load_image(&a.image)?;
    let kps = detector::harris(&img, &a.harris.params())?;
    write_or_print(a.out.as_deref(), &detector::format_keypoints(&kps))?;
    eprintln!("{} keypoints", kps.len());
    Ok(())
}
