//! `pslab`: synthetic stereo data, pseudo-image rendering, training,
//! evaluation and strategy ablations.
//!
//! Every run writes `run_manifest.json` into its output directory before
//! doing any work. `pslab replay` re-executes a manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use pslab_core::data::{
    generate_dataset, load_dataset, load_stereo_dir, read_pfm, read_png, save_dataset, write_mask_png, write_png,
    StereoPair, MANIFEST_FILE,
};
use pslab_core::eval::{evaluate, run_ablation, AblationTable};
use pslab_core::render::{generate_pseudo_pair, generate_pseudo_pair_narrow};
use pslab_core::trainer::{checkpoint_path, pairs_from_scenes, train, FINAL_STATE};
use pslab_core::{EstimatorParams, MetricReport, SceneConfig, SceneSample, Strategy, TrainConfig, TrainState};

const RUN_MANIFEST: &str = "run_manifest.json";
const METRICS_FILE: &str = "metrics.csv";
const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] pslab_core::Error),

    #[error("{0} exists and is not empty; pass --force to write into it")]
    OutDirNotEmpty(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(pslab_core::Error::Divergence { .. }) => 4,
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Core(_) | CliError::Io { .. } | CliError::Manifest { .. } => 3,
            CliError::OutDirNotEmpty(_) | CliError::Usage(_) => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "pslab",
    version,
    about = "Self-supervised stereo training with pseudo-stereo inputs"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "PSLAB_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset with exact ground truth.
    Gen(GenArgs),
    /// Render a pseudo view from an image and a disparity map.
    Render(RenderArgs),
    /// Train an estimator with one strategy.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one or more scene datasets.
    Eval(EvalArgs),
    /// Train and evaluate several strategies on the same data.
    Ablate(AblateArgs),
    /// Re-run the job recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Number of scenes.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 16.0)]
    dmax: f64,
    /// Scene `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Foreground layers per scene.
    #[arg(long, default_value_t = 3)]
    layers: usize,
    /// Integer disparities only.
    #[arg(long)]
    integer: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Reference image (PNG).
    #[arg(long)]
    left: PathBuf,
    /// Disparity aligned with the reference (PFM).
    #[arg(long)]
    disp: PathBuf,
    /// Render on the full canvas and keep the leftmost columns (wider
    /// generation); without it the right edge is hole-filled.
    #[arg(long)]
    crop_width: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Scene dataset, or a folder of `<name>_L.png` / `<name>_R.png` pairs.
    #[arg(long)]
    data: PathBuf,
    /// Strategy letter `a`..`h` or name such as `fps+wider+occ`.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// TOML training config; command-line values override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config iteration count.
    #[arg(long)]
    iterations: Option<u64>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a saved training state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Weights (`model.json`) or a training state.
    #[arg(long)]
    ckpt: PathBuf,
    /// Scene datasets; one labeled report per dataset.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Training scene dataset.
    #[arg(long)]
    data: PathBuf,
    /// Evaluation scene dataset (defaults to the training set).
    #[arg(long)]
    held_out: Option<PathBuf>,
    /// Comma-separated strategies.
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy, default_value = "a,c,e,h")]
    rows: Vec<Strategy>,
    /// Comma-separated seeds; every row runs once per seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// TOML training config shared by every row.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config iteration count.
    #[arg(long)]
    iterations: Option<u64>,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    out: OutArgs,
    /// A `run_manifest.json` written by an earlier run.
    #[arg(long)]
    manifest: PathBuf,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: pslab_core::Error| e.to_string())
}

/// Fully resolved work of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Job {
    Gen {
        scene: SceneConfig,
        seeds: Vec<u64>,
    },
    Render {
        left: PathBuf,
        disp: PathBuf,
        crop_width: Option<usize>,
    },
    Train {
        data: PathBuf,
        config: TrainConfig,
        resume: Option<PathBuf>,
    },
    Eval {
        ckpt: PathBuf,
        data: Vec<PathBuf>,
    },
    Ablate {
        data: PathBuf,
        held_out: PathBuf,
        config: TrainConfig,
        rows: Vec<Strategy>,
        seeds: Vec<u64>,
    },
}

impl Job {
    fn subcommand(&self) -> &'static str {
        match self {
            Job::Gen { .. } => "gen",
            Job::Render { .. } => "render",
            Job::Train { .. } => "train",
            Job::Eval { .. } => "eval",
            Job::Ablate { .. } => "ablate",
        }
    }

    fn seed(&self) -> u64 {
        match self {
            Job::Gen { seeds, .. } => seeds.first().copied().unwrap_or(0),
            Job::Train { config, .. } => config.seed,
            Job::Ablate { seeds, .. } => seeds.first().copied().unwrap_or(0),
            Job::Render { .. } | Job::Eval { .. } => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunManifest {
    subcommand: String,
    tool_version: String,
    seed: u64,
    out_dir: PathBuf,
    job: Job,
}

impl RunManifest {
    fn new(job: Job, out_dir: &Path) -> Self {
        RunManifest {
            subcommand: job.subcommand().into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: job.seed(),
            out_dir: out_dir.to_path_buf(),
            job,
        }
    }

    fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn absolute(path: &Path) -> CliResult<PathBuf> {
    std::path::absolute(path).map_err(|e| CliError::io(path, e))
}

/// Creates `dir`, refusing a non-empty one unless `force` is set.
fn prepare_out(dir: &Path, force: bool) -> CliResult<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(CliError::OutDirNotEmpty(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            Ok(TrainConfig::from_toml(&text)?)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn resolve(command: Command) -> CliResult<(Job, OutArgs)> {
    Ok(match command {
        Command::Gen(a) => {
            if a.count == 0 {
                return Err(CliError::Usage("--count must be at least 1".into()));
            }
            let scene = SceneConfig {
                width: a.width,
                height: a.height,
                max_disparity: a.dmax,
                num_foreground_layers: a.layers,
                integer_disparity: a.integer,
                seed: a.seed,
                ..SceneConfig::default()
            };
            scene.validate()?;
            let seeds = (0..a.count as u64).map(|i| a.seed + i).collect();
            (Job::Gen { scene, seeds }, a.out)
        }
        Command::Render(a) => (
            Job::Render {
                left: absolute(&a.left)?,
                disp: absolute(&a.disp)?,
                crop_width: a.crop_width,
            },
            a.out,
        ),
        Command::Train(a) => {
            let mut config = read_config(a.config.as_deref())?;
            if let Some(s) = a.strategy {
                config.strategy = s;
            }
            if let Some(n) = a.iterations {
                config.iterations = n;
            }
            if let Some(s) = a.seed {
                config.seed = s;
            }
            config.validate()?;
            let resume = a.resume.as_deref().map(absolute).transpose()?;
            (
                Job::Train {
                    data: absolute(&a.data)?,
                    config,
                    resume,
                },
                a.out,
            )
        }
        Command::Eval(a) => (
            Job::Eval {
                ckpt: absolute(&a.ckpt)?,
                data: a.data.iter().map(|d| absolute(d)).collect::<CliResult<_>>()?,
            },
            a.out,
        ),
        Command::Ablate(a) => {
            let mut config = read_config(a.config.as_deref())?;
            if let Some(n) = a.iterations {
                config.iterations = n;
            }
            config.validate()?;
            if a.rows.is_empty() || a.seeds.is_empty() {
                return Err(CliError::Usage("--rows and --seeds must not be empty".into()));
            }
            let data = absolute(&a.data)?;
            let held_out = a
                .held_out
                .as_deref()
                .map(absolute)
                .transpose()?
                .unwrap_or_else(|| data.clone());
            (
                Job::Ablate {
                    data,
                    held_out,
                    config,
                    rows: a.rows,
                    seeds: a.seeds,
                },
                a.out,
            )
        }
        Command::Replay(a) => (RunManifest::load(&a.manifest)?.job, a.out),
    })
}

fn load_scenes(dir: &Path) -> CliResult<Vec<SceneSample>> {
    Ok(load_dataset(dir)?.1)
}

/// Training pairs from a scene dataset or a plain stereo folder.
fn load_pairs(dir: &Path) -> CliResult<Vec<StereoPair>> {
    if dir.join(MANIFEST_FILE).exists() {
        return Ok(pairs_from_scenes(&load_scenes(dir)?));
    }
    let pairs = load_stereo_dir(dir)?.collect::<pslab_core::Result<Vec<_>>>()?;
    if pairs.is_empty() {
        return Err(CliError::Usage(format!("{} holds no stereo pairs", dir.display())));
    }
    Ok(pairs)
}

fn load_weights(path: &Path) -> CliResult<EstimatorParams> {
    match EstimatorParams::load(path) {
        Ok(p) => Ok(p),
        Err(model_err) => match TrainState::load(path) {
            Ok(s) => Ok(s.params),
            Err(_) => Err(model_err.into()),
        },
    }
}

const METRIC_HEADER: [&str; 13] = [
    "label", "scenes", "epe_all", "epe_noc", "epe_occ", "d1_all", "d1_noc", "d1_occ", "bad3_all", "bad3_noc", "n_all",
    "n_noc", "n_occ",
];

fn metrics_csv(reports: &[(String, usize, MetricReport)]) -> String {
    let mut s = METRIC_HEADER.join(",") + "\n";
    for (label, n, m) in reports {
        let cells = [
            label.clone(),
            n.to_string(),
            m.epe_all.to_string(),
            m.epe_noc.to_string(),
            m.epe_occ.to_string(),
            m.d1_all.to_string(),
            m.d1_noc.to_string(),
            m.d1_occ.to_string(),
            m.bad3_all.to_string(),
            m.bad3_noc.to_string(),
            m.n_all.to_string(),
            m.n_noc.to_string(),
            m.n_occ.to_string(),
        ];
        s += &cells.join(",");
        s.push('\n');
    }
    s
}

fn dir_label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn run_job(job: &Job, out: &Path) -> CliResult<()> {
    match job {
        Job::Gen { scene, seeds } => {
            let samples = generate_dataset(scene, seeds)?;
            save_dataset(out, scene, &samples)?;
            println!("wrote {} scenes to {}", samples.len(), out.display());
        }
        Job::Render { left, disp, crop_width } => {
            let image = read_png(left)?;
            let d = read_pfm(disp)?;
            let pair = match crop_width {
                Some(w) => generate_pseudo_pair(&image, &d, *w)?,
                None => generate_pseudo_pair_narrow(&image, &d)?,
            };
            write_png(&pair.pseudo, out.join("pseudo.png"))?;
            write_mask_png(&pair.occ, out.join("occ.png"))?;
            write_mask_png(&pair.hole_mask, out.join("holes.png"))?;
            println!(
                "rendered {}x{} pseudo view, {} occluded, {} holes",
                pair.pseudo.width(),
                pair.pseudo.height(),
                pair.occ.invert().count(),
                pair.hole_mask.invert().count()
            );
        }
        Job::Train { data, config, resume } => {
            let pairs = load_pairs(data)?;
            let first = &pairs[0].left;
            config.validate_for(first.width(), first.height())?;
            let state = match resume {
                Some(p) => TrainState::load(p)?,
                None => {
                    let s = TrainState::initial(config, &pairs)?;
                    s.save(checkpoint_path(out, 0))?;
                    s
                }
            };
            if config.iterations == 0 {
                println!("wrote initial checkpoint to {}", out.display());
                return Ok(());
            }
            let state = train(&pairs, config, state, Some(out))?;
            let last = state.history.last();
            println!(
                "trained {} to iteration {} (last loss {}), state in {}",
                config.strategy,
                state.iter,
                last.and_then(|r| r.total).map_or("n/a".into(), |t| format!("{t:.5}")),
                out.join(FINAL_STATE).display()
            );
        }
        Job::Eval { ckpt, data } => {
            let params = load_weights(ckpt)?;
            let mut reports = Vec::new();
            for dir in data {
                let scenes = load_scenes(dir)?;
                let report = evaluate(&params, &scenes)?;
                reports.push((dir_label(dir), scenes.len(), report));
            }
            let csv = metrics_csv(&reports);
            write_text(&out.join(METRICS_FILE), &csv)?;
            print!("{csv}");
        }
        Job::Ablate {
            data,
            held_out,
            config,
            rows,
            seeds,
        } => {
            let pairs = load_pairs(data)?;
            let eval_scenes = load_scenes(held_out)?;
            let first = &pairs[0].left;
            for &strategy in rows {
                TrainConfig {
                    strategy,
                    ..config.clone()
                }
                .validate_for(first.width(), first.height())?;
            }
            let mut table = AblationTable::default();
            for &seed in seeds {
                let base = TrainConfig { seed, ..config.clone() };
                table.rows.extend(run_ablation(&pairs, &eval_scenes, &base, rows).rows);
            }
            write_text(&out.join(ABLATION_FILE), &table.to_csv_string()?)?;
            print!("{}", table.format());
        }
    }
    Ok(())
}

fn configure_threads(threads: Option<usize>) -> CliResult<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads(cli.threads)?;
    let (job, out) = resolve(cli.command)?;
    prepare_out(&out.out, out.force)?;
    let manifest = RunManifest::new(job, &absolute(&out.out)?);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(&out.out.join(RUN_MANIFEST), &(text + "\n"))?;
    run_job(&manifest.job, &out.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
