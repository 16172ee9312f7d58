//! Command-line entry point: generate synthetic samples, train, predict
//! and evaluate on fundus datasets.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;

use vessel_synth::config::{to_config_string, DatasetVariant, RunConfig};
use vessel_synth::dataio::{
    load_color, load_drive, load_stare, predict_image, preprocess, save_image, save_mask, save_prob_map,
    write_manifest, BitDepth, FundusCase, GrayMode, LoadOptions, ManifestEntry, ManifestSource,
};
use vessel_synth::eval::{report_csv, roc_csv, ImageReport};
use vessel_synth::nn::{gradcheck, Checkpoint, GeneratedSource, Network, SampleSource, Trainer};
use vessel_synth::rng::derive_seed;
use vessel_synth::{make_sample, DataError, EvalError, GenerateError, NnError};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "vessel-synth", version, about = "Synthetic vessel images and a small segmentation network")]
struct Cli {
    /// TOML run config; values not given fall back to the variant defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (also seeds training).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for per-sample work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Run everything on one thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Synthetic dataset variant whose defaults are used.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<DatasetVariant>,
    #[command(subcommand)]
    command: Command,
}

fn parse_variant(s: &str) -> Result<DatasetVariant, String> {
    let n: u8 = s.parse().map_err(|_| format!("expected 1 or 2, got {s}"))?;
    DatasetVariant::try_from(n)
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic samples and a manifest.
    Gen {
        #[arg(long)]
        count: u64,
        #[arg(long, value_enum, default_value_t = ImageFormat::Png)]
        format: ImageFormat,
    },
    /// Train a network on generated (default) or materialized samples.
    Train {
        /// Train from a manifest written by `gen` instead of on the fly.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write probability maps for fundus images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        prep: Preprocessing,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Evaluate a checkpoint on a DRIVE or STARE directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        kind: DatasetKind,
        #[command(flatten)]
        prep: Preprocessing,
        /// Binarization threshold for Sn/Sp/Acc.
        #[arg(long)]
        threshold: Option<f32>,
        /// ROC with a K-point threshold grid instead of every distinct value.
        #[arg(long)]
        roc_grid: Option<usize>,
    },
    /// Run the finite-difference gradient checks.
    Gradcheck,
}

#[derive(Args, Debug)]
struct Preprocessing {
    /// Reflect the input so the map covers the whole image.
    #[arg(long)]
    mirror_pad: bool,
    /// Feed the grayscale image without inversion.
    #[arg(long)]
    no_invert: bool,
    #[arg(long, value_enum)]
    gray_mode: Option<GrayArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ImageFormat {
    Png,
    Pgm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DatasetKind {
    Drive,
    Stare,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GrayArg {
    Luma,
    Green,
}

/// Error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

impl Failure {
    fn data(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_DATA, error: error.into() }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Self::data(e)
    }
}

impl From<NnError> for Failure {
    fn from(e: NnError) -> Self {
        let code = match e {
            NnError::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Self { code, error: e.into() }
    }
}

impl From<GenerateError> for Failure {
    fn from(e: GenerateError) -> Self {
        Self::data(e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Self::data(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::data(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = if cli.deterministic { 1 } else { cli.threads };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::data(anyhow!(e)))?;

    let mut rc = RunConfig::resolve_file(cli.variant, cli.config.as_deref()).map_err(|e| Failure {
        code: EXIT_USAGE,
        error: e.into(),
    })?;
    if let Some(seed) = cli.seed {
        rc.seed = seed;
        rc.training.seed = seed;
    }
    apply_overrides(&mut rc, &cli.command);

    let out = &cli.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = to_config_string(&rc).map_err(|e| Failure::data(anyhow!(e)))?;
    fs::write(out.join("config.toml"), text).with_context(|| format!("writing config into {}", out.display()))?;
    fs::write(out.join("VERSION"), format!("vessel-synth {VERSION}\n"))
        .with_context(|| format!("writing version into {}", out.display()))?;

    match cli.command {
        Command::Gen { count, format } => cmd_gen(&rc, count, format, out),
        Command::Train { manifest, resume, .. } => cmd_train(&rc, manifest.as_deref(), resume.as_deref(), out),
        Command::Predict { checkpoint, images, .. } => cmd_predict(&rc, &checkpoint, &images, out),
        Command::Eval { checkpoint, dataset, kind, .. } => cmd_eval(&rc, &checkpoint, &dataset, kind, out),
        Command::Gradcheck => cmd_gradcheck(rc.seed),
    }
}

/// Command flags win over file values; they are folded into the run
/// config so the written config describes the run exactly.
fn apply_overrides(rc: &mut RunConfig, cmd: &Command) {
    let prep = match cmd {
        Command::Train { iterations: Some(n), .. } => {
            rc.training.iterations = *n;
            None
        }
        Command::Predict { prep, .. } => Some(prep),
        Command::Eval { prep, threshold, roc_grid, .. } => {
            if let Some(t) = threshold {
                rc.evaluation.threshold = *t;
            }
            if let Some(k) = roc_grid {
                rc.evaluation.roc_grid = *k;
            }
            Some(prep)
        }
        _ => None,
    };
    if let Some(p) = prep {
        rc.evaluation.mirror_pad |= p.mirror_pad;
        if p.no_invert {
            rc.evaluation.invert = false;
        }
        match p.gray_mode {
            Some(GrayArg::Luma) => rc.evaluation.gray_mode = GrayMode::Luma,
            Some(GrayArg::Green) => rc.evaluation.gray_mode = GrayMode::Green,
            None => {}
        }
    }
}

fn cmd_gen(rc: &RunConfig, count: u64, format: ImageFormat, out: &Path) -> Result<(), Failure> {
    let ext = match format {
        ImageFormat::Png => "png",
        ImageFormat::Pgm => "pgm",
    };
    let entries = (0..count)
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry, Failure> {
            let seed = derive_seed(rc.seed, i);
            let sample = make_sample(&rc.generator, &rc.noise, seed)?;
            let image = PathBuf::from(format!("{seed}_img.{ext}"));
            let label = PathBuf::from(format!("{seed}_lbl.{ext}"));
            save_image(&out.join(&image), &sample.image, BitDepth::Eight)?;
            save_mask(&out.join(&label), &sample.label)?;
            Ok(ManifestEntry { index: i, seed, image, label, label_fraction: sample.label.fraction() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = out.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    info!("wrote {count} samples (variant {}) and {}", rc.variant, manifest.display());
    Ok(())
}

fn cmd_train(rc: &RunConfig, manifest: Option<&Path>, resume: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let mut source: Box<dyn SampleSource> = match manifest {
        Some(m) => Box::new(ManifestSource::open(m)?),
        None => Box::new(GeneratedSource { generator: rc.generator.clone(), noise: rc.noise.clone() }),
    };
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::<f32>::load(path)?;
            if ckpt.network.spec() != &rc.network {
                return Err(Failure::data(anyhow!("{} was trained with a different network spec", path.display())));
            }
            info!("resuming {} at iteration {}", path.display(), ckpt.iteration);
            Trainer::resume(ckpt, rc.training.clone())
        }
        None => Trainer::new(Network::<f32>::new(rc.network.clone(), rc.training.seed)?, rc.training.clone()),
    };
    let log = trainer.run(source.as_mut(), Some(out))?;
    if let Some(last) = log.losses.last() {
        info!("iteration {} loss {:.5}", last.0, last.1);
    }
    println!("{}", out.join("final.ckpt").display());
    Ok(())
}

fn load_options(rc: &RunConfig) -> LoadOptions {
    LoadOptions {
        gray_mode: rc.evaluation.gray_mode,
        invert: rc.evaluation.invert,
        fov_threshold: rc.evaluation.stare_fov_threshold,
    }
}

fn cmd_predict(
    rc: &RunConfig,
    checkpoint: &Path,
    images: &[PathBuf],
    out: &Path,
) -> Result<(), Failure> {
    let net = Checkpoint::<f32>::load(checkpoint)?.network;
    let opts = load_options(rc);
    images.par_iter().try_for_each(|path| -> Result<(), Failure> {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        let gray = preprocess(&id, &load_color(path)?, opts.gray_mode, opts.invert)?;
        let prob = predict_image(&net, &gray, rc.evaluation.mirror_pad)?;
        let target = out.join(format!("{id}_prob.png"));
        save_prob_map(&target, &prob)?;
        info!("{} -> {}", path.display(), target.display());
        Ok(())
    })
}

fn cmd_eval(
    rc: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    kind: DatasetKind,
    out: &Path,
) -> Result<(), Failure> {
    let net = Checkpoint::<f32>::load(checkpoint)?.network;
    let opts = load_options(rc);
    let cases: Vec<FundusCase> = match kind {
        DatasetKind::Drive => load_drive(dataset, &opts)?,
        DatasetKind::Stare => load_stare(dataset, &opts)?,
    };
    if cases.is_empty() {
        return Err(Failure::data(anyhow!("no cases found under {}", dataset.display())));
    }
    let prob_dir = out.join("prob");
    let roc_dir = out.join("roc");
    for d in [&prob_dir, &roc_dir] {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let ev = &rc.evaluation;
    let reports = cases
        .par_iter()
        .map(|case| -> Result<ImageReport, Failure> {
            let prob = predict_image(&net, &case.image, ev.mirror_pad)?;
            let (w, h) = prob.dims();
            let truth = case.truth.center_crop(w, h).map_err(EvalError::from)?;
            let fov = case.fov.center_crop(w, h).map_err(EvalError::from)?;
            let (report, curve) = ImageReport::evaluate(&case.id, &prob, &truth, &fov, ev.threshold, ev.strategy())?;
            save_prob_map(&prob_dir.join(format!("{}.png", case.id)), &prob)?;
            if let Some(c) = curve {
                let p = roc_dir.join(format!("{}.csv", case.id));
                fs::write(&p, roc_csv(&c)).with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(report)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let csv = report_csv(&reports);
    let path = out.join("report.csv");
    fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    print!("{csv}");
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<(), Failure> {
    let checks = gradcheck::run_all(seed);
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(Failure { code: EXIT_NUMERIC, error: anyhow!("{failed} gradient checks failed") });
    }
    Ok(())
}
