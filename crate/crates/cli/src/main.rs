//! `xview`: toy data, polar warping, training, evaluation and synthesis.
//!
//! Errors print as one line, `error[<kind>]: <message>`, and set the exit
//! code: 1 for usage and configuration problems, 2 for unreadable or
//! inconsistent data, 3 for failures during computation.

mod figure;
mod overrides;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use xview::checkpoint::Checkpoint;
use xview::data::load_manifest;
use xview::eval::{self, MatchingRule, RecallReport, SynthesisReport};
use xview::model::Networks;
use xview::toy::{make_toy_dataset, ToyConfig};
use xview::trainer::Trainer;
use xview::{polar_transform, Error, OutOfBounds, PolarParams, RasterImage, ValueRange};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    fn kind(&self) -> (&'static str, u8) {
        match self {
            CliError::Usage(_) => ("usage", 1),
            CliError::Core(e) => match e {
                Error::Config(_) | Error::InvalidArgument(_) => ("usage", 1),
                Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::Checkpoint { .. } | Error::Json(_) => ("data", 2),
                Error::Shape { .. } | Error::NonFinite(_) | Error::Tensor(_) => ("runtime", 3),
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "xview", version, about = "Satellite-to-street synthesis and cross-view retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fabricate a seeded toy corpus of paired satellite images and panoramas.
    MakeToyData(ToyArgs),
    /// Warp a square satellite PNG into a panorama-shaped strip.
    Polar(PolarArgs),
    /// Train from a manifest, or resume from a checkpoint.
    Train(TrainArgs),
    /// Recall and synthesis metrics of a checkpoint on a split.
    Eval(EvalArgs),
    /// Generate panoramas and comparison strips from satellite images.
    Synthesize(SynthArgs),
}

#[derive(Args)]
struct ToyArgs {
    /// Corpus root; pairs land in `<out>/<split>`.
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs (at least 1).
    #[arg(long)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "train")]
    split: String,
    /// Side of the square satellite images in pixels.
    #[arg(long, default_value_t = 32)]
    sat_size: usize,
    /// Panorama height in pixels.
    #[arg(long, default_value_t = 16)]
    height: usize,
    /// Panorama width in pixels.
    #[arg(long, default_value_t = 88)]
    width: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Oob {
    Clamp,
    Zero,
}

impl From<Oob> for OutOfBounds {
    fn from(o: Oob) -> Self {
        match o {
            Oob::Clamp => OutOfBounds::Clamp,
            Oob::Zero => OutOfBounds::Zero,
        }
    }
}

#[derive(Args)]
struct PolarArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Output height in pixels.
    #[arg(long, default_value_t = 112)]
    height: usize,
    /// Output width in pixels.
    #[arg(long, default_value_t = 616)]
    width: usize,
    /// Treatment of samples falling outside the input.
    #[arg(long, value_enum, default_value = "clamp")]
    out_of_bounds: Oob,
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest CSV.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the config echo, metrics log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// TOML config file; missing keys take their defaults.
    #[arg(long, conflicts_with = "resume")]
    config: Option<PathBuf>,
    /// `key=value` override applied after the config file, e.g.
    /// `--set optimizer.learning_rate=0.0002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", conflicts_with = "resume")]
    overrides: Vec<String>,
    /// Overrides `seed` after `--set`.
    #[arg(long, conflicts_with = "resume")]
    seed: Option<u64>,
    /// Overrides `total_steps`; also extends a resumed run.
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from a checkpoint, reusing its config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest CSV of the evaluation split.
    #[arg(long)]
    data: PathBuf,
    /// Count any gallery item within this many meters as a match instead
    /// of requiring the same pair.
    #[arg(long)]
    radius: Option<f64>,
    /// Recall cut-offs.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    ks: Vec<usize>,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-image synthesis records as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Manifest CSV; its panoramas become the ground-truth column.
    #[arg(long, required_unless_present = "inputs", conflicts_with = "inputs")]
    data: Option<PathBuf>,
    /// Satellite PNGs, named in the output by file stem.
    inputs: Vec<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    let outcome = match cli.command {
        Command::MakeToyData(a) => make_toy_data(a),
        Command::Polar(a) => polar(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::Synthesize(a) => synthesize(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = e.kind();
            eprintln!("error[{kind}]: {}", e.to_string().replace('\n', " "));
            ExitCode::from(code)
        }
    }
}

fn make_toy_data(a: ToyArgs) -> Result<()> {
    if a.pairs == 0 {
        return Err(CliError::Usage("--pairs must be at least 1".into()));
    }
    let cfg = ToyConfig::new(PolarParams::new(a.sat_size, a.height, a.width));
    let manifest = make_toy_dataset(&a.out, &a.split, a.pairs, &cfg, a.seed)?;
    println!("{}", manifest.root.join("manifest.csv").display());
    Ok(())
}

fn polar(a: PolarArgs) -> Result<()> {
    let img = RasterImage::load_png(&a.input)?;
    if img.height() != img.width() {
        return Err(Error::Data(format!("{}: input is {}x{}, not square", a.input.display(), img.height(), img.width())).into());
    }
    let params = PolarParams::new(img.width(), a.height, a.width);
    polar_transform(&img, &params, a.out_of_bounds.into())?.save_png(&a.output)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let dev = Device::Cpu;
    let manifest = load_manifest(&a.data)?;
    create_dir(&a.out)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path, &dev)?;
            let g = ck.meta.config.geometry;
            let pairs = manifest.load_pairs((g.polar_height, g.polar_width))?;
            let data = xview::trainer::prepare_all(&ck.meta.config, &pairs)?;
            log::info!("resuming {} at step {}", path.display(), ck.meta.step);
            Trainer::resume(&ck, a.steps, data, &dev)?
        }
        None => {
            let mut cfg = overrides::resolve(a.config.as_deref(), &a.overrides)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(s) = a.steps {
                cfg.total_steps = s;
            }
            let g = cfg.geometry;
            let pairs = manifest.load_pairs((g.polar_height, g.polar_width))?;
            Trainer::new(cfg, &pairs, &dev)?
        }
    };
    let cfg = trainer.config();
    write_file(&a.out.join("config.toml"), cfg.to_toml_string().as_bytes())?;
    log::info!("seed {} config {}", cfg.seed, cfg.hash());
    trainer = trainer.with_output_dir(&a.out);
    trainer.run()?;
    println!("{}", a.out.join("final.ckpt").display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint_step: u64,
    config_hash: String,
    retrieval: RecallReport,
    synthesis: SynthesisReport,
    /// The polar images scored as if they were generated.
    polar_baseline: SynthesisReport,
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let dev = Device::Cpu;
    let ck = Checkpoint::load(&a.checkpoint, &dev)?;
    let cfg = &ck.meta.config;
    let nets = Networks::from_checkpoint(&ck, &dev)?;
    let pairs = load_manifest(&a.data)?.load_pairs((cfg.geometry.polar_height, cfg.geometry.polar_width))?;
    let rule = match a.radius {
        Some(meters) => MatchingRule::WithinRadius { meters },
        None => MatchingRule::ExactId,
    };
    let retrieval = eval::evaluate_retrieval(&nets, cfg, &pairs, rule, &a.ks)?;
    let (synthesis, _) = eval::evaluate_generator(&nets, cfg, &pairs)?;
    let polar_baseline = eval::evaluate_polar_baseline(cfg, &pairs)?;
    if let Some(path) = &a.csv {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        for r in &synthesis.records {
            w.serialize(r).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    let report = EvalReport {
        checkpoint_step: ck.meta.step,
        config_hash: ck.meta.config_hash.clone(),
        retrieval,
        synthesis,
        polar_baseline,
    };
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    match &a.out {
        Some(path) => write_file(path, json.as_bytes())?,
        None => println!("{json}"),
    }
    Ok(())
}

/// One synthesis job: an id, the satellite image and an optional target.
struct Item {
    id: String,
    satellite: RasterImage,
    target: Option<RasterImage>,
}

fn synthesize(a: SynthArgs) -> Result<()> {
    let dev = Device::Cpu;
    let ck = Checkpoint::load(&a.checkpoint, &dev)?;
    let cfg = &ck.meta.config;
    let g = cfg.geometry;
    let nets = Networks::from_checkpoint(&ck, &dev)?;
    let items: Vec<Item> = match &a.data {
        Some(manifest) => load_manifest(manifest)?
            .load_pairs((g.polar_height, g.polar_width))?
            .into_iter()
            .map(|p| Item {
                id: p.id,
                satellite: p.satellite,
                target: Some(p.street),
            })
            .collect(),
        None => a
            .inputs
            .iter()
            .map(|path| {
                let id = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .ok_or_else(|| CliError::Usage(format!("{}: no file name", path.display())))?;
                Ok(Item {
                    id,
                    satellite: RasterImage::load_png(path)?,
                    target: None,
                })
            })
            .collect::<Result<_>>()?,
    };
    let mut polar = Vec::with_capacity(items.len());
    for it in &items {
        let s = &it.satellite;
        if (s.height(), s.width()) != (g.sat_height, g.sat_width) {
            return Err(Error::Data(format!(
                "{}: satellite is {}x{}, the checkpoint expects {}x{}",
                it.id,
                s.height(),
                s.width(),
                g.sat_height,
                g.sat_width
            ))
            .into());
        }
        polar.push(polar_transform(s, &g, cfg.data.out_of_bounds)?.to_rgb().to_range(ValueRange::Signed));
    }
    let generated = nets.synthesize(&polar)?;
    let (pano_dir, grid_dir) = (a.out.join("panoramas"), a.out.join("grids"));
    create_dir(&pano_dir)?;
    create_dir(&grid_dir)?;
    for ((it, p), gen) in items.iter().zip(&polar).zip(&generated) {
        gen.save_png(pano_dir.join(format!("{}.png", it.id)))?;
        let mut panels = vec![&it.satellite, p, gen];
        if let Some(t) = &it.target {
            panels.push(t);
        }
        let path = grid_dir.join(format!("{}.png", it.id));
        figure::strip(&panels).save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
    }
    println!("{}", a.out.display());
    Ok(())
}
