//! Command-line entry points.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O or data
//! format error, 4 non-finite numbers during training or inference. Every
//! successful command prints one JSON manifest line on stdout.

mod plot;

pub use plot::plot_series;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{
    area_series, dominant_lag, high_freq_energy, mean_frame_dsc, predict_video, shuffle_report, spectrum,
    DEFAULT_CUTOFF,
};
use crate::error::{Error, Result};
use crate::ingest::{open_dataset, Dataset, LoadedVideo, Split};
use crate::metrics::{evaluate_split, OraclePredictor};
use crate::model::{Checkpoint, ClipPredictor};
use crate::parallel;
use crate::phantom::{derive_specs, export_sparse, generate_phantom, PhantomSpec, SplitRatios};
use crate::train::{finetune, init_model, pretrain, RunOptions, Stage, TrainConfig, BEST_CHECKPOINT};
use crate::types::{ClipSpec, RandomSource};

pub const DATA_ENV: &str = "LVSEG_DATA";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "lvseg", version, about = "Sparse-label echocardiogram video segmentation")]
struct Cli {
    /// Worker threads for data loading and batched compute.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Reconstruction pre-training.
    Pretrain(TrainArgs),
    /// Sparse-label fine-tuning.
    Finetune(FinetuneArgs),
    /// Anchor-frame DSC report for one split.
    Eval(EvalArgs),
    /// Area series, spectra, plots and the shuffle probe.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long = "h", default_value_t = 64)]
    height: usize,
    #[arg(long = "w", default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 100)]
    length: usize,
    /// Frames per beat.
    #[arg(long, default_value_t = 20.0)]
    period: f64,
    #[arg(long, default_value_t = 0.5)]
    area_ratio: f64,
    #[arg(long, default_value_t = 0.3)]
    speckle: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.15)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0.15)]
    test_fraction: f64,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset root; falls back to `LVSEG_DATA`.
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Zero wall-clock fields so artifacts are byte-identical across reruns.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Starting checkpoint; its head is replaced when it is not a
    /// segmentation head.
    #[arg(long)]
    init: Option<PathBuf>,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse::<Split>().map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Score stored ground truth instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    oracle: bool,
    /// Clip frames and stride for `--oracle` runs.
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, default_value_t = 1)]
    period: usize,
    #[arg(long, value_parser = parse_split, default_value = "TEST")]
    split: Split,
    /// Output stem; `.csv` and `.json` are appended.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Analyse one video instead of the whole split.
    #[arg(long)]
    video: Option<String>,
    #[arg(long, value_parser = parse_split, default_value = "TEST")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// High-frequency cutoff in cycles per frame.
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
    #[serde(skip_serializing_if = "Value::is_null")]
    outputs: Value,
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn emit(command: &str, seed: u64, config_hash: String, outputs: Value) {
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config_hash,
        outputs,
    };
    println!("{}", serde_json::to_string(&m).expect("manifest serialises"));
}

/// Exit status for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::Csv(_) | Error::Format(_) | Error::MalformedRow { .. } | Error::MissingColumn(_) => {
            EXIT_IO
        }
        Error::MissingVideo(_) | Error::AnnotationCount { .. } | Error::FrameCountMismatch { .. } => EXIT_IO,
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn load_data(root: &Path) -> Result<Dataset> {
    if !root.exists() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found")));
    }
    Dataset::load(&open_dataset(root)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::invalid(format!("checkpoint not found: {}", path.display())));
    }
    Checkpoint::load(path)
}

fn synth(a: &SynthArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::invalid("--count must be at least 1"));
    }
    let template = PhantomSpec {
        height: a.height,
        width: a.width,
        length: a.length,
        period: a.period,
        area_ratio: a.area_ratio,
        speckle_sigma: a.speckle,
        seed: a.seed,
    };
    template.validate()?;
    let ratios = SplitRatios {
        train: 1.0 - a.val_fraction - a.test_fraction,
        val: a.val_fraction,
        test: a.test_fraction,
    };
    if !(a.val_fraction >= 0.0 && a.test_fraction >= 0.0 && ratios.train > 0.0) {
        return Err(Error::config("val_fraction/test_fraction", "must be non-negative and leave a training share"));
    }
    let phantoms = parallel::map_slice(&derive_specs(&template, a.count), generate_phantom)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    export_sparse(&phantoms, &a.out, ratios)?;
    let hash = sha256_hex(&serde_json::to_vec(&json!({"template": template, "count": a.count, "ratios": ratios})).expect("serialises"));
    emit("synth", a.seed, hash, json!({ "out": a.out, "count": a.count }));
    Ok(())
}

fn read_config(a: &TrainArgs, stage: Stage) -> Result<TrainConfig> {
    if !a.config.is_file() {
        return Err(Error::invalid(format!("config file not found: {}", a.config.display())));
    }
    let mut cfg = TrainConfig::load(&a.config)?;
    if cfg.stage != stage {
        return Err(Error::config("stage", format!("config is for {}, command is {}", cfg.stage.as_str(), stage.as_str())));
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.deterministic |= a.deterministic;
    Ok(cfg)
}

fn train_command(a: &TrainArgs, stage: Stage, init: Option<&Path>) -> Result<()> {
    let cfg = read_config(a, stage)?;
    let init = init.map(load_checkpoint).transpose()?;
    let data = load_data(&a.data.data)?;
    let first = data
        .split(Split::Train)
        .first()
        .map(|v| (v.video.height(), v.video.width()))
        .ok_or_else(|| Error::invalid("dataset has no training videos"))?;
    let model = init_model(&cfg, first.0, first.1, init)?;
    mkdir(&a.out)?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml_string())?;
    let echo = |r: &crate::model::EpochSummary| {
        eprintln!("{}", serde_json::to_string(r).expect("summary serialises"));
    };
    let opts = RunOptions {
        out_dir: Some(&a.out),
        on_epoch: Some(&echo),
    };
    let out = match stage {
        Stage::Pretrain => pretrain(model, &data, &cfg, &opts)?,
        Stage::Finetune => finetune(model, &data, &cfg, &opts)?,
    };
    let last = out.history.last().expect("at least one epoch");
    emit(
        stage.as_str(),
        cfg.seed,
        cfg.hash(),
        json!({
            "out": a.out,
            "epochs": out.history.len(),
            "final_loss": last.loss,
            "best_checkpoint": a.out.join(BEST_CHECKPOINT),
        }),
    );
    Ok(())
}

fn split_videos<'a>(data: &'a Dataset, split: Split) -> Result<Vec<&'a LoadedVideo>> {
    let v = data.split(split);
    if v.is_empty() {
        return Err(Error::invalid(format!("split {} is empty", split.as_str())));
    }
    Ok(v)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let data = load_data(&a.data.data)?;
    let videos = split_videos(&data, a.split)?;
    let rng = RandomSource::new(a.seed);
    let (report, hash) = if a.oracle {
        let spec = ClipSpec::new(a.frames, a.period)?;
        let oracle = OraclePredictor::new(&videos);
        let hash = sha256_hex(format!("oracle:{}:{}", a.frames, a.period).as_bytes());
        (evaluate_split(&oracle, &videos, &spec, &data.normalization, &rng)?, hash)
    } else {
        let path = a.checkpoint.as_deref().expect("clap requires --checkpoint");
        let ck = load_checkpoint(path)?;
        let spec = ck.clip_spec()?;
        let hash = sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?);
        (evaluate_split(&ck.model, &videos, &spec, &ck.normalization, &rng)?, hash)
    };
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    report.write(&a.report)?;
    emit(
        "eval",
        a.seed,
        hash,
        json!({
            "split": a.split.as_str(),
            "report": a.report,
            "overall": report.overall,
            "ed": report.ed,
            "es": report.es,
        }),
    );
    Ok(())
}

#[derive(Serialize)]
struct VideoAnalysis {
    video_id: String,
    frames: usize,
    high_freq_energy: f64,
    dominant_bin: usize,
    dominant_lag: Option<usize>,
    mean_frame_dsc: Option<f64>,
}

fn analyze_video(
    model: &dyn ClipPredictor,
    v: &LoadedVideo,
    spec: &ClipSpec,
    ck: &Checkpoint,
    a: &AnalyzeArgs,
) -> Result<VideoAnalysis> {
    let id = &v.entry.video_id;
    let pred = predict_video(model, v, spec, &ck.normalization)?;
    let areas = area_series(&pred);
    let truth_areas = v.dense.as_ref().map(|d| area_series(d));
    let mut series = String::from(if truth_areas.is_some() { "frame,pred_area,true_area\n" } else { "frame,pred_area\n" });
    for (i, p) in areas.iter().enumerate() {
        match &truth_areas {
            Some(t) => writeln!(series, "{i},{p},{}", t[i]),
            None => writeln!(series, "{i},{p}"),
        }
        .expect("string write");
    }
    write_text(&a.out.join("series").join(format!("{id}.csv")), &series)?;

    let (hfe, dominant_bin) = if areas.len() >= 2 {
        let s = spectrum(&areas)?;
        let mut rows = String::from("bin,frequency,magnitude\n");
        for (k, m) in s.one_sided().iter().enumerate() {
            writeln!(rows, "{k},{:.6},{m:.6}", s.frequency(k)).expect("string write");
        }
        write_text(&a.out.join("spectra").join(format!("{id}.csv")), &rows)?;
        (high_freq_energy(&areas, a.cutoff)?, s.dominant_bin())
    } else {
        (0.0, 0)
    };

    let mut plotted: Vec<&[f64]> = vec![&areas];
    if let Some(t) = &truth_areas {
        plotted.push(t);
    }
    plot_series(&a.out.join("plots").join(format!("{id}.png")), &plotted)?;

    Ok(VideoAnalysis {
        video_id: id.clone(),
        frames: areas.len(),
        high_freq_energy: hfe,
        dominant_bin,
        dominant_lag: dominant_lag(&areas, 2, areas.len() / 2),
        mean_frame_dsc: v.dense.as_ref().map(|d| mean_frame_dsc(&pred, d)).transpose()?,
    })
}

fn analyze(a: &AnalyzeArgs) -> Result<()> {
    if !(a.cutoff > 0.0 && a.cutoff <= 0.5) {
        return Err(Error::config("cutoff", "must lie in (0, 0.5]"));
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let spec = ck.clip_spec()?;
    let data = load_data(&a.data.data)?;
    let videos: Vec<&LoadedVideo> = match &a.video {
        Some(id) => vec![data.find(id).ok_or_else(|| Error::invalid(format!("no video `{id}` in the dataset")))?],
        None => split_videos(&data, a.split)?,
    };
    for sub in ["series", "spectra", "plots"] {
        mkdir(&a.out.join(sub))?;
    }
    let per_video = videos
        .iter()
        .map(|v| analyze_video(&ck.model, v, &spec, &ck, a))
        .collect::<Result<Vec<_>>>()?;
    let summary_path = a.out.join("summary.json");
    write_text(&summary_path, &(serde_json::to_string_pretty(&per_video).expect("serialises") + "\n"))?;

    let annotated: Vec<&LoadedVideo> = videos.iter().copied().filter(|v| !v.entry.annotated.is_empty()).collect();
    let shuffle = if annotated.is_empty() {
        None
    } else {
        let s = shuffle_report(&ck.model, &annotated, &spec, &ck.normalization, &RandomSource::new(a.seed))?;
        let p = a.out.join("shuffle.json");
        write_text(&p, &(serde_json::to_string_pretty(&s).expect("serialises") + "\n"))?;
        Some(s)
    };
    let hash = sha256_hex(&fs::read(&a.checkpoint).map_err(|e| Error::io(&a.checkpoint, e))?);
    emit(
        "analyze",
        a.seed,
        hash,
        json!({
            "out": a.out,
            "videos": per_video.len(),
            "shuffle": shuffle.map(|s| json!({
                "mean_ordered": s.mean_ordered,
                "mean_shuffled": s.mean_shuffled,
                "mean_delta": s.mean_delta,
            })),
        }),
    );
    Ok(())
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    parallel::init_workers(cli.workers);
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => train_command(a, Stage::Pretrain, None),
        Command::Finetune(a) => train_command(&a.train, Stage::Finetune, a.init.as_deref()),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
