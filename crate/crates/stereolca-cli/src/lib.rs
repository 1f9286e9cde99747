//! Command-line orchestration of the stereo sparse-coding pipeline.
//!
//! One binary, eight subcommands: `gen`, `train`, `encode`, `tune`,
//! `infer`, `scale-infer`, `analyze`, `predict-error`. Every command takes
//! a JSON config file (`--config`) whose fields individual flags override;
//! flags win. Logs are line-oriented JSON on stderr; artifacts land on
//! disk with provenance (config hash, input digests) in their sidecars.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical
//! divergence.

pub mod analyze;
pub mod codes;
pub mod gen;
pub mod infer;
pub mod predict_error;
pub mod provenance;
pub mod scale_infer;
pub mod train;
pub mod tune;

use std::ffi::OsString;
use std::path::Path;

use clap::Parser;
use serde::de::DeserializeOwned;
use stereolca::datagen::{entry_path, load_pair, DatasetManifest, LabelGrid, ManifestEntry};
use stereolca::imagecore::{NormalizedPair, Preprocess};
use stereolca::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// Pipeline scalar for all CLI workflows. Artifacts store f32, so running
/// the whole pipeline in f32 keeps every save/load round trip lossless
/// (checkpoint resume replays bit-exactly).
pub type Px = f32;

#[derive(Parser)]
#[command(name = "stereolca", version, about = "Convolutional stereo sparse coding workflows")]
struct Cli {
    /// Worker threads (results never depend on this, only wall time).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand)]
enum Command {
    /// Synthesize a stimulus database (disparity, surface, or vergence).
    Gen(gen::GenArgs),
    /// Learn a dictionary on a dataset.
    Train(train::TrainArgs),
    /// Sparse-code a dataset and dump code tensors.
    Encode(codes::EncodeArgs),
    /// Estimate activation tuning maps.
    Tune(tune::TuneArgs),
    /// Infer labels on a dataset and evaluate errors.
    Infer(infer::InferArgs),
    /// Scale-space disparity inference on a full scene.
    #[command(name = "scale-infer")]
    ScaleInfer(scale_infer::ScaleInferArgs),
    /// Kernel statistics: Gabor fits, dominance, shifts, types.
    Analyze(analyze::AnalyzeArgs),
    /// Build or query the activity-based error predictor.
    #[command(name = "predict-error")]
    PredictError(predict_error::PredictErrorArgs),
}

/// Parses arguments, dispatches, and maps errors to exit codes.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Some(workers) = cli.workers {
        // Global pool; later calls in the same process keep the first
        // setting, which is fine since results are worker-independent.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    let outcome = match &cli.command {
        Command::Gen(a) => gen::run(a),
        Command::Train(a) => train::run(a),
        Command::Encode(a) => codes::run(a),
        Command::Tune(a) => tune::run(a),
        Command::Infer(a) => infer::run(a),
        Command::ScaleInfer(a) => scale_infer::run(a),
        Command::Analyze(a) => analyze::run(a),
        Command::PredictError(a) => predict_error::run(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log_event(&serde_json::json!({"event": "error", "detail": e.to_string()}));
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_DATA,
    }
}

/// One JSON line on stderr.
pub fn log_event(event: &serde_json::Value) {
    eprintln!("{event}");
}

/// Loads a JSON config file, or the default when no path is given.
pub fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| {
                Error::InvalidArgument(format!("cannot read config {}: {e}", p.display()))
            })?;
            serde_json::from_slice(&bytes)
                .map_err(|e| Error::InvalidArgument(format!("bad config {}: {e}", p.display())))
        }
    }
}

/// A dataset loaded into memory with retinal preprocessing applied.
pub struct LoadedDataset {
    pub grid: Option<LabelGrid>,
    pub entries: Vec<ManifestEntry>,
    /// Grid index per entry (`None` for unlabeled entries).
    pub label_indices: Vec<Option<usize>>,
    pub pairs: Vec<NormalizedPair<Px>>,
}

/// Loads and preprocesses a dataset directory (parallel, order stable).
pub fn load_dataset(
    dir: &Path,
    pre: &Preprocess,
    limit: Option<usize>,
) -> Result<LoadedDataset> {
    use rayon::prelude::*;
    let manifest = DatasetManifest::load(dir)?;
    let mut entries = manifest.entries;
    if let Some(limit) = limit {
        entries.truncate(limit);
    }
    if entries.is_empty() {
        return Err(Error::InvalidData(format!(
            "dataset {} holds no entries",
            dir.display()
        )));
    }
    let label_indices: Vec<Option<usize>> = entries
        .iter()
        .map(|e| match (&manifest.grid, &e.label) {
            (Some(grid), Some(label)) => grid.index_of(label).map(Some).ok_or_else(|| {
                Error::InvalidData(format!("label {label:?} of {} not on the grid", e.path))
            }),
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<NormalizedPair<Px>> = entries
        .par_iter()
        .map(|e| {
            let pair = load_pair::<Px>(entry_path(dir, e))?;
            pre.apply(&pair)
        })
        .collect::<Result<_>>()?;
    Ok(LoadedDataset {
        grid: manifest.grid,
        entries,
        label_indices,
        pairs,
    })
}

/// Path next to a tensor artifact: `dir/name.lcat` plus suffix `log.json`
/// becomes `dir/name.log.json`.
pub fn tensor_adjacent(path: &Path, suffix: &str) -> std::path::PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("artifact");
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Deterministic per-entry seed derived from the run seed and indices.
pub fn entry_seed(root: u64, a: u64, b: u64) -> u64 {
    let mut x = root ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finalizer.
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
