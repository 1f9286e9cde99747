//! `predict-error`: builds the activity-based error predictor from
//! inference samples, or queries an existing one.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use stereolca::analysis::{build_error_predictor, ErrorPredictor};
use stereolca::{Error, Result};

use crate::{load_config, log_event, provenance};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictErrorConfig {
    /// `samples.csv` from the `infer` command (needs `active_count` and
    /// `abs_err` columns).
    pub samples: PathBuf,
    /// Predictor output (JSON).
    pub out: PathBuf,
    pub min_per_bin: usize,
    pub percentiles: Vec<f64>,
}

impl Default for PredictErrorConfig {
    fn default() -> Self {
        PredictErrorConfig {
            samples: PathBuf::from("inference/samples.csv"),
            out: PathBuf::from("predictor.json"),
            min_per_bin: 100,
            percentiles: vec![50.0, 75.0, 80.0],
        }
    }
}

#[derive(clap::Args, Debug)]
pub struct PredictErrorArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub min_per_bin: Option<usize>,
    /// Query an existing predictor instead of building one.
    #[arg(long)]
    pub query: Option<u32>,
    /// Percentile for --query.
    #[arg(long, default_value_t = 75.0)]
    pub percentile: f64,
    /// Predictor file for --query.
    #[arg(long)]
    pub predictor: Option<PathBuf>,
}

/// Reads `(active_count, abs_err)` pairs out of an infer samples CSV.
pub fn read_samples(path: &std::path::Path) -> Result<Vec<(u32, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty samples file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let find = |name: &str| {
        cols.iter()
            .position(|&c| c == name)
            .ok_or_else(|| Error::format(path, format!("samples file lacks column {name:?}")))
    };
    let ci_count = find("active_count")?;
    let ci_err = find("abs_err")?;
    let mut out = vec![];
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parse_err = || Error::format(path, format!("bad sample row {}", ln + 2));
        let count: u32 = fields
            .get(ci_count)
            .and_then(|s| s.parse().ok())
            .ok_or_else(parse_err)?;
        let err: f64 = fields
            .get(ci_err)
            .and_then(|s| s.parse().ok())
            .ok_or_else(parse_err)?;
        out.push((count, err));
    }
    Ok(out)
}

pub fn run(args: &PredictErrorArgs) -> Result<()> {
    if let Some(count) = args.query {
        let path = args
            .predictor
            .clone()
            .ok_or_else(|| Error::InvalidArgument("--query needs --predictor".into()))?;
        let predictor = ErrorPredictor::load(&path)?;
        let value = predictor.predict(count, args.percentile)?;
        println!(
            "{}",
            serde_json::json!({
                "active_count": count,
                "percentile": args.percentile,
                "predicted_error": value,
            })
        );
        return Ok(());
    }

    let mut cfg: PredictErrorConfig = load_config(args.config.as_deref())?;
    if let Some(v) = &args.samples {
        cfg.samples = v.clone();
    }
    if let Some(v) = &args.out {
        cfg.out = v.clone();
    }
    if let Some(v) = args.min_per_bin {
        cfg.min_per_bin = v;
    }

    let samples = read_samples(&cfg.samples)?;
    let predictor = build_error_predictor(&samples, cfg.min_per_bin, &cfg.percentiles)?;
    let prov = provenance::provenance(&cfg, &[("samples", cfg.samples.as_path())])?;
    let mut value = serde_json::to_value(&predictor).expect("predictor serializes");
    value
        .as_object_mut()
        .expect("predictor is an object")
        .insert("provenance".into(), prov);
    std::fs::write(
        &cfg.out,
        format!("{}\n", serde_json::to_string_pretty(&value).expect("predictor serializes")),
    )
    .map_err(|e| Error::Io {
        path: cfg.out.clone(),
        source: e,
    })?;
    log_event(&serde_json::json!({
        "event": "predictor_built",
        "samples": samples.len(),
        "bins": predictor.bins.len(),
    }));
    Ok(())
}
