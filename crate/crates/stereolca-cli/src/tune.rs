//! `tune`: estimates activation tuning maps from a labeled dataset.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use stereolca::imagecore::Preprocess;
use stereolca::lca::{binarize, encode, Dictionary, LcaConfig};
use stereolca::readout::{TuningAccumulator, TuningMaps, TuningMode};
use stereolca::{Error, Result};

use crate::{load_dataset, log_event, provenance, Px};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SmoothSpec {
    pub degree: usize,
    pub width: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub dataset: PathBuf,
    pub dictionary: PathBuf,
    /// Tuning-table output file.
    pub out: PathBuf,
    pub mode: TuningMode,
    /// Feature-map cells discarded at each border (shared mode).
    pub margin: usize,
    /// Cell region around the fixation point (per-location mode).
    pub region: (usize, usize),
    pub lca: LcaConfig,
    pub preprocess: Preprocess,
    pub limit: Option<usize>,
    /// Savitzky-Golay smoothing along the grid axes (per-location surface
    /// maps only).
    pub smooth: Option<SmoothSpec>,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            dataset: PathBuf::from("dataset"),
            dictionary: PathBuf::from("dictionary.lcat"),
            out: PathBuf::from("tuning.lcat"),
            mode: TuningMode::Shared,
            margin: 1,
            region: (7, 7),
            lca: LcaConfig::default(),
            preprocess: Preprocess::default(),
            limit: None,
            smooth: None,
        }
    }
}

#[derive(clap::Args, Debug)]
pub struct TuneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub dictionary: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = ["shared", "per_location"])]
    pub mode: Option<String>,
    #[arg(long)]
    pub margin: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Smooth per-location maps: degree,width (e.g. "3,5").
    #[arg(long)]
    pub smooth: Option<String>,
}

fn merge(args: &TuneArgs) -> Result<TuneConfig> {
    let mut cfg: TuneConfig = crate::load_config(args.config.as_deref())?;
    if let Some(v) = &args.dataset {
        cfg.dataset = v.clone();
    }
    if let Some(v) = &args.dictionary {
        cfg.dictionary = v.clone();
    }
    if let Some(v) = &args.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &args.mode {
        cfg.mode = if v == "shared" {
            TuningMode::Shared
        } else {
            TuningMode::PerLocation
        };
    }
    if let Some(v) = args.margin {
        cfg.margin = v;
    }
    if let Some(v) = args.lambda {
        cfg.lca.lambda = v;
    }
    if let Some(v) = args.limit {
        cfg.limit = Some(v);
    }
    if let Some(v) = &args.smooth {
        let parts: Vec<&str> = v.split(',').collect();
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad --smooth spec {v:?}")))
        };
        if parts.len() != 2 {
            return Err(Error::InvalidArgument(format!("bad --smooth spec {v:?}")));
        }
        cfg.smooth = Some(SmoothSpec {
            degree: parse(parts[0])?,
            width: parse(parts[1])?,
        });
    }
    Ok(cfg)
}

pub fn run(args: &TuneArgs) -> Result<()> {
    let cfg = merge(args)?;
    let dict = Dictionary::<Px>::load(&cfg.dictionary)?;
    let data = load_dataset(&cfg.dataset, &cfg.preprocess, cfg.limit)?;
    let grid = data.grid.clone().ok_or_else(|| {
        Error::InvalidData("tuning estimation needs a labeled dataset with a grid".into())
    })?;

    // Binarized codes in dataset order; degenerate pairs carry no code.
    let coded: Vec<Option<ndarray::Array3<u8>>> = data
        .pairs
        .par_iter()
        .map(|norm| {
            if norm.degenerate {
                return Ok(None);
            }
            let code = encode(&norm.pair, &dict, &cfg.lca)?;
            Ok(Some(binarize(&code)))
        })
        .collect::<Result<_>>()?;

    let mut acc = match cfg.mode {
        TuningMode::Shared => TuningAccumulator::shared(dict.k(), grid.clone(), cfg.margin),
        TuningMode::PerLocation => {
            TuningAccumulator::per_location(dict.k(), grid.clone(), cfg.region)
        }
    };
    for (i, bits) in coded.iter().enumerate() {
        let (Some(bits), Some(label)) = (bits, data.label_indices[i]) else {
            continue;
        };
        acc.add(label, &bits.view())?;
    }
    let maps: TuningMaps<Px> = acc.finish()?;
    let maps = match cfg.smooth {
        Some(s) => maps.smoothed(s.degree, s.width)?,
        None => maps,
    };

    let prov = provenance::provenance(
        &cfg,
        &[
            ("manifest", &cfg.dataset.join("manifest.json")),
            ("dictionary", &cfg.dictionary),
        ],
    )?;
    maps.save(
        &cfg.out,
        serde_json::json!({
            "stride": dict.stride(),
            "kernel_size": dict.kernel_size(),
            "lambda": cfg.lca.lambda,
            "margin": cfg.margin,
            "provenance": prov,
        }),
    )?;
    log_event(&serde_json::json!({
        "event": "tuned",
        "out": cfg.out.display().to_string(),
        "labels": grid.len(),
        "kernels": dict.k(),
    }));
    Ok(())
}
