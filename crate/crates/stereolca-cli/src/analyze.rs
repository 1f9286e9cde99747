//! `analyze`: kernel statistics as JSON lines (one record per kernel),
//! with a type census and, when per-location surface tuning maps are
//! given, the tilt-vs-orientation circular correlation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use stereolca::analysis::{
    analyze_dictionary, orientation_tilt_correlation, AnalyzeOptions, FitOptions,
};
use stereolca::datagen::LabelGrid;
use stereolca::lca::Dictionary;
use stereolca::readout::{TuningMaps, TuningMode};
use stereolca::{Error, Result};

use crate::{load_config, log_event, provenance, Px};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    pub dictionary: PathBuf,
    /// Shared disparity tuning maps (feed the tuned-inhibitory rule).
    pub tuning: Option<PathBuf>,
    /// Per-location surface tuning maps (enable the tilt correlation).
    pub surface_tuning: Option<PathBuf>,
    /// Output JSONL file.
    pub out: PathBuf,
    pub r2_min: f64,
    pub theta_locked: bool,
    pub min_n: Option<f64>,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            dictionary: PathBuf::from("dictionary.lcat"),
            tuning: None,
            surface_tuning: None,
            out: PathBuf::from("kernel_stats.jsonl"),
            r2_min: 0.93,
            theta_locked: false,
            min_n: None,
        }
    }
}

#[derive(clap::Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dictionary: Option<PathBuf>,
    #[arg(long)]
    pub tuning: Option<PathBuf>,
    #[arg(long)]
    pub surface_tuning: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub r2_min: Option<f64>,
    #[arg(long)]
    pub theta_locked: bool,
    #[arg(long)]
    pub min_n: Option<f64>,
}

fn merge(args: &AnalyzeArgs) -> Result<AnalyzeConfig> {
    let mut cfg: AnalyzeConfig = load_config(args.config.as_deref())?;
    if let Some(v) = &args.dictionary {
        cfg.dictionary = v.clone();
    }
    if let Some(v) = &args.tuning {
        cfg.tuning = Some(v.clone());
    }
    if let Some(v) = &args.surface_tuning {
        cfg.surface_tuning = Some(v.clone());
    }
    if let Some(v) = &args.out {
        cfg.out = v.clone();
    }
    if let Some(v) = args.r2_min {
        cfg.r2_min = v;
    }
    if args.theta_locked {
        cfg.theta_locked = true;
    }
    if let Some(v) = args.min_n {
        cfg.min_n = Some(v);
    }
    Ok(cfg)
}

/// Tilt angle (radians) of the most likely non-fronto-parallel label at
/// the central cell of a per-location surface tuning table.
fn center_tilt_mode(tuning: &TuningMaps<Px>, kernel: usize) -> Option<f64> {
    let LabelGrid::Surface(grid) = tuning.grid() else {
        return None;
    };
    let (rr, cc) = tuning.region();
    let (r0, c0) = (rr / 2, cc / 2);
    let tilts = grid.tilts();
    let n_tilt = tilts.len();
    let mut best = (0usize, f64::MIN);
    for g in 1..tuning.grid().len() {
        let p = stereolca::scalar::to_f64(tuning.prob_at(kernel, r0, c0, g));
        if p > best.1 {
            best = (g, p);
        }
    }
    let tilt_idx = (best.0 - 1) % n_tilt;
    Some(tilts[tilt_idx].to_radians())
}

pub fn run(args: &AnalyzeArgs) -> Result<()> {
    let cfg = merge(args)?;
    let dict = Dictionary::<Px>::load(&cfg.dictionary)?;
    let tuning = match &cfg.tuning {
        None => None,
        Some(path) => Some(TuningMaps::<Px>::load(path)?),
    };
    let opts = AnalyzeOptions {
        fit: FitOptions {
            theta_locked: cfg.theta_locked,
            min_n: cfg.min_n,
            ..FitOptions::default()
        },
        r2_min: cfg.r2_min,
    };
    let stats = analyze_dictionary(&dict, tuning.as_ref(), &opts)?;

    let mut inputs: Vec<(&str, &std::path::Path)> = vec![("dictionary", cfg.dictionary.as_path())];
    if let Some(p) = &cfg.tuning {
        inputs.push(("tuning", p.as_path()));
    }
    if let Some(p) = &cfg.surface_tuning {
        inputs.push(("surface_tuning", p.as_path()));
    }
    let prov = provenance::provenance(&cfg, &inputs)?;

    // Optional tilt-mode column from per-location surface maps.
    let surface = match &cfg.surface_tuning {
        None => None,
        Some(path) => {
            let maps = TuningMaps::<Px>::load(path)?;
            if maps.mode() != TuningMode::PerLocation {
                return Err(Error::InvalidData(
                    "surface tuning must be a per-location table".into(),
                ));
            }
            if maps.k() != dict.k() {
                return Err(Error::InvalidData(format!(
                    "surface tuning built for {} kernels, dictionary has {}",
                    maps.k(),
                    dict.k()
                )));
            }
            Some(maps)
        }
    };

    let mut lines = String::new();
    let mut census = std::collections::BTreeMap::<String, usize>::new();
    let mut orientations = vec![];
    let mut tilt_modes = vec![];
    for s in &stats {
        let mut row = serde_json::to_value(s).expect("stats serialize");
        if let Some(maps) = &surface {
            if let Some(tilt) = center_tilt_mode(maps, s.index) {
                row.as_object_mut()
                    .expect("stats rows are objects")
                    .insert("center_tilt_mode_rad".into(), serde_json::json!(tilt));
                // Pair with the better-fit half's orientation under the
                // quality cut.
                let fit = match (&s.fit_left, &s.fit_right) {
                    (Some(l), Some(r)) => Some(if l.r2 >= r.r2 { l } else { r }),
                    (Some(l), None) => Some(l),
                    (None, Some(r)) => Some(r),
                    (None, None) => None,
                };
                if let Some(f) = fit {
                    if f.r2 > cfg.r2_min {
                        orientations.push(f.orientation);
                        tilt_modes.push(tilt);
                    }
                }
            }
        }
        lines.push_str(&serde_json::to_string(&row).expect("stats serialize"));
        lines.push('\n');
        *census.entry(format!("{:?}", s.kernel_type)).or_default() += 1;
    }
    std::fs::write(&cfg.out, lines).map_err(|e| Error::Io {
        path: cfg.out.clone(),
        source: e,
    })?;

    let mut summary = serde_json::json!({
        "kernels": stats.len(),
        "census": census,
        "provenance": prov,
    });
    if orientations.len() >= 3 {
        let rho = orientation_tilt_correlation(&orientations, &tilt_modes)?;
        summary
            .as_object_mut()
            .expect("summary is an object")
            .insert("tilt_orientation_rho_cc".into(), serde_json::json!(rho));
    }
    let summary_path = crate::tensor_adjacent(&cfg.out, "summary.json");
    std::fs::write(
        &summary_path,
        format!("{}\n", serde_json::to_string_pretty(&summary).expect("summary serializes")),
    )
    .map_err(|e| Error::Io {
        path: summary_path,
        source: e,
    })?;

    log_event(&serde_json::json!({
        "event": "analyzed",
        "kernels": stats.len(),
        "census": summary["census"],
    }));
    Ok(())
}
