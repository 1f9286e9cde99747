//! `infer`: naïve Bayes readout over a labeled dataset, with per-location
//! samples (CSV) and summary errors (JSON).

use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use stereolca::analysis::mae;
use stereolca::datagen::{Label, LabelGrid};
use stereolca::imagecore::Preprocess;
use stereolca::lca::{binarize, encode, Dictionary, LcaConfig};
use stereolca::readout::{infer_map, TuningMaps, TuningMode};
use stereolca::{tensor, Error, Result};

use crate::{load_dataset, log_event, provenance, Px};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub dataset: PathBuf,
    pub dictionary: PathBuf,
    pub tuning: PathBuf,
    /// Output directory (samples.csv, summary.json, optional maps).
    pub out: PathBuf,
    pub lca: LcaConfig,
    pub preprocess: Preprocess,
    pub limit: Option<usize>,
    /// Readout-block positions discarded at each feature-map border when
    /// collecting evaluation samples.
    pub eval_margin: usize,
    /// Also write per-image argmax label maps as tensors.
    pub write_maps: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            dataset: PathBuf::from("dataset"),
            dictionary: PathBuf::from("dictionary.lcat"),
            tuning: PathBuf::from("tuning.lcat"),
            out: PathBuf::from("inference"),
            lca: LcaConfig::default(),
            preprocess: Preprocess::default(),
            limit: None,
            eval_margin: 1,
            write_maps: false,
        }
    }
}

#[derive(clap::Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub dictionary: Option<PathBuf>,
    #[arg(long)]
    pub tuning: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub write_maps: bool,
}

fn merge(args: &InferArgs) -> Result<InferConfig> {
    let mut cfg: InferConfig = crate::load_config(args.config.as_deref())?;
    if let Some(v) = &args.dataset {
        cfg.dataset = v.clone();
    }
    if let Some(v) = &args.dictionary {
        cfg.dictionary = v.clone();
    }
    if let Some(v) = &args.tuning {
        cfg.tuning = v.clone();
    }
    if let Some(v) = &args.out {
        cfg.out = v.clone();
    }
    if let Some(v) = args.lambda {
        cfg.lca.lambda = v;
    }
    if let Some(v) = args.limit {
        cfg.limit = Some(v);
    }
    if args.write_maps {
        cfg.write_maps = true;
    }
    Ok(cfg)
}

/// Rejects artifact combinations whose recorded metadata disagrees.
fn check_compat(dict: &Dictionary<Px>, tuning: &TuningMaps<Px>, cfg: &InferConfig) -> Result<()> {
    if tuning.mode() != TuningMode::Shared {
        return Err(Error::InvalidData(
            "label-map inference needs shared tuning maps".into(),
        ));
    }
    if tuning.k() != dict.k() {
        return Err(Error::InvalidData(format!(
            "tuning table built for {} kernels, dictionary has {}",
            tuning.k(),
            dict.k()
        )));
    }
    let meta = tensor::read_sidecar(&cfg.tuning)?;
    if let Some(stride) = meta.get("stride").and_then(|v| v.as_u64()) {
        if stride as usize != dict.stride() {
            return Err(Error::InvalidData(format!(
                "tuning table recorded stride {stride}, dictionary uses {}",
                dict.stride()
            )));
        }
    }
    Ok(())
}

pub struct EvalOutputs {
    pub overall_mae: f64,
    pub mean_active: f64,
    pub samples: usize,
}

pub fn run(args: &InferArgs) -> Result<()> {
    let cfg = merge(args)?;
    let dict = Dictionary::<Px>::load(&cfg.dictionary)?;
    let tuning = TuningMaps::<Px>::load(&cfg.tuning)?;
    check_compat(&dict, &tuning, &cfg)?;

    let data = load_dataset(&cfg.dataset, &cfg.preprocess, cfg.limit)?;
    let grid = data
        .grid
        .clone()
        .ok_or_else(|| Error::InvalidData("inference evaluation needs a labeled dataset".into()))?;
    if grid != *tuning.grid() {
        return Err(Error::InvalidData(
            "dataset grid differs from the tuning table's grid".into(),
        ));
    }
    let labels = grid.labels();

    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Io {
        path: cfg.out.clone(),
        source: e,
    })?;

    // Per image: (truth, est, active) samples from interior block positions.
    struct ImageResult {
        rows: Vec<(usize, [f64; 2], [f64; 2], u32, f64)>,
        map: Option<(Vec<f32>, (usize, usize))>,
    }
    let results: Vec<Option<ImageResult>> = data
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, norm)| {
            let Some(truth_idx) = data.label_indices[i] else {
                return Ok(None);
            };
            if norm.degenerate {
                return Ok(None);
            }
            let code = encode(&norm.pair, &dict, &cfg.lca)?;
            let bits = binarize(&code);
            let map = infer_map(&bits.view(), &tuning)?;
            let (mh, mw) = map.dims();
            let m = cfg.eval_margin;
            if mh <= 2 * m || mw <= 2 * m {
                return Err(Error::InvalidData(format!(
                    "eval margin {m} leaves no blocks of a {mh}x{mw} label map"
                )));
            }
            let truth = labels[truth_idx].as_vec2();
            let mut rows = vec![];
            for r in m..mh - m {
                for c in m..mw - m {
                    let est_idx = map.label_indices[(r, c)];
                    let est = labels[est_idx].as_vec2();
                    let err =
                        ((est[0] - truth[0]).powi(2) + (est[1] - truth[1]).powi(2)).sqrt();
                    rows.push((i, truth, est, map.active_counts[(r, c)], err));
                }
            }
            let map_out = cfg.write_maps.then(|| {
                let values: Vec<f32> = map
                    .label_indices
                    .iter()
                    .map(|&idx| idx as f32)
                    .collect();
                (values, (mh, mw))
            });
            Ok(Some(ImageResult { rows, map: map_out }))
        })
        .collect::<Result<_>>()?;

    let mut csv = String::from("image,truth_a,truth_b,est_a,est_b,active_count,abs_err\n");
    let mut est_all = vec![];
    let mut truth_all = vec![];
    let mut active_sum = 0u64;
    let mut per_label: Vec<(usize, Vec<f64>)> = (0..labels.len()).map(|_| (0, vec![])).collect();
    for (i, res) in results.iter().enumerate() {
        let Some(res) = res else { continue };
        for &(img, truth, est, active, err) in &res.rows {
            writeln!(
                csv,
                "{img},{},{},{},{},{active},{err}",
                truth[0], truth[1], est[0], est[1]
            )
            .expect("string write");
            est_all.push(est);
            truth_all.push(truth);
            active_sum += active as u64;
            if let Some(t) = data.label_indices[i] {
                per_label[t].0 += 1;
                per_label[t].1.push(err);
            }
        }
        if let Some((values, (mh, mw))) = &res.map {
            tensor::write_f32(
                cfg.out.join(format!("map_{i:05}.lcat")),
                &[*mh, *mw],
                values,
            )?;
        }
    }
    if est_all.is_empty() {
        return Err(Error::InvalidData("no labeled samples to evaluate".into()));
    }

    let overall = mae(&est_all, &truth_all)?;
    let prov = provenance::provenance(
        &cfg,
        &[
            ("manifest", &cfg.dataset.join("manifest.json")),
            ("dictionary", &cfg.dictionary),
            ("tuning", &cfg.tuning),
        ],
    )?;
    let per_label_json: Vec<serde_json::Value> = per_label
        .iter()
        .enumerate()
        .map(|(idx, (n, errs))| {
            let mean = if *n > 0 {
                errs.iter().sum::<f64>() / *n as f64
            } else {
                f64::NAN
            };
            serde_json::json!({
                "label": labels[idx],
                "samples": n,
                "mae": if mean.is_nan() { serde_json::Value::Null } else { serde_json::json!(mean) },
            })
        })
        .collect();
    let summary = serde_json::json!({
        "samples": est_all.len(),
        "overall_mae": overall,
        "mean_active": active_sum as f64 / est_all.len() as f64,
        "lambda": cfg.lca.lambda,
        "per_label": per_label_json,
        "provenance": prov,
    });

    let csv_path = cfg.out.join("samples.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::Io {
        path: csv_path,
        source: e,
    })?;
    let summary_path = cfg.out.join("summary.json");
    std::fs::write(
        &summary_path,
        format!("{}\n", serde_json::to_string_pretty(&summary).expect("summary serializes")),
    )
    .map_err(|e| Error::Io {
        path: summary_path,
        source: e,
    })?;

    log_event(&serde_json::json!({
        "event": "inferred",
        "samples": est_all.len(),
        "overall_mae": overall,
    }));
    Ok(())
}

/// Label helper shared with tests: the vector form of a grid label.
pub fn label_vec(label: &Label) -> [f64; 2] {
    label.as_vec2()
}

/// Convenience for tests: the grid of a dataset directory.
pub fn dataset_grid(dir: &std::path::Path) -> Result<Option<LabelGrid>> {
    Ok(stereolca::datagen::DatasetManifest::load(dir)?.grid)
}
