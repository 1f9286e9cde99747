//! `encode`: sparse-codes a dataset and dumps activation tensors and
//! bit-packed binary codes.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use stereolca::imagecore::Preprocess;
use stereolca::lca::{binarize, encode, Dictionary, LcaConfig};
use stereolca::scalar::to_f64;
use stereolca::{tensor, Error, Result};

use crate::{load_dataset, log_event, provenance, Px};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodeConfig {
    pub dataset: PathBuf,
    pub dictionary: PathBuf,
    /// Output directory for code dumps.
    pub out: PathBuf,
    pub lca: LcaConfig,
    pub preprocess: Preprocess,
    pub limit: Option<usize>,
    /// Write `code_*.lcat` activation tensors (K x M x N f32).
    pub write_activations: bool,
    /// Write `code_*.bits.lcat` bit-packed binary codes.
    pub write_bits: bool,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        EncodeConfig {
            dataset: PathBuf::from("dataset"),
            dictionary: PathBuf::from("dictionary.lcat"),
            out: PathBuf::from("codes"),
            lca: LcaConfig::default(),
            preprocess: Preprocess::default(),
            limit: None,
            write_activations: true,
            write_bits: true,
        }
    }
}

#[derive(clap::Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub dictionary: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub limit: Option<usize>,
}

fn merge(args: &EncodeArgs) -> Result<EncodeConfig> {
    let mut cfg: EncodeConfig = crate::load_config(args.config.as_deref())?;
    if let Some(v) = &args.dataset {
        cfg.dataset = v.clone();
    }
    if let Some(v) = &args.dictionary {
        cfg.dictionary = v.clone();
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
    Ok(cfg)
}

pub fn run(args: &EncodeArgs) -> Result<()> {
    let cfg = merge(args)?;
    let dict = Dictionary::<Px>::load(&cfg.dictionary)?;
    let data = load_dataset(&cfg.dataset, &cfg.preprocess, cfg.limit)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Io {
        path: cfg.out.clone(),
        source: e,
    })?;
    let prov = provenance::provenance(
        &cfg,
        &[
            ("manifest", &cfg.dataset.join("manifest.json")),
            ("dictionary", &cfg.dictionary),
        ],
    )?;

    let index: Vec<serde_json::Value> = data
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, norm)| {
            let entry = &data.entries[i];
            if norm.degenerate {
                return Ok(serde_json::json!({
                    "source": entry.path,
                    "degenerate": true,
                }));
            }
            let code = encode(&norm.pair, &dict, &cfg.lca)?;
            let geom = *code.geometry();
            let dims = [geom.k, geom.map_h, geom.map_w];
            let mut files = vec![];
            if cfg.write_activations {
                let name = format!("code_{i:05}.lcat");
                let values: Vec<f32> = code
                    .activations()
                    .iter()
                    .map(|&v| to_f64(v) as f32)
                    .collect();
                tensor::write_f32(cfg.out.join(&name), &dims, &values)?;
                tensor::write_sidecar(
                    cfg.out.join(&name),
                    &serde_json::json!({
                        "kind": "activations",
                        "source": entry.path,
                        "label": entry.label,
                        "lambda": cfg.lca.lambda,
                        "stride": geom.stride,
                        "provenance": prov,
                    }),
                )?;
                files.push(name);
            }
            if cfg.write_bits {
                let name = format!("code_{i:05}.bits.lcat");
                let bits = binarize(&code);
                let bools: Vec<bool> =
                    bits.as_slice().expect("contiguous").iter().map(|&b| b != 0).collect();
                tensor::write_bits(cfg.out.join(&name), &dims, &bools)?;
                files.push(name);
            }
            Ok(serde_json::json!({
                "source": entry.path,
                "label": entry.label,
                "active": code.active_count(),
                "files": files,
            }))
        })
        .collect::<Result<_>>()?;

    let index_path = cfg.out.join("codes_index.json");
    let payload = serde_json::json!({"codes": index, "provenance": prov});
    std::fs::write(
        &index_path,
        format!("{}\n", serde_json::to_string_pretty(&payload).expect("index serializes")),
    )
    .map_err(|e| Error::Io {
        path: index_path,
        source: e,
    })?;
    log_event(&serde_json::json!({"event": "encoded", "pairs": data.pairs.len()}));
    Ok(())
}
