//! `train`: dictionary learning on a dataset, with per-epoch energy logs,
//! optional checkpointing, and deterministic resume.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use stereolca::imagecore::Preprocess;
use stereolca::lca::{learn, Dictionary, LcaConfig, LearnConfig, TrainLog};
use stereolca::{tensor, Error, Result};

use crate::{load_dataset, log_event, provenance, Px};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    /// Dictionary output file.
    pub out: PathBuf,
    pub k: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lca: LcaConfig,
    pub preprocess: Preprocess,
    /// Use only the first N dataset entries.
    pub limit: Option<usize>,
    /// Write a checkpoint every N epochs.
    pub checkpoint_every: Option<usize>,
    /// Resume from a checkpoint written by this command.
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: PathBuf::from("dataset"),
            out: PathBuf::from("dictionary.lcat"),
            k: 64,
            kernel_size: 16,
            stride: 8,
            learning_rate: 0.2,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            lca: LcaConfig::default(),
            preprocess: Preprocess::default(),
            limit: None,
            checkpoint_every: None,
            resume: None,
        }
    }
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn merge(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = crate::load_config(args.config.as_deref())?;
    if let Some(v) = &args.dataset {
        cfg.dataset = v.clone();
    }
    if let Some(v) = &args.out {
        cfg.out = v.clone();
    }
    if let Some(v) = args.k {
        cfg.k = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.lambda {
        cfg.lca.lambda = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.limit {
        cfg.limit = Some(v);
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = Some(v);
    }
    if let Some(v) = &args.resume {
        cfg.resume = Some(v.clone());
    }
    Ok(cfg)
}

fn checkpoint_path(out: &std::path::Path, epoch: usize) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("dictionary");
    out.with_file_name(format!("{stem}.ckpt{epoch:04}.lcat"))
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let cfg = merge(args)?;
    let data = load_dataset(&cfg.dataset, &cfg.preprocess, cfg.limit)?;
    let skipped = data.pairs.iter().filter(|p| p.degenerate).count();
    if skipped > 0 {
        log_event(&serde_json::json!({"event": "skip_degenerate", "count": skipped}));
    }
    let pairs: Vec<_> = data
        .pairs
        .iter()
        .filter(|p| !p.degenerate)
        .map(|p| p.pair.clone())
        .collect();

    let lcfg = LearnConfig {
        k: cfg.k,
        kernel_size: cfg.kernel_size,
        stride: cfg.stride,
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };

    let (init, start_epoch) = match &cfg.resume {
        None => (None, 0),
        Some(path) => {
            // Bit-exact resume: keep the stored weights untouched.
            let dict = Dictionary::<Px>::load_exact(path)?;
            let meta = tensor::read_sidecar(path)?;
            let done = meta
                .get("epochs_done")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::format(path, "checkpoint lacks \"epochs_done\""))?;
            if dict.k() != cfg.k || dict.stride() != cfg.stride {
                return Err(Error::InvalidData(format!(
                    "checkpoint geometry (K={}, stride={}) differs from config (K={}, stride={})",
                    dict.k(),
                    dict.stride(),
                    cfg.k,
                    cfg.stride
                )));
            }
            (Some(dict), done as usize)
        }
    };

    let prov = provenance::provenance(&cfg, &[("manifest", &cfg.dataset.join("manifest.json"))])?;
    let ckpt_meta = |epochs_done: usize| {
        serde_json::json!({
            "lambda_train": cfg.lca.lambda,
            "epochs_done": epochs_done,
            "provenance": prov,
        })
    };

    let mut ckpt_err: Option<Error> = None;
    let outcome = learn::<Px>(&pairs, &lcfg, &cfg.lca, init, start_epoch, |epoch, dict| {
        log_event(&serde_json::json!({
            "event": "epoch",
            "epoch": epoch.epoch,
            "mean_residual": epoch.mean_residual,
            "mean_count": epoch.mean_count,
            "mean_total": epoch.mean_total,
            "mean_descent": epoch.mean_descent,
        }));
        if let Some(every) = cfg.checkpoint_every {
            let done = epoch.epoch + 1;
            if every > 0 && done % every == 0 && done < cfg.epochs && ckpt_err.is_none() {
                if let Err(e) = dict.save(checkpoint_path(&cfg.out, done), ckpt_meta(done)) {
                    ckpt_err = Some(e);
                }
            }
        }
    });
    if let Some(e) = ckpt_err {
        return Err(e);
    }
    let (dict, log): (Dictionary<Px>, TrainLog) = outcome?;

    dict.save(
        &cfg.out,
        serde_json::json!({
            "lambda_train": cfg.lca.lambda,
            "epochs_done": cfg.epochs,
            "learning_rate": cfg.learning_rate,
            "provenance": prov,
        }),
    )?;

    // Per-epoch energy log next to the dictionary.
    let log_path = crate::tensor_adjacent(&cfg.out, "log.json");
    let payload = serde_json::json!({"epochs": log.epochs, "provenance": prov});
    std::fs::write(
        &log_path,
        format!("{}\n", serde_json::to_string_pretty(&payload).expect("log serializes")),
    )
    .map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;

    log_event(&serde_json::json!({
        "event": "trained",
        "out": cfg.out.display().to_string(),
        "epochs": log.epochs.len(),
    }));
    Ok(())
}
