//! `scale-infer`: scale-space disparity inference on a full scene, with
//! predicted-error maps and an error-vs-prediction scatter when ground
//! truth is available.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use stereolca::analysis::ErrorPredictor;
use stereolca::imagecore::{load_grayscale, Image, Preprocess, StereoPair};
use stereolca::lca::{Dictionary, LcaConfig};
use stereolca::readout::{
    load_ground_truth_disparity, scale_space_infer, DisparityField, ScaleSpaceConfig, TuningMaps,
};
use stereolca::{tensor, Error, Result};

use crate::{load_config, log_event, provenance, Px};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaleInferConfig {
    /// Scene as a `[2, H, W]` pair tensor...
    pub scene: Option<PathBuf>,
    /// ...or as two PNG half-images.
    pub left: Option<PathBuf>,
    pub right: Option<PathBuf>,
    pub dictionary: PathBuf,
    pub tuning: PathBuf,
    /// Error predictor (JSON); enables the predicted-error map.
    pub predictor: Option<PathBuf>,
    /// Percentile to report from the predictor.
    pub percentile: f64,
    /// Ground-truth horizontal disparity map for the scatter output.
    pub ground_truth: Option<PathBuf>,
    /// Ground-truth values beyond this magnitude are excluded.
    pub gt_range: Option<f64>,
    pub scale_space: ScaleSpaceConfig,
    pub lca: LcaConfig,
    pub preprocess: Preprocess,
    pub out: PathBuf,
    /// Also export false-color/grayscale PNG renderings.
    pub export_png: bool,
}

impl Default for ScaleInferConfig {
    fn default() -> Self {
        ScaleInferConfig {
            scene: None,
            left: None,
            right: None,
            dictionary: PathBuf::from("dictionary.lcat"),
            tuning: PathBuf::from("tuning.lcat"),
            predictor: None,
            percentile: 80.0,
            ground_truth: None,
            gt_range: None,
            scale_space: ScaleSpaceConfig::default(),
            lca: LcaConfig::default(),
            preprocess: Preprocess::default(),
            out: PathBuf::from("scale_inference"),
            export_png: false,
        }
    }
}

#[derive(clap::Args, Debug)]
pub struct ScaleInferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub left: Option<PathBuf>,
    #[arg(long)]
    pub right: Option<PathBuf>,
    #[arg(long)]
    pub dictionary: Option<PathBuf>,
    #[arg(long)]
    pub tuning: Option<PathBuf>,
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated descending scales, e.g. "1.0,0.8,0.6,0.4,0.2".
    #[arg(long)]
    pub scales: Option<String>,
    #[arg(long)]
    pub export_png: bool,
}

fn merge(args: &ScaleInferArgs) -> Result<ScaleInferConfig> {
    let mut cfg: ScaleInferConfig = load_config(args.config.as_deref())?;
    if let Some(v) = &args.scene {
        cfg.scene = Some(v.clone());
    }
    if let Some(v) = &args.left {
        cfg.left = Some(v.clone());
    }
    if let Some(v) = &args.right {
        cfg.right = Some(v.clone());
    }
    if let Some(v) = &args.dictionary {
        cfg.dictionary = v.clone();
    }
    if let Some(v) = &args.tuning {
        cfg.tuning = v.clone();
    }
    if let Some(v) = &args.predictor {
        cfg.predictor = Some(v.clone());
    }
    if let Some(v) = &args.ground_truth {
        cfg.ground_truth = Some(v.clone());
    }
    if let Some(v) = &args.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &args.scales {
        let scales: std::result::Result<Vec<f64>, _> =
            v.split(',').map(|s| s.trim().parse::<f64>()).collect();
        cfg.scale_space.scales =
            scales.map_err(|_| Error::InvalidArgument(format!("bad --scales {v:?}")))?;
    }
    if args.export_png {
        cfg.export_png = true;
    }
    Ok(cfg)
}

fn load_scene(cfg: &ScaleInferConfig) -> Result<StereoPair<Px>> {
    match (&cfg.scene, &cfg.left, &cfg.right) {
        (Some(path), _, _) => stereolca::datagen::load_pair(path),
        (None, Some(l), Some(r)) => {
            StereoPair::new(load_grayscale(l)?, load_grayscale(r)?)
        }
        _ => Err(Error::InvalidArgument(
            "provide either --scene or both --left and --right".into(),
        )),
    }
}

/// Simple blue-white-red rendering of a signed map.
fn false_color(map: &ndarray::Array2<f64>, valid: &ndarray::Array2<bool>, path: &std::path::Path) -> Result<()> {
    let (h, w) = map.dim();
    let peak = map
        .iter()
        .zip(valid.iter())
        .filter(|(_, &v)| v)
        .map(|(&d, _)| d.abs())
        .fold(1e-9f64, f64::max);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let px = if valid[(r, c)] {
                let t = (map[(r, c)] / peak).clamp(-1.0, 1.0);
                if t >= 0.0 {
                    let s = (255.0 * (1.0 - t)) as u8;
                    image::Rgb([255, s, s])
                } else {
                    let s = (255.0 * (1.0 + t)) as u8;
                    image::Rgb([s, s, 255])
                }
            } else {
                image::Rgb([0, 0, 0])
            };
            img.put_pixel(c as u32, r as u32, px);
        }
    }
    img.save(path).map_err(|e| Error::Codec {
        path: path.into(),
        source: e,
    })
}

pub fn run(args: &ScaleInferArgs) -> Result<()> {
    let cfg = merge(args)?;
    let dict = Dictionary::<Px>::load(&cfg.dictionary)?;
    let tuning = TuningMaps::<Px>::load(&cfg.tuning)?;
    if tuning.k() != dict.k() {
        return Err(Error::InvalidData(format!(
            "tuning table built for {} kernels, dictionary has {}",
            tuning.k(),
            dict.k()
        )));
    }
    let scene = load_scene(&cfg)?;
    let field: DisparityField = scale_space_infer(
        &scene,
        &dict,
        &tuning,
        &cfg.scale_space,
        &cfg.lca,
        &cfg.preprocess,
    )?;
    let (h, w) = field.dims();

    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Io {
        path: cfg.out.clone(),
        source: e,
    })?;
    let mut inputs: Vec<(&str, &std::path::Path)> =
        vec![("dictionary", cfg.dictionary.as_path()), ("tuning", cfg.tuning.as_path())];
    if let Some(p) = &cfg.predictor {
        inputs.push(("predictor", p.as_path()));
    }
    let prov = provenance::provenance(&cfg, &inputs)?;
    let meta = |kind: &str| {
        serde_json::json!({"kind": kind, "provenance": prov})
    };

    // Disparity as [2, H, W] (dx, dy), plus scale, validity and activity.
    let mut disp = Vec::with_capacity(2 * h * w);
    disp.extend(field.dx.iter().map(|&v| v as f32));
    disp.extend(field.dy.iter().map(|&v| v as f32));
    let disp_path = cfg.out.join("disparity.lcat");
    tensor::write_f32(&disp_path, &[2, h, w], &disp)?;
    tensor::write_sidecar(&disp_path, &meta("disparity_map"))?;

    let scale_path = cfg.out.join("scale.lcat");
    tensor::write_f32(
        &scale_path,
        &[h, w],
        &field.scale.iter().map(|&v| v as f32).collect::<Vec<_>>(),
    )?;
    tensor::write_sidecar(&scale_path, &meta("scale_map"))?;

    let valid_path = cfg.out.join("valid.lcat");
    tensor::write_bits(
        &valid_path,
        &[h, w],
        &field.valid.iter().copied().collect::<Vec<bool>>(),
    )?;

    let active_path = cfg.out.join("active_count.lcat");
    tensor::write_f32(
        &active_path,
        &[h, w],
        &field.active_count.iter().map(|&v| v as f32).collect::<Vec<_>>(),
    )?;
    tensor::write_sidecar(&active_path, &meta("active_count"))?;

    // Predicted error from the activity counts, in selected-scale pixels.
    let predicted = match &cfg.predictor {
        None => None,
        Some(path) => {
            let predictor = ErrorPredictor::load(path)?;
            let mut values = vec![0.0f32; h * w];
            for r in 0..h {
                for c in 0..w {
                    if field.valid[(r, c)] {
                        values[r * w + c] =
                            predictor.predict(field.active_count[(r, c)], cfg.percentile)? as f32;
                    }
                }
            }
            let path = cfg.out.join("predicted_error.lcat");
            tensor::write_f32(&path, &[h, w], &values)?;
            tensor::write_sidecar(
                &path,
                &serde_json::json!({
                    "kind": "predicted_error",
                    "percentile": cfg.percentile,
                    "provenance": prov,
                }),
            )?;
            Some(values)
        }
    };

    // Scatter of actual horizontal error against the prediction.
    let mut summary_extra = serde_json::Map::new();
    if let (Some(gt_path), Some(predicted)) = (&cfg.ground_truth, &predicted) {
        let gt = load_ground_truth_disparity(gt_path)?;
        if gt.dim() != (h, w) {
            return Err(Error::InvalidData(format!(
                "ground truth {:?} does not match the scene {:?}",
                gt.dim(),
                (h, w)
            )));
        }
        let mut csv = String::from("row,col,gt_dx,est_dx,abs_err,predicted_err,scale\n");
        let mut xs = vec![];
        let mut ys = vec![];
        for r in 0..h {
            for c in 0..w {
                if !field.valid[(r, c)] {
                    continue;
                }
                let g = gt[(r, c)];
                if !g.is_finite() {
                    continue;
                }
                if let Some(range) = cfg.gt_range {
                    if g.abs() > range {
                        continue;
                    }
                }
                let err = (field.dx[(r, c)] - g).abs();
                let pred = predicted[r * w + c] as f64;
                writeln!(
                    csv,
                    "{r},{c},{g},{},{err},{pred},{}",
                    field.dx[(r, c)],
                    field.scale[(r, c)]
                )
                .expect("string write");
                xs.push(pred);
                ys.push(err);
            }
        }
        let scatter_path = cfg.out.join("error_scatter.csv");
        std::fs::write(&scatter_path, csv).map_err(|e| Error::Io {
            path: scatter_path,
            source: e,
        })?;
        if xs.len() > 2 {
            summary_extra.insert(
                "prediction_correlation".into(),
                serde_json::json!(pearson(&xs, &ys)),
            );
            summary_extra.insert("scatter_points".into(), serde_json::json!(xs.len()));
        }
    }

    if cfg.export_png {
        false_color(&field.dx, &field.valid, &cfg.out.join("disparity_dx.png"))?;
        if let Some(predicted) = &predicted {
            let max = predicted.iter().cloned().fold(1e-9f32, f32::max) as f64;
            let img = Image::<Px>::from_fn(h, w, |r, c| {
                (predicted[r * w + c] as f64 / max) as f32
            });
            stereolca::imagecore::save_png(&img, cfg.out.join("predicted_error.png"))?;
        }
    }

    let valid_count = field.valid.iter().filter(|&&v| v).count();
    let mut summary = serde_json::json!({
        "dims": [h, w],
        "valid_pixels": valid_count,
        "scales": cfg.scale_space.scales,
        "provenance": prov,
    });
    if let Some(obj) = summary.as_object_mut() {
        obj.extend(summary_extra);
    }
    let summary_path = cfg.out.join("summary.json");
    std::fs::write(
        &summary_path,
        format!("{}\n", serde_json::to_string_pretty(&summary).expect("summary serializes")),
    )
    .map_err(|e| Error::Io {
        path: summary_path,
        source: e,
    })?;
    log_event(&serde_json::json!({"event": "scale_inferred", "valid_pixels": valid_count}));
    Ok(())
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        vx += (x - mx).powi(2);
        vy += (y - my).powi(2);
    }
    if vx <= 0.0 || vy <= 0.0 {
        return 0.0;
    }
    num / (vx * vy).sqrt()
}
