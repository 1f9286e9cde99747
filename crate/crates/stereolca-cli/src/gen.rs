//! `gen`: writes a stimulus database (pairs as tensor files plus a JSON
//! manifest) and prints per-label counts as JSON on stdout.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use stereolca::datagen::{
    make_shifted_pair, make_virtual_fixation, procedural_texture, render_slanted_plane,
    save_pair, DatasetManifest, DisparityGrid, Label, LabelGrid, ManifestEntry, RigSpec,
};
use stereolca::geometry::{listing_angle, CameraIntrinsics, Point2};
use stereolca::imagecore::{load_grayscale, Image};
use stereolca::{Error, Result};

use crate::{entry_seed, log_event, Px};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenKind {
    Disparity,
    Surface,
    Vergence,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub kind: GenKind,
    pub out: PathBuf,
    pub seed: u64,
    /// Stimuli per grid label (disparity/surface kinds).
    pub images_per_label: usize,
    /// Total stimuli (vergence kind).
    pub count: usize,
    pub grid: LabelGrid,
    /// Source-window edge for shifted pairs; the output pair is half this.
    pub crop_px: usize,
    /// Procedural-texture edge length.
    pub texture_px: usize,
    /// Optional directory of PNG sources used instead of procedural
    /// textures (cycled deterministically).
    pub source_dir: Option<PathBuf>,
    /// Rig for the surface kind.
    pub rig: RigSpec,
    /// Vergence kind: source/scene edge, crop, focal length, angle budget.
    pub vergence_scene_px: usize,
    pub vergence_crop_px: usize,
    pub vergence_focal_px: f64,
    pub max_angle_deg: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            kind: GenKind::Disparity,
            out: PathBuf::from("dataset"),
            seed: 0,
            images_per_label: 10,
            count: 100,
            grid: LabelGrid::Disparity(DisparityGrid::default()),
            crop_px: 128,
            texture_px: 512,
            source_dir: None,
            rig: RigSpec::default(),
            vergence_scene_px: 512,
            vergence_crop_px: 256,
            vergence_focal_px: 1400.0,
            max_angle_deg: 20.0,
        }
    }
}

#[derive(clap::Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = ["disparity", "surface", "vergence"])]
    pub kind: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub images_per_label: Option<usize>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Disparity grid half-range in px (builds a symmetric square grid).
    #[arg(long)]
    pub grid_max: Option<f64>,
    /// Disparity grid step in px.
    #[arg(long)]
    pub grid_step: Option<f64>,
    #[arg(long)]
    pub crop_px: Option<usize>,
    #[arg(long)]
    pub source_dir: Option<PathBuf>,
}

fn merge(args: &GenArgs) -> Result<GenConfig> {
    let mut cfg: GenConfig = crate::load_config(args.config.as_deref())?;
    if let Some(v) = &args.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &args.kind {
        cfg.kind = match v.as_str() {
            "disparity" => GenKind::Disparity,
            "surface" => GenKind::Surface,
            _ => GenKind::Vergence,
        };
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.images_per_label {
        cfg.images_per_label = v;
    }
    if let Some(v) = args.count {
        cfg.count = v;
    }
    if let Some(v) = args.crop_px {
        cfg.crop_px = v;
    }
    if let Some(v) = &args.source_dir {
        cfg.source_dir = Some(v.clone());
    }
    if args.grid_max.is_some() || args.grid_step.is_some() {
        let base = match &cfg.grid {
            LabelGrid::Disparity(g) => g.clone(),
            LabelGrid::Surface(_) => DisparityGrid::default(),
        };
        cfg.grid = LabelGrid::Disparity(DisparityGrid {
            max_abs: args.grid_max.unwrap_or(base.max_abs),
            step: args.grid_step.unwrap_or(base.step),
        });
    }
    // Surface kind defaults to the surface grid when the config didn't
    // override it.
    if cfg.kind == GenKind::Surface {
        if let LabelGrid::Disparity(g) = &cfg.grid {
            if *g == DisparityGrid::default() && args.grid_max.is_none() && args.grid_step.is_none()
            {
                cfg.grid = LabelGrid::Surface(Default::default());
            }
        }
    }
    Ok(cfg)
}

/// Texture source for one entry: a cycled PNG or a seeded procedural one.
fn texture_for(cfg: &GenConfig, sources: &[PathBuf], index: usize, seed: u64) -> Result<Image<Px>> {
    if sources.is_empty() {
        Ok(procedural_texture::<Px>(cfg.texture_px, cfg.texture_px, seed))
    } else {
        load_grayscale(&sources[index % sources.len()])
    }
}

pub fn run(args: &GenArgs) -> Result<()> {
    let cfg = merge(args)?;
    cfg.grid.validate()?;
    let sources: Vec<PathBuf> = match &cfg.source_dir {
        None => vec![],
        Some(dir) => {
            let mut list: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .collect();
            list.sort();
            if list.is_empty() {
                return Err(Error::InvalidData(format!(
                    "no PNG sources under {}",
                    dir.display()
                )));
            }
            list
        }
    };

    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Io {
        path: cfg.out.clone(),
        source: e,
    })?;

    let (entries, pair_dims) = match cfg.kind {
        GenKind::Disparity => gen_disparity(&cfg, &sources)?,
        GenKind::Surface => gen_surface(&cfg, &sources)?,
        GenKind::Vergence => gen_vergence(&cfg, &sources)?,
    };

    let grid = match cfg.kind {
        GenKind::Vergence => None,
        _ => Some(cfg.grid.clone()),
    };
    let manifest = DatasetManifest {
        grid: grid.clone(),
        pair_height: pair_dims.0,
        pair_width: pair_dims.1,
        entries,
    };
    manifest.save(&cfg.out)?;

    // Per-label counts, aligned with grid ordering.
    let mut per_label: Vec<usize> = vec![0; grid.as_ref().map_or(0, |g| g.len())];
    if let Some(grid) = &grid {
        for e in &manifest.entries {
            if let Some(label) = &e.label {
                if let Some(i) = grid.index_of(label) {
                    per_label[i] += 1;
                }
            }
        }
    }
    let summary = serde_json::json!({
        "kind": cfg.kind,
        "out": cfg.out.display().to_string(),
        "labels": grid.as_ref().map_or(0, |g| g.len()),
        "pairs": manifest.entries.len(),
        "per_label": per_label,
        "config_hash": crate::provenance::config_hash(&cfg),
    });
    println!("{summary}");
    Ok(())
}

fn gen_disparity(cfg: &GenConfig, sources: &[PathBuf]) -> Result<(Vec<ManifestEntry>, (usize, usize))> {
    let labels = cfg.grid.labels();
    let jobs: Vec<(usize, usize)> = (0..labels.len())
        .flat_map(|li| (0..cfg.images_per_label).map(move |ii| (li, ii)))
        .collect();
    let entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .map(|&(li, ii)| {
            let label = match labels[li] {
                Label::Disparity(d) => d,
                Label::Surface(_) => {
                    return Err(Error::InvalidArgument(
                        "disparity generation needs a disparity grid".into(),
                    ))
                }
            };
            let seed = entry_seed(cfg.seed, li as u64, ii as u64);
            let tex = texture_for(cfg, sources, li * cfg.images_per_label + ii, seed ^ 0xA5A5)?;
            let pair = make_shifted_pair(&tex, label, cfg.crop_px, seed)?;
            let name = format!("pair_{li:04}_{ii:04}.lcat");
            save_pair(&pair, cfg.out.join(&name))?;
            Ok(ManifestEntry {
                path: name,
                label: Some(labels[li]),
                seed,
                scale: 0.5,
            })
        })
        .collect::<Result<_>>()?;
    log_event(&serde_json::json!({"event": "gen", "kind": "disparity", "pairs": entries.len()}));
    Ok((entries, (cfg.crop_px / 2, cfg.crop_px / 2)))
}

fn gen_surface(cfg: &GenConfig, sources: &[PathBuf]) -> Result<(Vec<ManifestEntry>, (usize, usize))> {
    let labels = cfg.grid.labels();
    let jobs: Vec<(usize, usize)> = (0..labels.len())
        .flat_map(|li| (0..cfg.images_per_label).map(move |ii| (li, ii)))
        .collect();
    let entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .map(|&(li, ii)| {
            let label = match labels[li] {
                Label::Surface(s) => s,
                Label::Disparity(_) => {
                    return Err(Error::InvalidArgument(
                        "surface generation needs a surface grid".into(),
                    ))
                }
            };
            let seed = entry_seed(cfg.seed, li as u64, ii as u64);
            let tex = texture_for(cfg, sources, li * cfg.images_per_label + ii, seed ^ 0x5A5A)?;
            let pair = render_slanted_plane(&tex, label, &cfg.rig)?;
            let name = format!("pair_{li:04}_{ii:04}.lcat");
            save_pair(&pair, cfg.out.join(&name))?;
            Ok(ManifestEntry {
                path: name,
                label: Some(labels[li]),
                seed,
                scale: 1.0,
            })
        })
        .collect::<Result<_>>()?;
    log_event(&serde_json::json!({"event": "gen", "kind": "surface", "pairs": entries.len()}));
    Ok((entries, (cfg.rig.image_px, cfg.rig.image_px)))
}

fn gen_vergence(cfg: &GenConfig, sources: &[PathBuf]) -> Result<(Vec<ManifestEntry>, (usize, usize))> {
    use rand::{Rng, SeedableRng};
    let n = cfg.vergence_scene_px;
    let center = (n as f64 - 1.0) / 2.0;
    let intrinsics = CameraIntrinsics::new(
        cfg.vergence_focal_px,
        cfg.vergence_focal_px,
        center,
        center,
    )?;
    let principal = Point2::new(center, center);
    let entries: Vec<ManifestEntry> = (0..cfg.count)
        .into_par_iter()
        .map(|ii| {
            let seed = entry_seed(cfg.seed, 0, ii as u64);
            let tex = texture_for(cfg, sources, ii, seed ^ 0x7777)?;
            let scene = stereolca::imagecore::StereoPair::new(tex.clone(), tex)?;
            // Synthetic correspondence: a seeded fixation point inside the
            // angle budget. The warp displaces content by roughly the
            // fixation offset, so the offset also stays inside the margin
            // the crop leaves free.
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let crop_margin =
                ((n.saturating_sub(cfg.vergence_crop_px)) as f64 / 2.0 - 8.0).max(1.0);
            let max_r = (cfg.vergence_focal_px * cfg.max_angle_deg.to_radians().tan() * 0.9)
                .min(crop_margin);
            let fix = loop {
                let x = center + rng.gen_range(-max_r..max_r);
                let y = center + rng.gen_range(-max_r..max_r);
                let p = Point2::new(
                    x.clamp(0.0, n as f64 - 1.0),
                    y.clamp(0.0, n as f64 - 1.0),
                );
                if listing_angle(p, principal, cfg.vergence_focal_px).to_degrees()
                    <= cfg.max_angle_deg
                {
                    break p;
                }
            };
            let pair = make_virtual_fixation(
                &scene,
                fix,
                fix,
                &intrinsics,
                cfg.max_angle_deg,
                cfg.vergence_crop_px,
            )?;
            let name = format!("pair_{ii:05}.lcat");
            save_pair(&pair, cfg.out.join(&name))?;
            Ok(ManifestEntry {
                path: name,
                label: None,
                seed,
                scale: 1.0,
            })
        })
        .collect::<Result<_>>()?;
    log_event(&serde_json::json!({"event": "gen", "kind": "vergence", "pairs": entries.len()}));
    Ok((entries, (cfg.vergence_crop_px, cfg.vergence_crop_px)))
}
