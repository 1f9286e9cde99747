//! Tuning-map estimation from binarized codes and naïve Bayes inference of
//! disparity and surface orientation, including scale-space inference over
//! full scenes.
//!
//! A tuning map holds `P(H(a_k) = 1 | y_i)` per kernel (shared mode) or per
//! kernel and feature-map cell (per-location mode). Inference sums the log
//! probabilities of the observed binary states over all entries of a local
//! block, omitting priors; ties break toward the lowest grid index.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::datagen::{DisparityLabel, Label, LabelGrid};
use crate::error::{Error, Result};
use crate::imagecore::{downscale, Image, Preprocess, ResampleMethod, StereoPair};
use crate::lca::{binarize, encode, Dictionary, LcaConfig};
use crate::scalar::{cast, to_f64, Scalar};
use crate::tensor;

/// Whether probabilities are pooled over feature-map locations or kept per
/// cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMode {
    Shared,
    PerLocation,
}

/// Activation probabilities over a label grid.
///
/// Shared mode: `probs[k][g]`. Per-location mode: `probs[k][r][c][g]` for an
/// `R x C` region of feature-map cells around the central fixation point.
/// All probabilities are clamped to `[eps, 1 - eps]` with a per-label
/// `eps = 1 / (2 * observations)`, so every log score stays finite.
#[derive(Clone, Debug)]
pub struct TuningMaps<T> {
    mode: TuningMode,
    grid: LabelGrid,
    k: usize,
    region: (usize, usize),
    probs: Vec<T>,
    log_p: Vec<T>,
    log_1mp: Vec<T>,
    /// Observations per label that entered the estimate.
    counts: Vec<u64>,
}

impl<T: Scalar> TuningMaps<T> {
    /// Builds a table directly from probabilities (already clamped inside
    /// `(0, 1)`), e.g. for synthetic generative models in tests or
    /// calibration studies. `counts` records the nominal observations per
    /// label.
    pub fn from_probabilities(
        mode: TuningMode,
        grid: LabelGrid,
        k: usize,
        region: (usize, usize),
        probs: Vec<T>,
        counts: Vec<u64>,
    ) -> Result<Self> {
        Self::from_probs(mode, grid, k, region, probs, counts)
    }

    fn from_probs(
        mode: TuningMode,
        grid: LabelGrid,
        k: usize,
        region: (usize, usize),
        probs: Vec<T>,
        counts: Vec<u64>,
    ) -> Result<Self> {
        let cells = region.0 * region.1;
        let expected = k * cells * grid.len();
        if probs.len() != expected {
            return Err(Error::InvalidData(format!(
                "tuning table holds {} entries, expected {expected}",
                probs.len()
            )));
        }
        if counts.len() != grid.len() {
            return Err(Error::InvalidData("one observation count per label required".into()));
        }
        if probs.iter().any(|p| !(*p > T::zero() && *p < T::one())) {
            return Err(Error::InvalidData("tuning probabilities must lie inside (0, 1)".into()));
        }
        let log_p = probs.iter().map(|&p| p.ln()).collect();
        let log_1mp = probs.iter().map(|&p| (T::one() - p).ln()).collect();
        Ok(TuningMaps {
            mode,
            grid,
            k,
            region,
            probs,
            log_p,
            log_1mp,
            counts,
        })
    }

    pub fn mode(&self) -> TuningMode {
        self.mode
    }

    pub fn grid(&self) -> &LabelGrid {
        &self.grid
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `(R, C)` cell region; `(1, 1)` in shared mode.
    pub fn region(&self) -> (usize, usize) {
        self.region
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    #[inline]
    fn idx(&self, k: usize, r: usize, c: usize, g: usize) -> usize {
        ((k * self.region.0 + r) * self.region.1 + c) * self.grid.len() + g
    }

    /// Probability of kernel `k` being active for label `g` (shared mode).
    pub fn prob_shared(&self, k: usize, g: usize) -> T {
        debug_assert_eq!(self.mode, TuningMode::Shared);
        self.probs[self.idx(k, 0, 0, g)]
    }

    /// Probability for kernel `k` at region cell `(r, c)` and label `g`.
    pub fn prob_at(&self, k: usize, r: usize, c: usize, g: usize) -> T {
        self.probs[self.idx(k, r, c, g)]
    }

    /// Shared tuning row of one kernel over the whole grid.
    pub fn row_shared(&self, k: usize) -> &[T] {
        debug_assert_eq!(self.mode, TuningMode::Shared);
        let g = self.grid.len();
        &self.probs[k * g..(k + 1) * g]
    }

    /// Smooths per-location surface tuning maps along the tilt/slant grid
    /// axes with a 2-D Savitzky-Golay filter. The lone fronto-parallel
    /// label sits outside the rectangular grid and stays untouched.
    pub fn smoothed(&self, degree: usize, width: usize) -> Result<TuningMaps<T>> {
        if self.mode != TuningMode::PerLocation {
            return Err(Error::InvalidArgument(
                "smoothing applies to per-location tuning maps only".into(),
            ));
        }
        let surface = match &self.grid {
            LabelGrid::Surface(s) => s.clone(),
            LabelGrid::Disparity(_) => {
                return Err(Error::InvalidArgument(
                    "smoothing applies to surface-orientation tuning maps only".into(),
                ))
            }
        };
        let n_tilt = surface.tilts().len();
        let n_slant = surface.slants_deg.len();
        let _ = self.grid.len();

        let mut probs = self.probs.clone();
        let mut field = Array2::<T>::zeros((n_slant, n_tilt));
        for k in 0..self.k {
            for r in 0..self.region.0 {
                for c in 0..self.region.1 {
                    let base = self.idx(k, r, c, 0);
                    for is in 0..n_slant {
                        for it in 0..n_tilt {
                            field[(is, it)] = self.probs[base + 1 + is * n_tilt + it];
                        }
                    }
                    let smooth = savitzky_golay_2d(&field, degree, width)?;
                    for is in 0..n_slant {
                        for it in 0..n_tilt {
                            // Keep the clamping invariant after smoothing.
                            let eps = cast::<T>(
                                1.0 / (2.0 * self.counts[1 + is * n_tilt + it].max(1) as f64),
                            );
                            let v = smooth[(is, it)].max(eps).min(T::one() - eps);
                            probs[base + 1 + is * n_tilt + it] = v;
                        }
                    }
                }
            }
        }
        TuningMaps::from_probs(
            self.mode,
            self.grid.clone(),
            self.k,
            self.region,
            probs,
            self.counts.clone(),
        )
    }

    /// Writes the table as an f32 tensor (`[K, G]` shared, `[K, R, C, G]`
    /// per-location) with grid, counts and mode in the sidecar.
    pub fn save(&self, path: impl AsRef<Path>, extra_meta: serde_json::Value) -> Result<()> {
        let path = path.as_ref();
        let g = self.grid.len();
        let dims: Vec<usize> = match self.mode {
            TuningMode::Shared => vec![self.k, g],
            TuningMode::PerLocation => vec![self.k, self.region.0, self.region.1, g],
        };
        let data: Vec<f32> = self.probs.iter().map(|&p| to_f64(p) as f32).collect();
        tensor::write_f32(path, &dims, &data)?;
        let mut meta = serde_json::json!({
            "kind": "tuning",
            "mode": self.mode,
            "k": self.k,
            "region": [self.region.0, self.region.1],
            "grid": self.grid,
            "counts": self.counts,
        });
        if let (Some(obj), Some(extra)) = (meta.as_object_mut(), extra_meta.as_object()) {
            for (key, value) in extra {
                obj.insert(key.clone(), value.clone());
            }
        }
        tensor::write_sidecar(path, &meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (dims, data) = tensor::read_f32(path)?;
        let meta = tensor::read_sidecar(path)?;
        let mode: TuningMode = serde_json::from_value(
            meta.get("mode")
                .cloned()
                .ok_or_else(|| Error::format(path, "sidecar lacks \"mode\""))?,
        )
        .map_err(|e| Error::format(path, format!("bad mode: {e}")))?;
        let grid: LabelGrid = serde_json::from_value(
            meta.get("grid")
                .cloned()
                .ok_or_else(|| Error::format(path, "sidecar lacks \"grid\""))?,
        )
        .map_err(|e| Error::format(path, format!("bad grid: {e}")))?;
        let counts: Vec<u64> = serde_json::from_value(
            meta.get("counts")
                .cloned()
                .ok_or_else(|| Error::format(path, "sidecar lacks \"counts\""))?,
        )
        .map_err(|e| Error::format(path, format!("bad counts: {e}")))?;
        let (k, region) = match (mode, dims.as_slice()) {
            (TuningMode::Shared, [k, g]) if *g == grid.len() => (*k, (1, 1)),
            (TuningMode::PerLocation, [k, r, c, g]) if *g == grid.len() => (*k, (*r, *c)),
            _ => {
                return Err(Error::format(
                    path,
                    format!("tensor dims {dims:?} do not match mode/grid"),
                ))
            }
        };
        let probs = data.into_iter().map(|v| cast::<T>(v as f64)).collect();
        TuningMaps::from_probs(mode, grid, k, region, probs, counts)
    }
}

/// Accumulates activation counts toward a tuning table; a parallel
/// reduction can merge several accumulators.
#[derive(Clone, Debug)]
pub struct TuningAccumulator {
    mode: TuningMode,
    grid: LabelGrid,
    k: usize,
    region: (usize, usize),
    margin: usize,
    ones: Vec<u64>,
    observations: Vec<u64>,
}

impl TuningAccumulator {
    /// Shared-mode accumulator; `margin` feature-map cells are discarded at
    /// each border before pooling.
    pub fn shared(k: usize, grid: LabelGrid, margin: usize) -> Self {
        let g = grid.len();
        TuningAccumulator {
            mode: TuningMode::Shared,
            grid,
            k,
            region: (1, 1),
            margin,
            ones: vec![0; k * g],
            observations: vec![0; g],
        }
    }

    /// Per-location accumulator over the central `R x C` cell region.
    pub fn per_location(k: usize, grid: LabelGrid, region: (usize, usize)) -> Self {
        let g = grid.len();
        TuningAccumulator {
            mode: TuningMode::PerLocation,
            grid,
            k,
            region,
            margin: 0,
            ones: vec![0; k * region.0 * region.1 * g],
            observations: vec![0; g],
        }
    }

    /// Folds one binarized code (`K x M x N`) observed under `label_index`.
    pub fn add(&mut self, label_index: usize, bits: &ArrayView3<u8>) -> Result<()> {
        let g = self.grid.len();
        if label_index >= g {
            return Err(Error::InvalidData(format!(
                "label index {label_index} outside grid of {g}"
            )));
        }
        let (k, mh, mw) = bits.dim();
        if k != self.k {
            return Err(Error::InvalidData(format!(
                "code has {k} kernels, tuning table expects {}",
                self.k
            )));
        }
        match self.mode {
            TuningMode::Shared => {
                let m = self.margin;
                if mh <= 2 * m || mw <= 2 * m {
                    return Err(Error::InvalidData(format!(
                        "margin {m} leaves no cells of a {mh}x{mw} feature map"
                    )));
                }
                let retained = ((mh - 2 * m) * (mw - 2 * m)) as u64;
                for ki in 0..k {
                    let mut ones = 0u64;
                    for r in m..mh - m {
                        for c in m..mw - m {
                            ones += bits[(ki, r, c)] as u64;
                        }
                    }
                    self.ones[ki * g + label_index] += ones;
                }
                self.observations[label_index] += retained;
            }
            TuningMode::PerLocation => {
                let (rr, cc) = self.region;
                if mh < rr || mw < cc {
                    return Err(Error::InvalidData(format!(
                        "feature map {mh}x{mw} smaller than the {rr}x{cc} region"
                    )));
                }
                let r0 = (mh - rr) / 2;
                let c0 = (mw - cc) / 2;
                for ki in 0..k {
                    for r in 0..rr {
                        for c in 0..cc {
                            if bits[(ki, r0 + r, c0 + c)] != 0 {
                                self.ones[((ki * rr + r) * cc + c) * g + label_index] += 1;
                            }
                        }
                    }
                }
                self.observations[label_index] += 1;
            }
        }
        Ok(())
    }

    /// Merges another accumulator (associative, order-independent).
    pub fn merge(&mut self, other: &TuningAccumulator) -> Result<()> {
        if self.mode != other.mode
            || self.k != other.k
            || self.region != other.region
            || self.grid != other.grid
        {
            return Err(Error::InvalidData("cannot merge incompatible accumulators".into()));
        }
        for (a, b) in self.ones.iter_mut().zip(&other.ones) {
            *a += b;
        }
        for (a, b) in self.observations.iter_mut().zip(&other.observations) {
            *a += b;
        }
        Ok(())
    }

    /// Turns counts into clamped probability estimates.
    pub fn finish<T: Scalar>(self) -> Result<TuningMaps<T>> {
        let g = self.grid.len();
        for (gi, &n) in self.observations.iter().enumerate() {
            if n == 0 {
                return Err(Error::InvalidData(format!(
                    "label {gi} has zero observations"
                )));
            }
        }
        let cells = self.region.0 * self.region.1;
        let mut probs = Vec::with_capacity(self.k * cells * g);
        for idx in 0..self.k * cells {
            for gi in 0..g {
                let n = self.observations[gi];
                let eps = 1.0 / (2.0 * n as f64);
                let p = (self.ones[idx * g + gi] as f64 / n as f64).clamp(eps, 1.0 - eps);
                probs.push(cast::<T>(p));
            }
        }
        TuningMaps::from_probs(self.mode, self.grid, self.k, self.region, probs, self.observations)
    }
}

/// Estimates shared tuning maps from per-label binarized code sets.
/// `codes[i]` pairs a grid index with the codes observed for that label.
pub fn estimate_tuning_shared<T: Scalar>(
    codes: &[(usize, Vec<Array3<u8>>)],
    k: usize,
    grid: LabelGrid,
    margin: usize,
) -> Result<TuningMaps<T>> {
    let mut acc = TuningAccumulator::shared(k, grid, margin);
    for (label, set) in codes {
        for bits in set {
            acc.add(*label, &bits.view())?;
        }
    }
    acc.finish()
}

/// Estimates per-location tuning maps over the central `region` cells.
pub fn estimate_tuning_perloc<T: Scalar>(
    codes: &[(usize, Vec<Array3<u8>>)],
    k: usize,
    grid: LabelGrid,
    region: (usize, usize),
) -> Result<TuningMaps<T>> {
    let mut acc = TuningAccumulator::per_location(k, grid, region);
    for (label, set) in codes {
        for bits in set {
            acc.add(*label, &bits.view())?;
        }
    }
    acc.finish()
}

/// Log-score posterior over a label grid.
#[derive(Clone, Debug)]
pub struct Posterior<T> {
    pub scores: Vec<T>,
    pub argmax: usize,
    pub active_count: u32,
}

impl<T: Scalar> Posterior<T> {
    fn from_scores(scores: Vec<T>, active_count: u32) -> Self {
        let mut argmax = 0;
        let mut best = scores[0];
        for (i, &s) in scores.iter().enumerate().skip(1) {
            if s > best {
                best = s;
                argmax = i;
            }
        }
        Posterior {
            scores,
            argmax,
            active_count,
        }
    }
}

/// Naïve Bayes readout of one `K x 2 x 2` binary block under shared tuning
/// maps: sums `log P(state | y)` over all `4 K` entries, priors omitted.
pub fn infer<T: Scalar>(block: &ArrayView3<u8>, tuning: &TuningMaps<T>) -> Result<Posterior<T>> {
    if tuning.mode() != TuningMode::Shared {
        return Err(Error::InvalidArgument(
            "infer requires shared tuning maps; use infer_surface for per-location maps".into(),
        ));
    }
    let (k, bh, bw) = block.dim();
    if k != tuning.k() {
        return Err(Error::InvalidData(format!(
            "block has {k} kernels, tuning table expects {}",
            tuning.k()
        )));
    }
    let cells = (bh * bw) as u32;
    let g = tuning.grid.len();
    let mut scores = vec![T::zero(); g];
    let mut active: u32 = 0;
    for ki in 0..k {
        let mut ones: u32 = 0;
        for r in 0..bh {
            for c in 0..bw {
                ones += block[(ki, r, c)] as u32;
            }
        }
        active += ones;
        let c1 = cast::<T>(ones as f64);
        let c0 = cast::<T>((cells - ones) as f64);
        let lp = &tuning.log_p[ki * g..(ki + 1) * g];
        let lq = &tuning.log_1mp[ki * g..(ki + 1) * g];
        for gi in 0..g {
            scores[gi] = scores[gi] + c1 * lp[gi] + c0 * lq[gi];
        }
    }
    Ok(Posterior::from_scores(scores, active))
}

/// Argmax label map from sliding the 2x2 readout block over a binarized
/// code: one entry per interior block position, `(M-1) x (N-1)`.
#[derive(Clone, Debug)]
pub struct LabelMap {
    pub label_indices: Array2<usize>,
    pub active_counts: Array2<u32>,
}

impl LabelMap {
    pub fn dims(&self) -> (usize, usize) {
        self.label_indices.dim()
    }
}

/// Slides the 2x2 block over all interior feature-map positions.
pub fn infer_map<T: Scalar>(bits: &ArrayView3<u8>, tuning: &TuningMaps<T>) -> Result<LabelMap> {
    if tuning.mode() != TuningMode::Shared {
        return Err(Error::InvalidArgument("infer_map requires shared tuning maps".into()));
    }
    let (k, mh, mw) = bits.dim();
    if mh < 2 || mw < 2 {
        return Err(Error::InvalidData(format!(
            "feature map {mh}x{mw} too small for 2x2 readout"
        )));
    }
    let mut labels = Array2::<usize>::zeros((mh - 1, mw - 1));
    let mut counts = Array2::<u32>::zeros((mh - 1, mw - 1));
    for m in 0..mh - 1 {
        for n in 0..mw - 1 {
            let block = bits.slice(ndarray::s![0..k, m..m + 2, n..n + 2]);
            let post = infer(&block, tuning)?;
            labels[(m, n)] = post.argmax;
            counts[(m, n)] = post.active_count;
        }
    }
    Ok(LabelMap {
        label_indices: labels,
        active_counts: counts,
    })
}

/// Extracts the central `R x C` cell block of a binarized code.
pub fn central_block(bits: &ArrayView3<u8>, region: (usize, usize)) -> Result<Array3<u8>> {
    let (k, mh, mw) = bits.dim();
    let (rr, cc) = region;
    if mh < rr || mw < cc {
        return Err(Error::InvalidData(format!(
            "feature map {mh}x{mw} smaller than region {rr}x{cc}"
        )));
    }
    let r0 = (mh - rr) / 2;
    let c0 = (mw - cc) / 2;
    Ok(bits
        .slice(ndarray::s![0..k, r0..r0 + rr, c0..c0 + cc])
        .to_owned())
}

/// Naïve Bayes readout of surface orientation from the central block,
/// using each cell's own per-location tuning map.
pub fn infer_surface<T: Scalar>(
    block: &ArrayView3<u8>,
    tuning: &TuningMaps<T>,
) -> Result<Posterior<T>> {
    if tuning.mode() != TuningMode::PerLocation {
        return Err(Error::InvalidArgument(
            "infer_surface requires per-location tuning maps".into(),
        ));
    }
    let (k, bh, bw) = block.dim();
    if (bh, bw) != tuning.region() || k != tuning.k() {
        return Err(Error::InvalidData(format!(
            "block {k}x{bh}x{bw} does not match tuning table ({} kernels, region {:?})",
            tuning.k(),
            tuning.region()
        )));
    }
    let g = tuning.grid.len();
    let mut scores = vec![T::zero(); g];
    let mut active: u32 = 0;
    for ki in 0..k {
        for r in 0..bh {
            for c in 0..bw {
                let one = block[(ki, r, c)] != 0;
                active += one as u32;
                let base = tuning.idx(ki, r, c, 0);
                let table = if one {
                    &tuning.log_p[base..base + g]
                } else {
                    &tuning.log_1mp[base..base + g]
                };
                for gi in 0..g {
                    scores[gi] = scores[gi] + table[gi];
                }
            }
        }
    }
    Ok(Posterior::from_scores(scores, active))
}

/// 2-D Savitzky-Golay smoothing: per-pixel local least-squares fit of a
/// total-degree-`degree` polynomial over a `width x width` window,
/// evaluated at the window center. Borders fit on the truncated window;
/// where the truncated window cannot support the full basis, the degree
/// drops until it can.
pub fn savitzky_golay_2d<T: Scalar>(
    map: &Array2<T>,
    degree: usize,
    width: usize,
) -> Result<Array2<T>> {
    if width % 2 == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("window width must be odd, got {width}")));
    }
    if degree >= width {
        return Err(Error::InvalidArgument(format!(
            "polynomial degree {degree} requires window wider than {width}"
        )));
    }
    let (h, w) = map.dim();
    let half = (width / 2) as isize;

    // Smoothing weights per window truncation, solved from the normal
    // equations of the monomial basis {x^i y^j : i + j <= degree}.
    let mut cache: HashMap<(isize, isize, isize, isize), Vec<f64>> = HashMap::new();
    let mut weights_for = |t: isize, b: isize, l: isize, r: isize| -> Result<Vec<f64>> {
        if let Some(w) = cache.get(&(t, b, l, r)) {
            return Ok(w.clone());
        }
        let points: Vec<(f64, f64)> = (t..=b)
            .flat_map(|dy| (l..=r).map(move |dx| (dx as f64, dy as f64)))
            .collect();
        let mut deg = degree;
        let weights = loop {
            let basis: Vec<(u32, u32)> = (0..=deg as u32)
                .flat_map(|i| (0..=(deg as u32 - i)).map(move |j| (i, j)))
                .collect();
            let nb = basis.len();
            let mut xtx = vec![0.0f64; nb * nb];
            for &(x, y) in &points {
                let vals: Vec<f64> = basis.iter().map(|&(i, j)| x.powi(i as i32) * y.powi(j as i32)).collect();
                for a in 0..nb {
                    for bcol in 0..nb {
                        xtx[a * nb + bcol] += vals[a] * vals[bcol];
                    }
                }
            }
            // Row of the projector that evaluates the fit at the center:
            // w = e0^T (X^T X)^-1 X^T, with e0 the constant basis term.
            let mut e0 = vec![0.0f64; nb];
            e0[0] = 1.0;
            match crate::linalg::solve(xtx, e0) {
                Some(coef) => {
                    break points
                        .iter()
                        .map(|&(x, y)| {
                            basis
                                .iter()
                                .zip(&coef)
                                .map(|(&(i, j), &c)| c * x.powi(i as i32) * y.powi(j as i32))
                                .sum()
                        })
                        .collect::<Vec<f64>>();
                }
                None => {
                    if deg == 0 {
                        return Err(Error::InvalidArgument("degenerate smoothing window".into()));
                    }
                    deg -= 1;
                }
            }
        };
        cache.insert((t, b, l, r), weights.clone());
        Ok(weights)
    };

    let mut out = Array2::<T>::zeros((h, w));
    for row in 0..h {
        for col in 0..w {
            let t = -(row.min(half as usize) as isize);
            let b = (h - 1 - row).min(half as usize) as isize;
            let l = -(col.min(half as usize) as isize);
            let r = (w - 1 - col).min(half as usize) as isize;
            let weights = weights_for(t, b, l, r)?;
            let mut acc = 0.0f64;
            let mut wi = 0usize;
            for dy in t..=b {
                for dx in l..=r {
                    acc += weights[wi]
                        * to_f64(map[((row as isize + dy) as usize, (col as isize + dx) as usize)]);
                    wi += 1;
                }
            }
            out[(row, col)] = cast(acc);
        }
    }
    Ok(out)
}

/// Scale-space inference parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScaleSpaceConfig {
    /// Scales in descending order, each in (0, 1].
    pub scales: Vec<f64>,
    /// Largest accepted estimate magnitude per scale, in that scale's
    /// pixels. Defaults to one grid step inside the boundary, so saturated
    /// estimates fall through to a coarser scale.
    pub valid_px: Option<f64>,
    /// Blocks with fewer active coefficients are treated as evidence-free.
    pub min_active: u32,
}

impl Default for ScaleSpaceConfig {
    fn default() -> Self {
        ScaleSpaceConfig {
            scales: vec![1.0, 0.8, 0.6, 0.4, 0.2],
            valid_px: None,
            min_active: 1,
        }
    }
}

/// Full-resolution disparity field assembled from per-scale inference.
#[derive(Clone, Debug)]
pub struct DisparityField {
    pub dx: Array2<f64>,
    pub dy: Array2<f64>,
    /// Scale whose inference produced each pixel (0 where masked).
    pub scale: Array2<f64>,
    pub valid: Array2<bool>,
    /// Active-coefficient count of the producing block (error-prediction
    /// hook).
    pub active_count: Array2<u32>,
}

impl DisparityField {
    pub fn dims(&self) -> (usize, usize) {
        self.dx.dim()
    }
}

/// Encodes the scene at every scale and, per full-resolution pixel, keeps
/// the finest scale whose inferred disparity stays inside the model's
/// valid interval; the estimate is rescaled into full-resolution pixels.
pub fn scale_space_infer<T: Scalar>(
    scene: &StereoPair<T>,
    dict: &Dictionary<T>,
    tuning: &TuningMaps<T>,
    cfg: &ScaleSpaceConfig,
    lca_cfg: &LcaConfig,
    pre: &Preprocess,
) -> Result<DisparityField> {
    if cfg.scales.is_empty() {
        return Err(Error::InvalidArgument("scale list must not be empty".into()));
    }
    if cfg.scales.windows(2).any(|w| w[1] >= w[0]) || cfg.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "scales must descend within (0, 1], got {:?}",
            cfg.scales
        )));
    }
    let grid = match tuning.grid() {
        LabelGrid::Disparity(_) => tuning.grid().clone(),
        LabelGrid::Surface(_) => {
            return Err(Error::InvalidArgument(
                "scale-space inference needs a disparity tuning table".into(),
            ))
        }
    };
    let labels: Vec<DisparityLabel> = grid
        .labels()
        .iter()
        .map(|l| match l {
            Label::Disparity(d) => *d,
            Label::Surface(_) => unreachable!("grid checked above"),
        })
        .collect();
    let max_abs = match &grid {
        LabelGrid::Disparity(g) => g.max_abs,
        LabelGrid::Surface(_) => unreachable!(),
    };
    let step = match &grid {
        LabelGrid::Disparity(g) => g.step,
        LabelGrid::Surface(_) => unreachable!(),
    };
    let valid_px = cfg.valid_px.unwrap_or((max_abs - step).max(0.0));

    let (h, w) = scene.dims();
    let ks = dict.kernel_size();
    let stride = dict.stride();

    let mut dx = Array2::<f64>::zeros((h, w));
    let mut dy = Array2::<f64>::zeros((h, w));
    let mut scale_map = Array2::<f64>::zeros((h, w));
    let mut valid = Array2::<bool>::from_elem((h, w), false);
    let mut active = Array2::<u32>::zeros((h, w));

    for &s in &cfg.scales {
        // Resize, then crop to stride-compatible dimensions.
        let resized = scene.map_halves(|img| {
            if s == 1.0 {
                Ok(img.clone())
            } else {
                downscale(img, s, ResampleMethod::Bilinear)
            }
        })?;
        let (rh, rw) = resized.dims();
        if rh < ks || rw < ks {
            continue;
        }
        let ch = rh - (rh - ks) % stride;
        let cw = rw - (rw - ks) % stride;
        let cropped = resized.map_halves(|img| {
            Ok(Image::from_fn(ch, cw, |r, c| img.get(r, c)))
        })?;

        let norm = pre.apply(&cropped)?;
        if norm.degenerate {
            continue;
        }
        let code = encode(&norm.pair, dict, lca_cfg)?;
        let bits = binarize(&code);
        let map = infer_map(&bits.view(), tuning)?;
        let (bh, bw) = map.dims();

        for r in 0..h {
            for c in 0..w {
                if valid[(r, c)] {
                    continue;
                }
                // Block whose 2x2 receptive field covers this pixel at
                // scale s.
                let ys = r as f64 * s;
                let xs = c as f64 * s;
                if ys >= ch as f64 || xs >= cw as f64 {
                    continue;
                }
                let bm = ((ys / stride as f64).floor() as isize - 1).clamp(0, bh as isize - 1) as usize;
                let bn = ((xs / stride as f64).floor() as isize - 1).clamp(0, bw as isize - 1) as usize;
                let count = map.active_counts[(bm, bn)];
                if count < cfg.min_active {
                    continue;
                }
                let est = labels[map.label_indices[(bm, bn)]];
                if est.dx.abs() > valid_px || est.dy.abs() > valid_px {
                    continue;
                }
                dx[(r, c)] = est.dx / s;
                dy[(r, c)] = est.dy / s;
                scale_map[(r, c)] = s;
                active[(r, c)] = count;
                valid[(r, c)] = true;
            }
        }
    }

    Ok(DisparityField {
        dx,
        dy,
        scale: scale_map,
        valid,
        active_count: active,
    })
}

/// Loads a ground-truth disparity map: either a rank-2 tensor container or
/// a raw little-endian f32 dump with `{"height": .., "width": ..}` in its
/// sidecar.
pub fn load_ground_truth_disparity(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 4 && bytes[0..4] == tensor::MAGIC {
        let (dims, data) = tensor::read_f32(path)?;
        if dims.len() != 2 {
            return Err(Error::format(
                path,
                format!("ground truth must be rank 2, got {dims:?}"),
            ));
        }
        return Ok(Array2::from_shape_vec((dims[0], dims[1]), data.iter().map(|&v| v as f64).collect())
            .expect("shape matches"));
    }
    let meta = tensor::read_sidecar(path)?;
    let h = meta.get("height").and_then(|v| v.as_u64()).ok_or_else(|| {
        Error::format(path, "raw disparity dump needs \"height\" in its sidecar")
    })? as usize;
    let w = meta.get("width").and_then(|v| v.as_u64()).ok_or_else(|| {
        Error::format(path, "raw disparity dump needs \"width\" in its sidecar")
    })? as usize;
    if bytes.len() != h * w * 4 {
        return Err(Error::format(
            path,
            format!("raw dump holds {} bytes, expected {}", bytes.len(), h * w * 4),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((h, w), data).expect("shape matches"))
}
