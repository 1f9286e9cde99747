//! Kernel statistics and inference-error analysis: Gabor fits, ocular
//! dominance, left/right shift statistics, heuristic kernel typing, MAE
//! evaluation, the activity-based error predictor, and circular
//! correlation.
//!
//! Analysis math runs in `f64` regardless of the pipeline scalar.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::lca::Dictionary;
use crate::readout::{TuningMaps, TuningMode};
use crate::scalar::{to_f64, Scalar};

/// Fitted Gabor parameters for one half-kernel.
///
/// Model: `a + b exp(-(alpha x'^2 + 2 beta x' y' + gamma y'^2))
/// cos(2 pi f x' + kappa)` with `x'` along the orientation `phi` and an
/// elliptical envelope rotated by `theta` relative to the sinusoid.
///
/// Canonical form: `b >= 0`, `phi` in `[0, pi)`, `kappa` in `(-pi, pi]`,
/// `theta` in `(-pi/4, pi/4]` (axes swapped as needed when free).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GaborFit {
    pub offset: f64,
    pub scale: f64,
    pub x0: f64,
    pub y0: f64,
    pub orientation: f64,
    pub envelope_theta: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub frequency: f64,
    pub phase: f64,
    pub r2: f64,
}

impl GaborFit {
    /// Sinusoid periods under the envelope, perpendicular to the
    /// orientation.
    pub fn nx(&self) -> f64 {
        self.frequency * self.sigma_x
    }

    /// Sinusoid periods under the envelope, along the orientation.
    pub fn ny(&self) -> f64 {
        self.frequency * self.sigma_y
    }

    fn params(&self) -> [f64; 10] {
        [
            self.offset,
            self.scale,
            self.x0,
            self.y0,
            self.orientation,
            self.envelope_theta,
            self.sigma_x,
            self.sigma_y,
            self.frequency,
            self.phase,
        ]
    }

    fn from_params(p: &[f64; 10], r2: f64) -> Self {
        GaborFit {
            offset: p[P_A],
            scale: p[P_B],
            x0: p[P_X0],
            y0: p[P_Y0],
            orientation: p[P_PHI],
            envelope_theta: p[P_THETA],
            sigma_x: p[P_SX],
            sigma_y: p[P_SY],
            frequency: p[P_F],
            phase: p[P_KAPPA],
            r2,
        }
    }

    /// Evaluates the fitted model at pixel coordinates.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        gabor_value(&self.params(), x, y)
    }

    /// Renders the model over an `h x w` pixel grid.
    pub fn render(&self, h: usize, w: usize) -> Array2<f64> {
        let p = self.params();
        Array2::from_shape_fn((h, w), |(r, c)| gabor_value(&p, c as f64, r as f64))
    }
}

const P_A: usize = 0;
const P_B: usize = 1;
const P_X0: usize = 2;
const P_Y0: usize = 3;
const P_PHI: usize = 4;
const P_THETA: usize = 5;
const P_SX: usize = 6;
const P_SY: usize = 7;
const P_F: usize = 8;
const P_KAPPA: usize = 9;

fn gabor_value(p: &[f64; 10], x: f64, y: f64) -> f64 {
    let dx = x - p[P_X0];
    let dy = y - p[P_Y0];
    let (sp, cp) = p[P_PHI].sin_cos();
    let xp = dx * cp + dy * sp;
    let yp = -dx * sp + dy * cp;
    let (st, ct) = p[P_THETA].sin_cos();
    let s2t = (2.0 * p[P_THETA]).sin();
    let sx2 = 2.0 * p[P_SX] * p[P_SX];
    let sy2 = 2.0 * p[P_SY] * p[P_SY];
    let alpha = ct * ct / sx2 + st * st / sy2;
    let beta = -s2t / (2.0 * sx2) + s2t / (2.0 * sy2);
    let gamma = st * st / sx2 + ct * ct / sy2;
    let env = (-(alpha * xp * xp + 2.0 * beta * xp * yp + gamma * yp * yp)).exp();
    p[P_A] + p[P_B] * env * (2.0 * PI * p[P_F] * xp + p[P_KAPPA]).cos()
}

/// Gabor-fit options.
#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    /// Lock the envelope rotation at zero.
    pub theta_locked: bool,
    /// Lower bound on `n = f sigma` for both axes (excludes blob-like
    /// fits when set, e.g. 0.25).
    pub min_n: Option<f64>,
    pub orientation_starts: usize,
    pub phase_starts: usize,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            theta_locked: false,
            min_n: None,
            orientation_starts: 8,
            phase_starts: 4,
            max_iterations: 60,
        }
    }
}

fn wrap_pi(x: f64) -> f64 {
    let mut w = x - (x / (2.0 * PI)).round() * 2.0 * PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

fn apply_bounds(p: &mut [f64; 10], ks: f64, min_n: Option<f64>) {
    p[P_SX] = p[P_SX].abs().clamp(0.25, 4.0 * ks);
    p[P_SY] = p[P_SY].abs().clamp(0.25, 4.0 * ks);
    p[P_X0] = p[P_X0].clamp(-ks, 2.0 * ks);
    p[P_Y0] = p[P_Y0].clamp(-ks, 2.0 * ks);
    p[P_F] = p[P_F].clamp(0.0, 0.75);
    if let Some(mn) = min_n {
        p[P_F] = p[P_F].max(mn / p[P_SX]).max(mn / p[P_SY]);
    }
}

fn canonicalize(p: &mut [f64; 10], theta_locked: bool) {
    // Envelope axes: fold theta into (-pi/4, pi/4], swapping sigmas.
    if !theta_locked {
        let mut theta = wrap_pi(p[P_THETA]);
        // Period pi.
        if theta > PI / 2.0 {
            theta -= PI;
        } else if theta <= -PI / 2.0 {
            theta += PI;
        }
        if theta > PI / 4.0 {
            theta -= PI / 2.0;
            p.swap(P_SX, P_SY);
        } else if theta <= -PI / 4.0 {
            theta += PI / 2.0;
            p.swap(P_SX, P_SY);
        }
        p[P_THETA] = theta;
    }
    // Nonnegative amplitude.
    if p[P_B] < 0.0 {
        p[P_B] = -p[P_B];
        p[P_KAPPA] += PI;
    }
    // Orientation in [0, pi); odd reductions flip x', negating the phase.
    let reduced = p[P_PHI].rem_euclid(PI);
    let steps = ((p[P_PHI] - reduced) / PI).round() as i64;
    if steps.rem_euclid(2) == 1 {
        p[P_KAPPA] = -p[P_KAPPA];
    }
    p[P_PHI] = reduced;
    p[P_KAPPA] = wrap_pi(p[P_KAPPA]);
}

struct KernelSamples {
    values: Vec<f64>,
    h: usize,
    w: usize,
    mean: f64,
    sst: f64,
}

impl KernelSamples {
    fn sse(&self, p: &[f64; 10]) -> f64 {
        let mut acc = 0.0;
        let mut i = 0;
        for r in 0..self.h {
            for c in 0..self.w {
                let d = gabor_value(p, c as f64, r as f64) - self.values[i];
                acc += d * d;
                i += 1;
            }
        }
        acc
    }

    fn residuals(&self, p: &[f64; 10], out: &mut [f64]) {
        let mut i = 0;
        for r in 0..self.h {
            for c in 0..self.w {
                out[i] = gabor_value(p, c as f64, r as f64) - self.values[i];
                i += 1;
            }
        }
    }
}

/// One damped least-squares run from a start point.
fn lm_run(
    samples: &KernelSamples,
    start: [f64; 10],
    free: &[bool; 10],
    ks: f64,
    opts: &FitOptions,
) -> ([f64; 10], f64) {
    let n = samples.values.len();
    let free_idx: Vec<usize> = (0..10).filter(|&i| free[i]).collect();
    let nf = free_idx.len();

    let mut p = start;
    apply_bounds(&mut p, ks, opts.min_n);
    let mut sse = samples.sse(&p);
    let mut mu = 1e-3;
    let mut r = vec![0.0; n];
    let mut rp = vec![0.0; n];
    let mut rm = vec![0.0; n];
    let mut jac = vec![0.0; n * nf];

    let mut stall = 0;
    for _ in 0..opts.max_iterations {
        samples.residuals(&p, &mut r);
        // Numeric central-difference Jacobian.
        for (col, &pi) in free_idx.iter().enumerate() {
            let h = (1e-5 * p[pi].abs()).max(1e-7);
            let mut pp = p;
            pp[pi] += h;
            samples.residuals(&pp, &mut rp);
            pp[pi] = p[pi] - h;
            samples.residuals(&pp, &mut rm);
            let inv = 1.0 / (2.0 * h);
            for i in 0..n {
                jac[i * nf + col] = (rp[i] - rm[i]) * inv;
            }
        }
        let mut jtj = vec![0.0; nf * nf];
        let mut jtr = vec![0.0; nf];
        for i in 0..n {
            let row = &jac[i * nf..(i + 1) * nf];
            for a in 0..nf {
                jtr[a] += row[a] * r[i];
                for b in a..nf {
                    jtj[a * nf + b] += row[a] * row[b];
                }
            }
        }
        for a in 0..nf {
            for b in 0..a {
                jtj[a * nf + b] = jtj[b * nf + a];
            }
        }

        let mut improved = false;
        for _ in 0..8 {
            let mut damped = jtj.clone();
            for a in 0..nf {
                damped[a * nf + a] += mu * jtj[a * nf + a].max(1e-12);
            }
            let rhs: Vec<f64> = jtr.iter().map(|&v| -v).collect();
            let Some(delta) = crate::linalg::solve(damped, rhs) else {
                mu *= 10.0;
                continue;
            };
            let mut cand = p;
            for (col, &pi) in free_idx.iter().enumerate() {
                cand[pi] += delta[col];
            }
            apply_bounds(&mut cand, ks, opts.min_n);
            let cand_sse = samples.sse(&cand);
            if cand_sse.is_finite() && cand_sse < sse {
                let gain = sse - cand_sse;
                p = cand;
                sse = cand_sse;
                mu = (mu / 3.0).max(1e-12);
                improved = true;
                if gain <= 1e-14 * sse.max(1e-30) {
                    stall += 1;
                } else {
                    stall = 0;
                }
                break;
            }
            mu *= 10.0;
            if mu > 1e12 {
                break;
            }
        }
        if !improved || stall >= 2 {
            break;
        }
    }
    (p, sse)
}

/// Dominant spatial frequency of the kernel along an orientation,
/// estimated by scanning a projection spectrum.
fn dominant_frequency(samples: &KernelSamples, phi: f64) -> f64 {
    let (sp, cp) = phi.sin_cos();
    let cx = (samples.w as f64 - 1.0) / 2.0;
    let cy = (samples.h as f64 - 1.0) / 2.0;
    let mut best = (0.08, 0.0f64);
    let mut f = 0.02;
    while f <= 0.42 {
        let mut re = 0.0;
        let mut im = 0.0;
        let mut i = 0;
        for r in 0..samples.h {
            for c in 0..samples.w {
                let xp = (c as f64 - cx) * cp + (r as f64 - cy) * sp;
                let v = samples.values[i] - samples.mean;
                let ang = 2.0 * PI * f * xp;
                re += v * ang.cos();
                im += v * ang.sin();
                i += 1;
            }
        }
        let mag = re * re + im * im;
        if mag > best.1 {
            best = (f, mag);
        }
        f += 0.02;
    }
    best.0
}

/// Fits the ten-parameter Gabor model to a half-kernel by damped least
/// squares with multi-start over orientation and phase, keeping the best
/// sum of squared errors.
pub fn fit_gabor<T: Scalar>(kernel: &ArrayView2<T>, opts: &FitOptions) -> Result<GaborFit> {
    let (h, w) = kernel.dim();
    if h < 4 || w < 4 {
        return Err(Error::InvalidArgument(format!(
            "kernel {h}x{w} too small for a Gabor fit"
        )));
    }
    let values: Vec<f64> = kernel.iter().map(|&v| to_f64(v)).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sst: f64 = values.iter().map(|&v| (v - mean).powi(2)).sum();
    if sst <= 1e-30 {
        return Err(Error::InvalidData("kernel has zero variance".into()));
    }
    let samples = KernelSamples {
        values,
        h,
        w,
        mean,
        sst,
    };
    let ks = h.max(w) as f64;

    // Moment-based initial position and envelope width.
    let mut wsum = 0.0;
    let mut x0 = 0.0;
    let mut y0 = 0.0;
    let mut i = 0;
    for r in 0..h {
        for c in 0..w {
            let e = (samples.values[i] - mean).powi(2);
            wsum += e;
            x0 += e * c as f64;
            y0 += e * r as f64;
            i += 1;
        }
    }
    x0 /= wsum;
    y0 /= wsum;
    let mut second = 0.0;
    i = 0;
    for r in 0..h {
        for c in 0..w {
            let e = (samples.values[i] - mean).powi(2);
            second += e * ((c as f64 - x0).powi(2) + (r as f64 - y0).powi(2));
            i += 1;
        }
    }
    let sigma0 = (second / wsum / 2.0).sqrt().clamp(1.0, ks / 2.0);
    let (vmin, vmax) = samples
        .values
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let b0 = ((vmax - vmin) / 2.0).max(1e-6);

    let mut free = [true; 10];
    if opts.theta_locked {
        free[P_THETA] = false;
    }

    let mut best: Option<([f64; 10], f64)> = None;
    'outer: for oi in 0..opts.orientation_starts.max(1) {
        let phi = oi as f64 * PI / opts.orientation_starts.max(1) as f64;
        let f0 = dominant_frequency(&samples, phi);
        for pi in 0..opts.phase_starts.max(1) {
            let kappa = pi as f64 * 2.0 * PI / opts.phase_starts.max(1) as f64;
            let start = {
                let mut p = [0.0; 10];
                p[P_A] = mean;
                p[P_B] = b0;
                p[P_X0] = x0;
                p[P_Y0] = y0;
                p[P_PHI] = phi;
                p[P_THETA] = 0.0;
                p[P_SX] = sigma0;
                p[P_SY] = sigma0;
                p[P_F] = f0;
                p[P_KAPPA] = kappa;
                p
            };
            let (p, sse) = lm_run(&samples, start, &free, ks, opts);
            if best.as_ref().is_none_or(|&(_, s)| sse < s) {
                best = Some((p, sse));
            }
            if let Some((_, s)) = best {
                if 1.0 - s / samples.sst > 0.99999 {
                    break 'outer;
                }
            }
        }
    }

    let (mut p, sse) = best.ok_or_else(|| {
        Error::InvalidData("gabor fit failed to converge from any start".into())
    })?;
    canonicalize(&mut p, opts.theta_locked);
    let r2 = 1.0 - sse / samples.sst;
    Ok(GaborFit::from_params(&p, r2))
}

/// Ocular dominance on the 7-point scale: `angle = atan(|L| / |R|)`;
/// bin 1 is the right-monocular end (angle near 0), bin 7 left-monocular,
/// bin 4 balanced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcularDominance {
    pub angle: f64,
    pub bin: u8,
}

pub fn ocular_dominance<T: Scalar>(
    left: &ArrayView2<T>,
    right: &ArrayView2<T>,
) -> Result<OcularDominance> {
    let norm = |k: &ArrayView2<T>| -> f64 {
        k.iter().map(|&v| to_f64(v).powi(2)).sum::<f64>().sqrt()
    };
    let l = norm(left);
    let r = norm(right);
    if l == 0.0 && r == 0.0 {
        return Err(Error::InvalidData("both half-kernels are zero".into()));
    }
    let angle = l.atan2(r);
    let bin = ((angle / (PI / 14.0)).floor() as i64).clamp(0, 6) as u8 + 1;
    Ok(OcularDominance { angle, bin })
}

/// Left/right differences of a fitted kernel pair: position shift
/// projected on the axis perpendicular to the mean orientation (in
/// sinusoid cycles) and phase shift in radians.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ShiftStats {
    pub position_shift_cycles: f64,
    pub phase_shift_rad: f64,
    /// Raw fitted-center displacement (right minus left), px.
    pub displacement_px: (f64, f64),
}

pub fn shift_statistics(left: &GaborFit, right: &GaborFit, r2_min: f64) -> Result<ShiftStats> {
    if !(left.r2 > r2_min && right.r2 > r2_min) {
        return Err(Error::QualityCut(format!(
            "fit quality r2 = ({:.3}, {:.3}) below {r2_min}",
            left.r2, right.r2
        )));
    }
    let dx = right.x0 - left.x0;
    let dy = right.y0 - left.y0;
    // Circular mean of two axial (period pi) orientations.
    let sum_sin = (2.0 * left.orientation).sin() + (2.0 * right.orientation).sin();
    let sum_cos = (2.0 * left.orientation).cos() + (2.0 * right.orientation).cos();
    let mean_orientation = 0.5 * sum_sin.atan2(sum_cos);
    let mean_f = 0.5 * (left.frequency + right.frequency);
    let position_shift =
        mean_f * (dx * mean_orientation.cos() + dy * mean_orientation.sin());
    Ok(ShiftStats {
        position_shift_cycles: position_shift,
        phase_shift_rad: wrap_pi(right.phase - left.phase),
        displacement_px: (dx, dy),
    })
}

/// Heuristic kernel phenotype.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelType {
    MatchedGabor,
    TunedInhibitory,
    BlobLike,
    Unclassified,
}

/// Everything the classification cascade looks at.
#[derive(Clone, Debug)]
pub struct ClassifyInput<'a> {
    pub fit_left: Option<&'a GaborFit>,
    pub fit_right: Option<&'a GaborFit>,
    pub dominance_bin: u8,
    pub phase_shift: Option<f64>,
    /// Shared disparity tuning row of this kernel, if available.
    pub tuning_row: Option<&'a [f64]>,
    pub zero_disparity_index: usize,
    pub radial_sign_change: bool,
    pub r2_min: f64,
}

/// Rule cascade; assigns exactly one type.
pub fn classify_kernel(input: &ClassifyInput) -> KernelType {
    let good = |f: Option<&GaborFit>| f.is_some_and(|g| g.r2 > input.r2_min);
    let both_good = good(input.fit_left) && good(input.fit_right);

    if both_good
        && input.dominance_bin == 4
        && input.phase_shift.is_some_and(|p| p.abs() < PI / 4.0)
    {
        return KernelType::MatchedGabor;
    }
    let monocularish = matches!(input.dominance_bin, 1 | 2 | 6 | 7);
    let anti_phase = input.phase_shift.is_some_and(|p| p.abs() > 3.0 * PI / 4.0);
    let tuned_away_from_zero = input.tuning_row.is_some_and(|row| {
        let mut sorted: Vec<f64> = row.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        row[input.zero_disparity_index] < median
    });
    if monocularish || (anti_phase && tuned_away_from_zero) {
        return KernelType::TunedInhibitory;
    }
    if !good(input.fit_left) && !good(input.fit_right) && input.radial_sign_change {
        return KernelType::BlobLike;
    }
    KernelType::Unclassified
}

/// Whether the mean-centered kernel's radial profile around its energy
/// centroid changes sign within half the kernel extent (center-surround
/// organization).
pub fn radial_sign_change<T: Scalar>(kernel: &ArrayView2<T>) -> bool {
    let (h, w) = kernel.dim();
    let vals: Vec<f64> = kernel.iter().map(|&v| to_f64(v)).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let mut wsum = 0.0;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for r in 0..h {
        for c in 0..w {
            let e = (vals[r * w + c] - mean).powi(2);
            wsum += e;
            cx += e * c as f64;
            cy += e * r as f64;
        }
    }
    if wsum <= 0.0 {
        return false;
    }
    cx /= wsum;
    cy /= wsum;

    let max_r = (h.min(w) / 2) as usize;
    let mut sums = vec![0.0f64; max_r + 1];
    let mut counts = vec![0usize; max_r + 1];
    for r in 0..h {
        for c in 0..w {
            let d = ((c as f64 - cx).powi(2) + (r as f64 - cy).powi(2)).sqrt().round() as usize;
            if d <= max_r {
                sums[d] += vals[r * w + c] - mean;
                counts[d] += 1;
            }
        }
    }
    let profile: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    let peak = profile.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak <= 0.0 {
        return false;
    }
    let threshold = 0.1 * peak;
    let mut first_sign = 0.0f64;
    for &v in &profile {
        if v.abs() >= threshold {
            if first_sign == 0.0 {
                first_sign = v.signum();
            } else if v.signum() != first_sign {
                return true;
            }
        }
    }
    false
}

/// Per-kernel statistics record (one JSONL row per kernel).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelStats {
    pub index: usize,
    pub fit_left: Option<GaborFit>,
    pub fit_right: Option<GaborFit>,
    pub dominance_angle: f64,
    pub dominance_bin: u8,
    pub position_shift_cycles: Option<f64>,
    pub phase_shift_rad: Option<f64>,
    pub kernel_type: KernelType,
}

/// Analysis options for a whole dictionary.
#[derive(Clone, Copy, Debug)]
pub struct AnalyzeOptions {
    pub fit: FitOptions,
    /// Quality cut used for shift statistics and classification.
    pub r2_min: f64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            fit: FitOptions::default(),
            r2_min: 0.93,
        }
    }
}

/// Fits and classifies every kernel pair of a dictionary. Shared
/// disparity tuning maps, when given, feed the tuned-inhibitory rule.
pub fn analyze_dictionary<T: Scalar>(
    dict: &Dictionary<T>,
    tuning: Option<&TuningMaps<T>>,
    opts: &AnalyzeOptions,
) -> Result<Vec<KernelStats>> {
    if let Some(t) = tuning {
        if t.mode() != TuningMode::Shared {
            return Err(Error::InvalidArgument(
                "kernel classification expects shared disparity tuning maps".into(),
            ));
        }
        if t.k() != dict.k() {
            return Err(Error::InvalidData(format!(
                "tuning table has {} kernels, dictionary {}",
                t.k(),
                dict.k()
            )));
        }
    }
    let zero_idx = tuning.map(|t| t.grid().zero_index()).unwrap_or(0);
    (0..dict.k())
        .into_par_iter()
        .map(|ki| {
            let left = dict.left().index_axis(ndarray::Axis(0), ki);
            let right = dict.right().index_axis(ndarray::Axis(0), ki);
            let fit_left = fit_gabor(&left, &opts.fit).ok();
            let fit_right = fit_gabor(&right, &opts.fit).ok();
            let dom = ocular_dominance(&left, &right)?;
            let shifts = match (&fit_left, &fit_right) {
                (Some(l), Some(r)) => shift_statistics(l, r, opts.r2_min).ok(),
                _ => None,
            };
            let row_f64: Option<Vec<f64>> =
                tuning.map(|t| t.row_shared(ki).iter().map(|&p| to_f64(p)).collect());
            let radial = radial_sign_change(&left) || radial_sign_change(&right);
            let kernel_type = classify_kernel(&ClassifyInput {
                fit_left: fit_left.as_ref(),
                fit_right: fit_right.as_ref(),
                dominance_bin: dom.bin,
                phase_shift: shifts.as_ref().map(|s| s.phase_shift_rad),
                tuning_row: row_f64.as_deref(),
                zero_disparity_index: zero_idx,
                radial_sign_change: radial,
                r2_min: opts.r2_min,
            });
            Ok(KernelStats {
                index: ki,
                fit_left,
                fit_right,
                dominance_angle: dom.angle,
                dominance_bin: dom.bin,
                position_shift_cycles: shifts.as_ref().map(|s| s.position_shift_cycles),
                phase_shift_rad: shifts.as_ref().map(|s| s.phase_shift_rad),
                kernel_type,
            })
        })
        .collect()
}

/// Mean Euclidean distance between estimated and true 2-vector labels.
pub fn mae(estimates: &[[f64; 2]], truths: &[[f64; 2]]) -> Result<f64> {
    if estimates.len() != truths.len() {
        return Err(Error::InvalidData(format!(
            "length mismatch: {} estimates vs {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::InvalidData("mae needs at least one sample".into()));
    }
    let sum: f64 = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| ((e[0] - t[0]).powi(2) + (e[1] - t[1]).powi(2)).sqrt())
        .sum();
    Ok(sum / estimates.len() as f64)
}

/// One bin of the error predictor: a contiguous active-count range and the
/// error percentiles observed inside it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictorBin {
    pub count_lo: u32,
    pub count_hi: u32,
    pub samples: usize,
    /// One value per requested percentile.
    pub values: Vec<f64>,
}

/// Binned percentile table mapping active-coefficient count to expected
/// inference error.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorPredictor {
    pub min_per_bin: usize,
    pub percentiles: Vec<f64>,
    pub bins: Vec<PredictorBin>,
}

/// Nearest-rank percentile of an ascending-sorted slice.
fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Builds the predictor from `(active_count, absolute_error)` samples.
/// Bins are greedy along ascending count, each holding at least
/// `min_per_bin` samples (never splitting equal counts), so bin widths are
/// unequal; a short tail merges into the final bin.
pub fn build_error_predictor(
    samples: &[(u32, f64)],
    min_per_bin: usize,
    percentiles: &[f64],
) -> Result<ErrorPredictor> {
    if min_per_bin == 0 {
        return Err(Error::InvalidArgument("min_per_bin must be positive".into()));
    }
    if samples.len() < min_per_bin {
        return Err(Error::InvalidData(format!(
            "{} samples cannot fill a bin of {min_per_bin}",
            samples.len()
        )));
    }
    if percentiles.is_empty() || percentiles.iter().any(|&p| !(0.0..=100.0).contains(&p)) {
        return Err(Error::InvalidArgument(format!(
            "percentiles must lie in [0, 100], got {percentiles:?}"
        )));
    }
    let mut sorted: Vec<(u32, f64)> = samples.to_vec();
    sorted.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut bins: Vec<(usize, usize)> = Vec::new();
    let mut start = 0usize;
    while start < sorted.len() {
        let mut end = (start + min_per_bin).min(sorted.len());
        // Never split a run of equal counts across bins.
        while end < sorted.len() && sorted[end].0 == sorted[end - 1].0 {
            end += 1;
        }
        if end - start < min_per_bin {
            // Remainder too small: merge into the previous bin.
            if let Some(last) = bins.last_mut() {
                last.1 = sorted.len();
            } else {
                return Err(Error::InvalidData(
                    "not enough distinct samples for one full bin".into(),
                ));
            }
            break;
        }
        bins.push((start, end));
        start = end;
    }

    let bins = bins
        .into_iter()
        .map(|(s, e)| {
            let mut errs: Vec<f64> = sorted[s..e].iter().map(|&(_, err)| err).collect();
            errs.sort_by(f64::total_cmp);
            PredictorBin {
                count_lo: sorted[s].0,
                count_hi: sorted[e - 1].0,
                samples: e - s,
                values: percentiles.iter().map(|&p| nearest_rank(&errs, p)).collect(),
            }
        })
        .collect();
    Ok(ErrorPredictor {
        min_per_bin,
        percentiles: percentiles.to_vec(),
        bins,
    })
}

impl ErrorPredictor {
    /// Expected error at a given activity level; counts outside the table
    /// clamp to the end bins.
    pub fn predict(&self, active_count: u32, percentile: f64) -> Result<f64> {
        let pi = self
            .percentiles
            .iter()
            .position(|&p| (p - percentile).abs() < 1e-9)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "percentile {percentile} not in the built table {:?}",
                    self.percentiles
                ))
            })?;
        let mut chosen = 0usize;
        for (i, bin) in self.bins.iter().enumerate() {
            if active_count >= bin.count_lo {
                chosen = i;
            }
            if active_count <= bin.count_hi {
                break;
            }
        }
        Ok(self.bins[chosen].values[pi])
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(path, format!("predictor not serializable: {e}")))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path, format!("bad predictor JSON: {e}")))
    }
}

/// Jammalamadaka-SenGupta circular-circular correlation coefficient.
pub fn circular_correlation(angles_a: &[f64], angles_b: &[f64]) -> Result<f64> {
    if angles_a.len() != angles_b.len() {
        return Err(Error::InvalidData(format!(
            "length mismatch: {} vs {}",
            angles_a.len(),
            angles_b.len()
        )));
    }
    if angles_a.len() < 3 {
        return Err(Error::InvalidData("need at least 3 angle pairs".into()));
    }
    let circ_mean = |xs: &[f64]| -> f64 {
        let s: f64 = xs.iter().map(|x| x.sin()).sum();
        let c: f64 = xs.iter().map(|x| x.cos()).sum();
        s.atan2(c)
    };
    let ma = circ_mean(angles_a);
    let mb = circ_mean(angles_b);
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&a, &b) in angles_a.iter().zip(angles_b) {
        let sa = (a - ma).sin();
        let sb = (b - mb).sin();
        num += sa * sb;
        va += sa * sa;
        vb += sb * sb;
    }
    if va <= 1e-30 || vb <= 1e-30 {
        return Err(Error::InvalidData(
            "zero circular variance; correlation undefined".into(),
        ));
    }
    Ok(num / (va * vb).sqrt())
}

/// Axial correction for comparing kernel orientation (period pi) against
/// surface tilt (period 2 pi): orientations are doubled before the
/// circular correlation.
pub fn orientation_tilt_correlation(orientations: &[f64], tilts: &[f64]) -> Result<f64> {
    let doubled: Vec<f64> = orientations.iter().map(|&o| 2.0 * o).collect();
    circular_correlation(&doubled, tilts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synth(params: &GaborFit, n: usize) -> Array2<f64> {
        params.render(n, n)
    }

    fn base_fit() -> GaborFit {
        GaborFit {
            offset: 0.02,
            scale: 0.6,
            x0: 7.3,
            y0: 8.1,
            orientation: 0.6,
            envelope_theta: 0.15,
            sigma_x: 2.2,
            sigma_y: 3.4,
            frequency: 0.14,
            phase: 0.8,
            r2: 1.0,
        }
    }

    #[test]
    fn gabor_fit_recovers_synthetic_parameters() {
        let truth = base_fit();
        let kernel = synth(&truth, 16);
        let fit = fit_gabor(&kernel.view(), &FitOptions::default()).unwrap();
        assert!(fit.r2 > 0.999, "r2 = {}", fit.r2);
        assert!((fit.offset - truth.offset).abs() < 0.02 * truth.scale);
        assert!((fit.scale - truth.scale).abs() / truth.scale < 0.02);
        assert!((fit.x0 - truth.x0).abs() < 0.32);
        assert!((fit.y0 - truth.y0).abs() < 0.32);
        assert!((fit.orientation - truth.orientation).abs() < 0.02 * PI);
        assert!((fit.frequency - truth.frequency).abs() / truth.frequency < 0.02);
        assert!((fit.sigma_x - truth.sigma_x).abs() / truth.sigma_x < 0.02);
        assert!((fit.sigma_y - truth.sigma_y).abs() / truth.sigma_y < 0.02);
        assert!(wrap_pi(fit.phase - truth.phase).abs() < 0.02 * PI);
    }

    #[test]
    fn gabor_fit_is_scale_equivariant() {
        let truth = base_fit();
        let kernel = synth(&truth, 16);
        let scaled = kernel.map(|&v| 3.0 * v);
        let f1 = fit_gabor(&kernel.view(), &FitOptions::default()).unwrap();
        let f2 = fit_gabor(&scaled.view(), &FitOptions::default()).unwrap();
        assert!((f2.scale / f1.scale - 3.0).abs() < 0.01);
        assert!((f2.orientation - f1.orientation).abs() < 1e-3);
        assert!((f2.frequency - f1.frequency).abs() < 1e-4);
        assert!((f2.sigma_x - f1.sigma_x).abs() < 0.02);
        assert!((f2.r2 - f1.r2).abs() < 1e-6);
    }

    #[test]
    fn gabor_fit_rejects_flat_kernels() {
        let flat = Array2::<f64>::zeros((16, 16));
        assert!(fit_gabor(&flat.view(), &FitOptions::default()).is_err());
    }

    #[test]
    fn gabor_blob_bound_sensitivity() {
        // Pure 2-D Gaussian blob: excellent unbounded fit with f -> small,
        // degraded under the n >= 0.25 bound.
        let blob = Array2::from_shape_fn((16, 16), |(r, c)| {
            let d2 = (r as f64 - 7.5).powi(2) + (c as f64 - 7.5).powi(2);
            0.8 * (-d2 / (2.0 * 2.0f64.powi(2))).exp()
        });
        let unbounded = fit_gabor(&blob.view(), &FitOptions::default()).unwrap();
        assert!(unbounded.r2 > 0.99, "unbounded r2 = {}", unbounded.r2);
        let bounded = fit_gabor(
            &blob.view(),
            &FitOptions {
                min_n: Some(0.25),
                theta_locked: true,
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert!(bounded.nx() >= 0.25 - 1e-9 && bounded.ny() >= 0.25 - 1e-9);
        assert!(
            bounded.r2 < unbounded.r2 - 1e-3,
            "bound should hurt: {} vs {}",
            bounded.r2,
            unbounded.r2
        );
    }

    #[test]
    fn dominance_examples_and_edges() {
        let gabor = synth(&base_fit(), 16);
        let zeros = Array2::<f64>::zeros((16, 16));

        let d = ocular_dominance(&gabor.view(), &gabor.view()).unwrap();
        assert!((d.angle - PI / 4.0).abs() < 1e-12);
        assert_eq!(d.bin, 4);

        // Right kernel zero: left-monocular end.
        let d = ocular_dominance(&gabor.view(), &zeros.view()).unwrap();
        assert!((d.angle - PI / 2.0).abs() < 1e-12);
        assert_eq!(d.bin, 7);

        let d = ocular_dominance(&zeros.view(), &gabor.view()).unwrap();
        assert_eq!(d.bin, 1);

        assert!(ocular_dominance(&zeros.view(), &zeros.view()).is_err());

        // Edge probe around the 3/4 bin boundary at angle 3 pi / 14.
        for (delta, want) in [(1e-6, 4u8), (-1e-6, 3u8)] {
            let ratio = (3.0 * PI / 14.0 + delta).tan();
            let left = Array2::from_elem((4, 4), ratio);
            let right = Array2::from_elem((4, 4), 1.0);
            let d = ocular_dominance(&left.view(), &right.view()).unwrap();
            assert_eq!(d.bin, want, "delta {delta}");
        }
    }

    #[test]
    fn shift_statistics_examples() {
        let l = base_fit();
        // Identical fits.
        let s = shift_statistics(&l, &l, 0.93).unwrap();
        assert_eq!(s.position_shift_cycles, 0.0);
        assert_eq!(s.phase_shift_rad, 0.0);

        // Pure position shift of half a period perpendicular to the
        // orientation (i.e. along the wave axis).
        let mut r = l;
        let half_period = 0.5 / l.frequency;
        r.x0 += half_period * l.orientation.cos();
        r.y0 += half_period * l.orientation.sin();
        let s = shift_statistics(&l, &r, 0.93).unwrap();
        assert!((s.position_shift_cycles - 0.5).abs() < 1e-12);
        assert!(s.phase_shift_rad.abs() < 1e-12);

        // Pure phase shift of pi with zero displacement.
        let mut r = l;
        r.phase = l.phase + PI;
        let s = shift_statistics(&l, &r, 0.93).unwrap();
        assert!(s.position_shift_cycles.abs() < 1e-12);
        assert!((s.phase_shift_rad.abs() - PI).abs() < 1e-12);

        // Quality cut.
        let mut bad = l;
        bad.r2 = 0.5;
        assert!(matches!(
            shift_statistics(&l, &bad, 0.93),
            Err(Error::QualityCut(_))
        ));
    }

    #[test]
    fn classification_examples() {
        // Matched Gabor: identical pair shifted 2 px perpendicular to the
        // orientation, balanced energy.
        let l = base_fit();
        let left = synth(&l, 16);
        let mut rp = l;
        rp.x0 += 2.0 * l.orientation.cos();
        rp.y0 += 2.0 * l.orientation.sin();
        let right = synth(&rp, 16);
        let fit_l = fit_gabor(&left.view(), &FitOptions::default()).unwrap();
        let fit_r = fit_gabor(&right.view(), &FitOptions::default()).unwrap();
        let dom = ocular_dominance(&left.view(), &right.view()).unwrap();
        let shifts = shift_statistics(&fit_l, &fit_r, 0.93).unwrap();
        let t = classify_kernel(&ClassifyInput {
            fit_left: Some(&fit_l),
            fit_right: Some(&fit_r),
            dominance_bin: dom.bin,
            phase_shift: Some(shifts.phase_shift_rad),
            tuning_row: None,
            zero_disparity_index: 0,
            radial_sign_change: false,
            r2_min: 0.93,
        });
        assert_eq!(t, KernelType::MatchedGabor);

        // Left Gabor, right zeros: monocular, tuned inhibitory.
        let zeros = Array2::<f64>::zeros((16, 16));
        let dom = ocular_dominance(&left.view(), &zeros.view()).unwrap();
        let t = classify_kernel(&ClassifyInput {
            fit_left: Some(&fit_l),
            fit_right: None,
            dominance_bin: dom.bin,
            phase_shift: None,
            tuning_row: None,
            zero_disparity_index: 0,
            radial_sign_change: false,
            r2_min: 0.93,
        });
        assert_eq!(t, KernelType::TunedInhibitory);

        // Center-surround difference of Gaussians on both halves.
        let dog = Array2::from_shape_fn((16, 16), |(r, c)| {
            let d2 = (r as f64 - 7.5).powi(2) + (c as f64 - 7.5).powi(2);
            (-d2 / (2.0 * 1.5f64.powi(2))).exp() - 0.55 * (-d2 / (2.0 * 3.2f64.powi(2))).exp()
        });
        assert!(radial_sign_change(&dog.view()));
        let fit_dog = fit_gabor(&dog.view(), &FitOptions::default()).ok();
        let dom = ocular_dominance(&dog.view(), &dog.view()).unwrap();
        let t = classify_kernel(&ClassifyInput {
            fit_left: fit_dog.as_ref().filter(|f| f.r2 > 0.93),
            fit_right: fit_dog.as_ref().filter(|f| f.r2 > 0.93),
            dominance_bin: dom.bin,
            phase_shift: None,
            tuning_row: None,
            zero_disparity_index: 0,
            radial_sign_change: true,
            r2_min: 0.93,
        });
        // Either the Gabor fit fails the quality cut (blob-like) or the
        // radial rule would have fired; the constructed input must land in
        // BlobLike.
        if let Some(f) = &fit_dog {
            assert!(
                f.r2 <= 0.93,
                "difference-of-Gaussians should defeat the Gabor model, r2 = {}",
                f.r2
            );
        }
        assert_eq!(t, KernelType::BlobLike);
    }

    #[test]
    fn mae_examples_and_invariance() {
        let a = [[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&[[3.0, 4.0]], &[[0.0, 0.0]]).unwrap(), 5.0);
        assert!(mae(&a, &[[0.0, 0.0]]).is_err());
        assert!(mae(&[], &[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let est: Vec<[f64; 2]> = (0..20).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect();
        let tru: Vec<[f64; 2]> = (0..20).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect();
        let hand: f64 = est
            .iter()
            .zip(&tru)
            .map(|(e, t)| ((e[0] - t[0]).powi(2) + (e[1] - t[1]).powi(2)).sqrt())
            .sum::<f64>()
            / 20.0;
        assert!((mae(&est, &tru).unwrap() - hand).abs() < 1e-12);

        // Permutation invariance (same pairing, shuffled jointly).
        let mut idx: Vec<usize> = (0..20).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng);
        let est_p: Vec<[f64; 2]> = idx.iter().map(|&i| est[i]).collect();
        let tru_p: Vec<[f64; 2]> = idx.iter().map(|&i| tru[i]).collect();
        assert!((mae(&est_p, &tru_p).unwrap() - hand).abs() < 1e-12);

        // Triangle-style bound through an intermediate list.
        let mid: Vec<[f64; 2]> = (0..20).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect();
        let ac = mae(&est, &tru).unwrap();
        let ab = mae(&est, &mid).unwrap();
        let bc = mae(&mid, &tru).unwrap();
        assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn predictor_bins_and_prediction() {
        // Identical errors: every percentile equals that error.
        let flat: Vec<(u32, f64)> = (0..100).map(|i| (i % 10, 0.7)).collect();
        let p = build_error_predictor(&flat, 20, &[50.0, 75.0]).unwrap();
        for bin in &p.bins {
            assert_eq!(bin.values, vec![0.7, 0.7]);
        }

        // Errors linear in count: strictly increasing bin medians.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let linear: Vec<(u32, f64)> = (0..1000)
            .map(|_| {
                let c = rng.gen_range(0u32..50);
                (c, c as f64 * 0.1 + rng.gen_range(0.0..0.01))
            })
            .collect();
        let p = build_error_predictor(&linear, 100, &[50.0]).unwrap();
        assert!(p.bins.len() >= 4);
        for pair in p.bins.windows(2) {
            assert!(pair[1].values[0] > pair[0].values[0]);
            assert!(pair[1].count_lo > pair[0].count_hi);
        }

        // Bin-count bound: 10^4 samples at 10^3 per bin gives at most 10.
        let many: Vec<(u32, f64)> = (0..10_000).map(|i| (i as u32 % 97, i as f64)).collect();
        let p = build_error_predictor(&many, 1000, &[50.0]).unwrap();
        assert!(p.bins.len() <= 10);

        // Input-order invariance.
        let mut shuffled = linear.clone();
        shuffled.reverse();
        let p2 = build_error_predictor(&shuffled, 100, &[50.0]).unwrap();
        let p1 = build_error_predictor(&linear, 100, &[50.0]).unwrap();
        assert_eq!(
            serde_json::to_string(&p1).unwrap(),
            serde_json::to_string(&p2).unwrap()
        );

        // Clamping below and above, interior lookup, unknown percentile.
        let lo = p1.bins[0].count_lo;
        let hi = p1.bins.last().unwrap().count_hi;
        assert_eq!(p1.predict(0, 50.0).unwrap(), p1.bins[0].values[0]);
        let _ = lo;
        assert_eq!(
            p1.predict(hi + 100, 50.0).unwrap(),
            p1.bins.last().unwrap().values[0]
        );
        let mid_bin = &p1.bins[1];
        assert_eq!(p1.predict(mid_bin.count_lo, 50.0).unwrap(), mid_bin.values[0]);
        assert!(p1.predict(5, 99.0).is_err());

        assert!(build_error_predictor(&linear[..50], 100, &[50.0]).is_err());
    }

    #[test]
    fn circular_correlation_examples() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let neg: Vec<f64> = a.iter().map(|&x| -x).collect();
        assert!((circular_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((circular_correlation(&a, &neg).unwrap() + 1.0).abs() < 1e-12);

        // Hand-computed 5-angle instance via the direct formula.
        let xs: [f64; 5] = [0.1, 1.2, 2.5, -1.0, 0.7];
        let ys: [f64; 5] = [0.3, 1.0, 2.0, -0.8, 1.4];
        let mx = xs.iter().map(|x| x.sin()).sum::<f64>()
            .atan2(xs.iter().map(|x| x.cos()).sum::<f64>());
        let my = ys.iter().map(|y| y.sin()).sum::<f64>()
            .atan2(ys.iter().map(|y| y.cos()).sum::<f64>());
        let mut num = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for i in 0..5 {
            num += (xs[i] - mx).sin() * (ys[i] - my).sin();
            vx += (xs[i] - mx).sin().powi(2);
            vy += (ys[i] - my).sin().powi(2);
        }
        let expected = num / (vx * vy).sqrt();
        assert!((circular_correlation(&xs, &ys).unwrap() - expected).abs() < 1e-12);

        // Errors.
        assert!(circular_correlation(&xs[..3], &ys[..2]).is_err());
        assert!(circular_correlation(&[0.0, 0.0, 0.0], &[0.1, 0.2, 0.3]).is_err());

        // Axial correction: orientation phi maps linearly onto tilt 2 phi,
        // a perfect positive circular relation after doubling.
        let orient: Vec<f64> = (0..10).map(|i| i as f64 * 0.31).collect();
        let tilt: Vec<f64> = orient.iter().map(|&o| 2.0 * o + 0.4).collect();
        let rho = orientation_tilt_correlation(&orient, &tilt).unwrap();
        assert!((rho - 1.0).abs() < 1e-9);
    }
}
