//! Convolutional stereo sparse coding with the locally competitive
//! algorithm.
//!
//! A binocular [`Dictionary`] holds K paired left/right kernels with joint
//! unit norm. Encoding runs leaky-integrator dynamics with hard
//! thresholding:
//!
//! ```text
//! u <- u + step * (b - u - (corr(recon(a)) - a)),    a = T_lambda(u)
//! ```
//!
//! where `b` is the feed-forward drive (cross-correlation of both
//! half-images with both half-kernels, summed) and the lateral term
//! `corr(recon(a))` realizes the Gram product without ever materializing a
//! K^2-sized kernel-similarity tensor. Dictionary learning alternates
//! encoding (kernels frozen) with averaged residual-correlation gradient
//! steps and joint re-normalization.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::imagecore::{Image, StereoPair};
use crate::scalar::{cast, to_f64, Scalar};
use crate::tensor;

/// Paired left/right convolution kernels with joint unit norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary<T> {
    kernel_size: usize,
    stride: usize,
    left: Array3<T>,
    right: Array3<T>,
}

impl<T: Scalar> Dictionary<T> {
    /// Validates shapes and projects every kernel pair to joint unit norm.
    pub fn new(left: Array3<T>, right: Array3<T>, stride: usize) -> Result<Self> {
        let (k, ks, ks2) = left.dim();
        if left.dim() != right.dim() {
            return Err(Error::InvalidData(format!(
                "left/right kernel stacks disagree: {:?} vs {:?}",
                left.dim(),
                right.dim()
            )));
        }
        if k == 0 {
            return Err(Error::InvalidData("dictionary needs at least one kernel".into()));
        }
        if ks != ks2 || ks == 0 {
            return Err(Error::InvalidData(format!("kernels must be square, got {ks}x{ks2}")));
        }
        if stride == 0 || ks % stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "stride {stride} must divide the kernel size {ks}"
            )));
        }
        let mut dict = Dictionary {
            kernel_size: ks,
            stride,
            left,
            right,
        };
        dict.normalize_joint()?;
        Ok(dict)
    }

    /// Seeded white-noise initialization, jointly normalized.
    pub fn init_noise(k: usize, kernel_size: usize, stride: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| cast::<T>(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)))
                .collect()
        };
        let n = k * kernel_size * kernel_size;
        let left = Array3::from_shape_vec((k, kernel_size, kernel_size), draw(n))
            .expect("shape matches by construction");
        let right = Array3::from_shape_vec((k, kernel_size, kernel_size), draw(n))
            .expect("shape matches by construction");
        Dictionary::new(left, right, stride)
    }

    pub fn k(&self) -> usize {
        self.left.dim().0
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn left(&self) -> &Array3<T> {
        &self.left
    }

    pub fn right(&self) -> &Array3<T> {
        &self.right
    }

    fn kernel_area(&self) -> usize {
        self.kernel_size * self.kernel_size
    }

    fn left_flat(&self) -> &[T] {
        self.left.as_slice().expect("kernel storage is contiguous")
    }

    fn right_flat(&self) -> &[T] {
        self.right.as_slice().expect("kernel storage is contiguous")
    }

    /// `||phi_L,k||^2 + ||phi_R,k||^2` for one kernel pair.
    pub fn joint_norm_sq(&self, k: usize) -> f64 {
        let area = self.kernel_area();
        let l = &self.left_flat()[k * area..(k + 1) * area];
        let r = &self.right_flat()[k * area..(k + 1) * area];
        l.iter().chain(r).map(|&v| to_f64(v).powi(2)).sum()
    }

    /// Projects every kernel pair back onto the joint unit sphere.
    pub fn normalize_joint(&mut self) -> Result<()> {
        let area = self.kernel_area();
        for k in 0..self.k() {
            let norm = self.joint_norm_sq(k).sqrt();
            if norm <= 0.0 || !norm.is_finite() {
                return Err(Error::InvalidData(format!(
                    "kernel pair {k} has zero or non-finite weight energy"
                )));
            }
            let inv = cast::<T>(1.0 / norm);
            let l = self.left.as_slice_mut().expect("contiguous");
            for v in &mut l[k * area..(k + 1) * area] {
                *v = *v * inv;
            }
            let r = self.right.as_slice_mut().expect("contiguous");
            for v in &mut r[k * area..(k + 1) * area] {
                *v = *v * inv;
            }
        }
        Ok(())
    }

    /// Feature-map dimensions for an input of `(h, w)` pixels.
    pub fn map_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ks = self.kernel_size;
        let s = self.stride;
        if h < ks || w < ks || (h - ks) % s != 0 || (w - ks) % s != 0 {
            return Err(Error::InvalidData(format!(
                "image {h}x{w} is incompatible with kernel {ks} and stride {s}"
            )));
        }
        Ok(((h - ks) / s + 1, (w - ks) / s + 1))
    }

    /// Writes the dictionary as a `[K, 2, ks, ks]` f32 tensor plus a JSON
    /// sidecar carrying `kernel_size`, `stride` and any extra metadata.
    pub fn save(&self, path: impl AsRef<Path>, extra_meta: serde_json::Value) -> Result<()> {
        let path = path.as_ref();
        let k = self.k();
        let area = self.kernel_area();
        let mut data = Vec::with_capacity(k * 2 * area);
        for ki in 0..k {
            data.extend(
                self.left_flat()[ki * area..(ki + 1) * area]
                    .iter()
                    .map(|&v| to_f64(v) as f32),
            );
            data.extend(
                self.right_flat()[ki * area..(ki + 1) * area]
                    .iter()
                    .map(|&v| to_f64(v) as f32),
            );
        }
        tensor::write_f32(path, &[k, 2, self.kernel_size, self.kernel_size], &data)?;
        let mut meta = serde_json::json!({
            "kind": "dictionary",
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "kernels": k,
        });
        if let (Some(obj), Some(extra)) = (meta.as_object_mut(), extra_meta.as_object()) {
            for (key, value) in extra {
                obj.insert(key.clone(), value.clone());
            }
        }
        tensor::write_sidecar(path, &meta)
    }

    /// Loads a dictionary written by [`Dictionary::save`]. Kernel pairs are
    /// re-projected to joint unit norm to absorb f32 storage rounding.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let dict = Self::load_exact(path)?;
        let mut dict = dict;
        dict.normalize_joint()?;
        Ok(dict)
    }

    /// Loads a dictionary preserving the stored weights bit-for-bit (used
    /// for checkpoint resume, where re-normalization would perturb the
    /// replay). Joint norms are validated loosely instead.
    pub fn load_exact(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (dims, data) = tensor::read_f32(path)?;
        if dims.len() != 4 || dims[1] != 2 || dims[2] != dims[3] {
            return Err(Error::format(
                path,
                format!("expected a [K, 2, ks, ks] dictionary tensor, got {dims:?}"),
            ));
        }
        let meta = tensor::read_sidecar(path)?;
        let stride = meta
            .get("stride")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::format(path, "sidecar lacks \"stride\""))? as usize;
        let (k, ks) = (dims[0], dims[2]);
        if k == 0 || ks == 0 || stride == 0 || ks % stride != 0 {
            return Err(Error::format(
                path,
                format!("invalid dictionary geometry: K={k}, ks={ks}, stride={stride}"),
            ));
        }
        let area = ks * ks;
        let mut left = Vec::with_capacity(k * area);
        let mut right = Vec::with_capacity(k * area);
        for ki in 0..k {
            let base = ki * 2 * area;
            left.extend(data[base..base + area].iter().map(|&v| cast::<T>(v as f64)));
            right.extend(
                data[base + area..base + 2 * area]
                    .iter()
                    .map(|&v| cast::<T>(v as f64)),
            );
        }
        let dict = Dictionary {
            kernel_size: ks,
            stride,
            left: Array3::from_shape_vec((k, ks, ks), left).expect("shape matches"),
            right: Array3::from_shape_vec((k, ks, ks), right).expect("shape matches"),
        };
        for ki in 0..k {
            let norm = dict.joint_norm_sq(ki);
            if (norm - 1.0).abs() > 1e-3 {
                return Err(Error::format(
                    path,
                    format!("kernel pair {ki} has joint norm^2 {norm:.6}, not unit"),
                ));
            }
        }
        Ok(dict)
    }
}

/// Number of kernels that realizes a given overcompleteness ratio for
/// stereo input at the given stride (`K = ceil(o * 2 * stride^2)`).
pub fn kernels_for_overcompleteness(overcompleteness: f64, stride: usize) -> usize {
    (overcompleteness * 2.0 * (stride * stride) as f64).ceil() as usize
}

/// Overcompleteness ratio of a kernel count at the given stride.
pub fn overcompleteness(k: usize, stride: usize) -> f64 {
    k as f64 / (2.0 * (stride * stride) as f64)
}

/// Links feature-map cells to image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeGeometry {
    pub k: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

impl CodeGeometry {
    /// Top-left image pixel of the receptive field of cell `(m, n)`.
    pub fn patch_origin(&self, m: usize, n: usize) -> (usize, usize) {
        (m * self.stride, n * self.stride)
    }
}

/// Membrane potentials and activations for one stereo pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeState<T> {
    geometry: CodeGeometry,
    u: Array3<T>,
    a: Array3<T>,
}

impl<T: Scalar> CodeState<T> {
    /// Builds a code state from membrane potentials, deriving the
    /// activations through the hard threshold.
    pub fn from_potentials(u: Array3<T>, lambda: f64, geometry: CodeGeometry) -> Result<Self> {
        if u.dim() != (geometry.k, geometry.map_h, geometry.map_w) {
            return Err(Error::InvalidData(format!(
                "potential dims {:?} disagree with geometry {:?}",
                u.dim(),
                geometry
            )));
        }
        let lam = cast::<T>(lambda);
        let a = u.map(|&v| threshold(v, lam));
        Ok(CodeState { geometry, u, a })
    }

    pub fn zeros(geometry: CodeGeometry) -> Self {
        let dims = (geometry.k, geometry.map_h, geometry.map_w);
        CodeState {
            geometry,
            u: Array3::zeros(dims),
            a: Array3::zeros(dims),
        }
    }

    pub fn geometry(&self) -> &CodeGeometry {
        &self.geometry
    }

    pub fn potentials(&self) -> &Array3<T> {
        &self.u
    }

    pub fn activations(&self) -> &Array3<T> {
        &self.a
    }

    fn activations_flat(&self) -> &[T] {
        self.a.as_slice().expect("contiguous")
    }

    /// Number of strictly positive activations.
    pub fn active_count(&self) -> usize {
        self.activations_flat()
            .iter()
            .filter(|&&v| v > T::zero())
            .count()
    }
}

/// Hard threshold with nonnegativity: `u` if `u > lambda`, else 0.
#[inline]
pub fn threshold<T: Scalar>(u: T, lambda: T) -> T {
    if u > lambda {
        u
    } else {
        T::zero()
    }
}

/// Binary states `H(a)`: 1 where the activation is positive.
pub fn binarize<T: Scalar>(code: &CodeState<T>) -> Array3<u8> {
    code.activations().map(|&v| u8::from(v > T::zero()))
}

/// LCA encoding parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LcaConfig {
    /// Activation threshold (sparsity load). Training-time default 0.1.
    pub lambda: f64,
    /// Maximum number of integration steps.
    pub iterations: usize,
    /// Dimensionless integration step `dt / tau`.
    pub step: f64,
    /// Relative energy-change stop criterion.
    pub tolerance: f64,
    /// Recorded with artifacts; the dynamics themselves are deterministic.
    pub seed: u64,
}

impl Default for LcaConfig {
    fn default() -> Self {
        LcaConfig {
            lambda: 0.1,
            iterations: 400,
            step: 0.1,
            tolerance: 1e-5,
            seed: 0,
        }
    }
}

impl LcaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "integration step must lie in (0, 1], got {}",
                self.step
            )));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidArgument("iteration count must be >= 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tolerance must be >= 0, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// Energy bookkeeping for one code state.
///
/// `total = residual + lambda * count` is the reported convention. The
/// hard-threshold dynamics descend `descent = residual + lambda^2/2 *
/// count`, which also drives the stop criterion; residual and raw count are
/// always available separately so any weighting can be recovered.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Energy<T> {
    /// `1/2 (||I_L - recon_L||^2 + ||I_R - recon_R||^2)`.
    pub residual: T,
    /// Number of strictly super-threshold coefficients.
    pub count: usize,
    /// `residual + lambda * count`.
    pub total: T,
    /// `residual + lambda^2 / 2 * count`; the Lyapunov function of the
    /// hard-threshold dynamics.
    pub descent: T,
}

impl<T: Scalar> Energy<T> {
    fn from_parts(residual: T, count: usize, lambda: f64) -> Self {
        let lam = cast::<T>(lambda);
        let half_lam_sq = cast::<T>(lambda * lambda * 0.5);
        let c = cast::<T>(count as f64);
        Energy {
            residual,
            count,
            total: residual + lam * c,
            descent: residual + half_lam_sq * c,
        }
    }
}

/// Shared layout for the convolution loops.
struct ConvPlan {
    k: usize,
    ks: usize,
    stride: usize,
    map_h: usize,
    map_w: usize,
    w: usize,
}

impl ConvPlan {
    fn new<T: Scalar>(dict: &Dictionary<T>, h: usize, w: usize) -> Result<ConvPlan> {
        let (map_h, map_w) = dict.map_dims(h, w)?;
        Ok(ConvPlan {
            k: dict.k(),
            ks: dict.kernel_size(),
            stride: dict.stride(),
            map_h,
            map_w,
            w,
        })
    }

    fn geometry(&self) -> CodeGeometry {
        CodeGeometry {
            k: self.k,
            map_h: self.map_h,
            map_w: self.map_w,
            kernel_size: self.ks,
            stride: self.stride,
        }
    }
}

/// Dot product with four independent accumulators; the split dependency
/// chains let the compiler vectorize the reduction.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (ai, bi) = (&a[4 * i..4 * i + 4], &b[4 * i..4 * i + 4]);
        acc[0] = acc[0] + ai[0] * bi[0];
        acc[1] = acc[1] + ai[1] * bi[1];
        acc[2] = acc[2] + ai[2] * bi[2];
        acc[3] = acc[3] + ai[3] * bi[3];
    }
    let mut tail = T::zero();
    for i in 4 * chunks..a.len() {
        tail = tail + a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Strided valid cross-correlation of both halves with both half-kernels,
/// summed per kernel: the feed-forward drive `b`.
fn correlate_into<T: Scalar>(
    plan: &ConvPlan,
    dict: &Dictionary<T>,
    left: &[T],
    right: &[T],
    out: &mut [T],
    patch_l: &mut [T],
    patch_r: &mut [T],
) {
    let (k, ks, s, mw, mh, w) = (plan.k, plan.ks, plan.stride, plan.map_w, plan.map_h, plan.w);
    let area = ks * ks;
    let kl = dict.left_flat();
    let kr = dict.right_flat();
    for m in 0..mh {
        for n in 0..mw {
            let (r0, c0) = (m * s, n * s);
            for i in 0..ks {
                let src = (r0 + i) * w + c0;
                patch_l[i * ks..(i + 1) * ks].copy_from_slice(&left[src..src + ks]);
                patch_r[i * ks..(i + 1) * ks].copy_from_slice(&right[src..src + ks]);
            }
            for ki in 0..k {
                let base = ki * area;
                let acc = dot(patch_l, &kl[base..base + area])
                    + dot(patch_r, &kr[base..base + area]);
                out[ki * mh * mw + m * mw + n] = acc;
            }
        }
    }
}

/// Transposed strided convolution: stamps `a * kernel` at every active
/// cell, summing overlaps.
fn reconstruct_into<T: Scalar>(
    plan: &ConvPlan,
    dict: &Dictionary<T>,
    activations: &[T],
    left: &mut [T],
    right: &mut [T],
) {
    left.fill(T::zero());
    right.fill(T::zero());
    let (k, ks, s, mw, mh, w) = (plan.k, plan.ks, plan.stride, plan.map_w, plan.map_h, plan.w);
    let area = ks * ks;
    let kl = dict.left_flat();
    let kr = dict.right_flat();
    for ki in 0..k {
        let base = ki * area;
        for m in 0..mh {
            for n in 0..mw {
                let a = activations[ki * mh * mw + m * mw + n];
                if a == T::zero() {
                    continue;
                }
                let (r0, c0) = (m * s, n * s);
                for i in 0..ks {
                    let dst = (r0 + i) * w + c0;
                    let krow = &kl[base + i * ks..base + (i + 1) * ks];
                    for (o, &kv) in left[dst..dst + ks].iter_mut().zip(krow) {
                        *o = *o + a * kv;
                    }
                    let krow = &kr[base + i * ks..base + (i + 1) * ks];
                    for (o, &kv) in right[dst..dst + ks].iter_mut().zip(krow) {
                        *o = *o + a * kv;
                    }
                }
            }
        }
    }
}

/// Feed-forward drive of a pair under a dictionary (strided
/// cross-correlation, both halves summed).
pub fn correlate<T: Scalar>(dict: &Dictionary<T>, pair: &StereoPair<T>) -> Result<Array3<T>> {
    let (h, w) = pair.dims();
    let plan = ConvPlan::new(dict, h, w)?;
    let mut out = vec![T::zero(); plan.k * plan.map_h * plan.map_w];
    let mut patch_l = vec![T::zero(); plan.ks * plan.ks];
    let mut patch_r = vec![T::zero(); plan.ks * plan.ks];
    correlate_into(
        &plan,
        dict,
        pair.left().as_slice(),
        pair.right().as_slice(),
        &mut out,
        &mut patch_l,
        &mut patch_r,
    );
    Ok(Array3::from_shape_vec((plan.k, plan.map_h, plan.map_w), out).expect("shape matches"))
}

/// Reconstruction `sum_k phi_k (*) A_k` realized as a strided transposed
/// convolution; overlapping contributions sum.
pub fn reconstruct<T: Scalar>(dict: &Dictionary<T>, code: &CodeState<T>) -> Result<StereoPair<T>> {
    let geom = code.geometry();
    if geom.kernel_size != dict.kernel_size() || geom.stride != dict.stride() || geom.k != dict.k() {
        return Err(Error::InvalidData(format!(
            "code geometry {:?} does not match dictionary (K={}, ks={}, stride={})",
            geom,
            dict.k(),
            dict.kernel_size(),
            dict.stride()
        )));
    }
    let h = (geom.map_h - 1) * geom.stride + geom.kernel_size;
    let w = (geom.map_w - 1) * geom.stride + geom.kernel_size;
    let plan = ConvPlan::new(dict, h, w)?;
    let mut left = vec![T::zero(); h * w];
    let mut right = vec![T::zero(); h * w];
    reconstruct_into(&plan, dict, code.activations_flat(), &mut left, &mut right);
    StereoPair::new(
        Image::from_shape_vec(h, w, left)?,
        Image::from_shape_vec(h, w, right)?,
    )
}

fn residual_energy<T: Scalar>(pair_l: &[T], pair_r: &[T], rec_l: &[T], rec_r: &[T]) -> T {
    let mut acc = T::zero();
    for (&p, &r) in pair_l.iter().zip(rec_l) {
        let d = p - r;
        acc = acc + d * d;
    }
    for (&p, &r) in pair_r.iter().zip(rec_r) {
        let d = p - r;
        acc = acc + d * d;
    }
    acc * cast::<T>(0.5)
}

fn count_super_threshold<T: Scalar>(activations: &[T], lambda: T) -> usize {
    activations.iter().filter(|&&a| a > lambda).count()
}

/// Evaluates the sparse-coding energy of a code for a pair.
pub fn energy<T: Scalar>(
    pair: &StereoPair<T>,
    dict: &Dictionary<T>,
    code: &CodeState<T>,
    lambda: f64,
) -> Result<Energy<T>> {
    let recon = reconstruct(dict, code)?;
    if recon.dims() != pair.dims() {
        return Err(Error::InvalidData(format!(
            "reconstruction {:?} does not match input {:?}",
            recon.dims(),
            pair.dims()
        )));
    }
    let residual = residual_energy(
        pair.left().as_slice(),
        pair.right().as_slice(),
        recon.left().as_slice(),
        recon.right().as_slice(),
    );
    let count = count_super_threshold(code.activations_flat(), cast::<T>(lambda));
    Ok(Energy::from_parts(residual, count, lambda))
}

/// Sparse-codes a preprocessed pair; returns the settled code state.
pub fn encode<T: Scalar>(
    pair: &StereoPair<T>,
    dict: &Dictionary<T>,
    cfg: &LcaConfig,
) -> Result<CodeState<T>> {
    encode_traced(pair, dict, cfg).map(|(code, _)| code)
}

/// Like [`encode`], additionally returning the per-iteration energy trace
/// (entry `i` is the energy after `i` update steps).
pub fn encode_traced<T: Scalar>(
    pair: &StereoPair<T>,
    dict: &Dictionary<T>,
    cfg: &LcaConfig,
) -> Result<(CodeState<T>, Vec<Energy<T>>)> {
    cfg.validate()?;
    let (h, w) = pair.dims();
    let plan = ConvPlan::new(dict, h, w)?;
    let cells = plan.k * plan.map_h * plan.map_w;
    let lam = cast::<T>(cfg.lambda);
    let step = cast::<T>(cfg.step);

    let src_l = pair.left().as_slice();
    let src_r = pair.right().as_slice();

    let mut patch_l = vec![T::zero(); plan.ks * plan.ks];
    let mut patch_r = vec![T::zero(); plan.ks * plan.ks];

    // Feed-forward drive, computed once.
    let mut b = vec![T::zero(); cells];
    correlate_into(&plan, dict, src_l, src_r, &mut b, &mut patch_l, &mut patch_r);

    let mut u = vec![T::zero(); cells];
    let mut a = vec![T::zero(); cells];
    let mut g = vec![T::zero(); cells];
    let mut rec_l = vec![T::zero(); h * w];
    let mut rec_r = vec![T::zero(); h * w];

    let mut trace: Vec<Energy<T>> = Vec::with_capacity(cfg.iterations + 1);
    // Energy alone can sit flat while sub-threshold potentials still ramp
    // toward a crossing, so settling also requires the potentials to have
    // stopped moving.
    let mut last_du: f64 = f64::INFINITY;
    let mut last_umax: f64 = 0.0;
    for it in 0..=cfg.iterations {
        for (av, &uv) in a.iter_mut().zip(&u) {
            *av = threshold(uv, lam);
        }
        reconstruct_into(&plan, dict, &a, &mut rec_l, &mut rec_r);
        let residual = residual_energy(src_l, src_r, &rec_l, &rec_r);
        let count = count_super_threshold(&a, lam);
        let e = Energy::from_parts(residual, count, cfg.lambda);
        if !e.residual.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                detail: "non-finite reconstruction energy".into(),
            });
        }
        let energy_flat = trace.last().is_some_and(|prev: &Energy<T>| {
            let p = to_f64(prev.descent);
            let c = to_f64(e.descent);
            (c - p).abs() <= cfg.tolerance * p.abs().max(1e-30)
        });
        let state_flat = last_du <= cfg.tolerance * last_umax.max(1e-12);
        trace.push(e);
        if (energy_flat && state_flat) || it == cfg.iterations {
            break;
        }

        // Lateral term: correlating the reconstruction realizes the Gram
        // product G a (the unit self-similarity term is added back below).
        correlate_into(&plan, dict, &rec_l, &rec_r, &mut g, &mut patch_l, &mut patch_r);
        let mut max_abs = T::zero();
        let mut max_du = T::zero();
        for i in 0..cells {
            let old = u[i];
            let upd = old + step * (b[i] - old - g[i] + a[i]);
            u[i] = upd;
            max_abs = max_abs.max(upd.abs());
            max_du = max_du.max((upd - old).abs());
        }
        if !max_abs.is_finite() {
            return Err(Error::Divergence {
                iteration: it + 1,
                detail: "membrane potentials became non-finite".into(),
            });
        }
        last_du = to_f64(max_du);
        last_umax = to_f64(max_abs);
    }

    for (av, &uv) in a.iter_mut().zip(&u) {
        *av = threshold(uv, lam);
    }
    let dims = (plan.k, plan.map_h, plan.map_w);
    let code = CodeState {
        geometry: plan.geometry(),
        u: Array3::from_shape_vec(dims, u).expect("shape matches"),
        a: Array3::from_shape_vec(dims, a).expect("shape matches"),
    };
    Ok((code, trace))
}

/// Dictionary-learning parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LearnConfig {
    pub k: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seed for dictionary init and epoch shuffling.
    pub seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            k: 128,
            kernel_size: 16,
            stride: 8,
            learning_rate: 0.2,
            epochs: 10,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.k == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "kernel count and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch training statistics (means over all pairs of the epoch).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub mean_residual: f64,
    pub mean_count: f64,
    pub mean_total: f64,
    pub mean_descent: f64,
}

/// Energy log across epochs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<TrainEpoch>,
}

/// Deterministic per-epoch presentation order.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Learns a dictionary by alternating frozen-kernel encoding with averaged
/// residual-correlation gradient steps and joint re-normalization.
///
/// `init` resumes from an existing dictionary (checkpointing); otherwise
/// kernels start from seeded white noise. `start_epoch` is the number of
/// epochs already absorbed by `init`, so a resumed run replays the exact
/// presentation order of an uninterrupted one. `on_epoch` observes each
/// completed epoch together with the dictionary state (checkpoint hook).
///
/// Fails with [`Error::Divergence`] after three consecutive epochs whose
/// mean energy rose by more than 10% each.
pub fn learn<T: Scalar>(
    pairs: &[StereoPair<T>],
    lcfg: &LearnConfig,
    ecfg: &LcaConfig,
    init: Option<Dictionary<T>>,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&TrainEpoch, &Dictionary<T>),
) -> Result<(Dictionary<T>, TrainLog)> {
    lcfg.validate()?;
    ecfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidData("cannot learn from an empty dataset".into()));
    }
    let mut dict = match init {
        Some(d) => d,
        None => Dictionary::init_noise(lcfg.k, lcfg.kernel_size, lcfg.stride, lcfg.seed)?,
    };
    for pair in pairs {
        // Shape compatibility up front rather than mid-epoch.
        let (h, w) = pair.dims();
        dict.map_dims(h, w)?;
    }

    let area = lcfg.kernel_size * lcfg.kernel_size;
    let mut log = TrainLog::default();
    let mut rises = 0usize;
    let mut prev_mean: Option<f64> = None;

    for epoch in start_epoch..lcfg.epochs {
        let order = epoch_order(pairs.len(), lcfg.seed, epoch);
        let mut sum_residual = 0.0;
        let mut sum_count = 0.0;
        let mut sum_total = 0.0;
        let mut sum_descent = 0.0;

        for batch in order.chunks(lcfg.batch_size) {
            // Encode the batch in parallel; gradients are reduced in batch
            // order so worker count never changes the result.
            let encoded: Vec<(Vec<T>, Vec<T>, Vec<T>, Energy<T>)> = batch
                .par_iter()
                .map(|&idx| {
                    let pair = &pairs[idx];
                    let code = encode(pair, &dict, ecfg)?;
                    let recon = reconstruct(&dict, &code)?;
                    let e = Energy::from_parts(
                        residual_energy(
                            pair.left().as_slice(),
                            pair.right().as_slice(),
                            recon.left().as_slice(),
                            recon.right().as_slice(),
                        ),
                        count_super_threshold(code.activations_flat(), cast::<T>(ecfg.lambda)),
                        ecfg.lambda,
                    );
                    let res_l: Vec<T> = pair
                        .left()
                        .as_slice()
                        .iter()
                        .zip(recon.left().as_slice())
                        .map(|(&p, &r)| p - r)
                        .collect();
                    let res_r: Vec<T> = pair
                        .right()
                        .as_slice()
                        .iter()
                        .zip(recon.right().as_slice())
                        .map(|(&p, &r)| p - r)
                        .collect();
                    Ok((res_l, res_r, code.activations_flat().to_vec(), e))
                })
                .collect::<Result<Vec<_>>>()?;

            let mut grad_l = vec![0.0f64; lcfg.k * area];
            let mut grad_r = vec![0.0f64; lcfg.k * area];
            for (bi, &idx) in batch.iter().enumerate() {
                let pair = &pairs[idx];
                let (h, w) = pair.dims();
                let (mh, mw) = dict.map_dims(h, w)?;
                let (res_l, res_r, acts, e) = &encoded[bi];
                sum_residual += to_f64(e.residual);
                sum_count += e.count as f64;
                sum_total += to_f64(e.total);
                sum_descent += to_f64(e.descent);
                accumulate_gradient(
                    &mut grad_l,
                    &mut grad_r,
                    res_l,
                    res_r,
                    acts,
                    lcfg.k,
                    lcfg.kernel_size,
                    lcfg.stride,
                    mh,
                    mw,
                    w,
                );
            }

            let scale = lcfg.learning_rate / batch.len() as f64;
            let dl = dict.left.as_slice_mut().expect("contiguous");
            for (v, g) in dl.iter_mut().zip(&grad_l) {
                *v = *v + cast::<T>(g * scale);
            }
            let dr = dict.right.as_slice_mut().expect("contiguous");
            for (v, g) in dr.iter_mut().zip(&grad_r) {
                *v = *v + cast::<T>(g * scale);
            }
            dict.normalize_joint()?;
        }

        let n = pairs.len() as f64;
        let entry = TrainEpoch {
            epoch,
            mean_residual: sum_residual / n,
            mean_count: sum_count / n,
            mean_total: sum_total / n,
            mean_descent: sum_descent / n,
        };
        on_epoch(&entry, &dict);
        log.epochs.push(entry);

        if let Some(prev) = prev_mean {
            if entry.mean_descent > prev * 1.10 {
                rises += 1;
                if rises >= 3 {
                    return Err(Error::Divergence {
                        iteration: epoch,
                        detail: format!(
                            "mean energy rose >10% for 3 consecutive epochs (last {:.6} from {:.6})",
                            entry.mean_descent, prev
                        ),
                    });
                }
            } else {
                rises = 0;
            }
        }
        prev_mean = Some(entry.mean_descent);
    }
    Ok((dict, log))
}

/// Correlates residuals with activation maps: the kernel gradient of the
/// reconstruction term.
#[allow(clippy::too_many_arguments)]
fn accumulate_gradient<T: Scalar>(
    grad_l: &mut [f64],
    grad_r: &mut [f64],
    res_l: &[T],
    res_r: &[T],
    acts: &[T],
    k: usize,
    ks: usize,
    stride: usize,
    mh: usize,
    mw: usize,
    w: usize,
) {
    let area = ks * ks;
    for ki in 0..k {
        for m in 0..mh {
            for n in 0..mw {
                let a = to_f64(acts[ki * mh * mw + m * mw + n]);
                if a == 0.0 {
                    continue;
                }
                let (r0, c0) = (m * stride, n * stride);
                for i in 0..ks {
                    let src = (r0 + i) * w + c0;
                    let dst = ki * area + i * ks;
                    for j in 0..ks {
                        grad_l[dst + j] += a * to_f64(res_l[src + j]);
                        grad_r[dst + j] += a * to_f64(res_r[src + j]);
                    }
                }
            }
        }
    }
}
