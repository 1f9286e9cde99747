//! Grayscale image container plus the filtering, resampling and
//! normalization primitives shared by the whole pipeline.
//!
//! Conventions used everywhere in this crate:
//!
//! * images are row-major, `(row, col)` indexing, `row = y` grows downward,
//!   `col = x` grows to the right;
//! * luminance values are linear, nominally in `[0, 1]` after PNG ingestion;
//! * convolution borders are handled by symmetric (half-sample) reflection,
//!   so constant images stay exactly constant under unit-integral kernels.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};

/// Single-plane image of real-valued luminance samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    data: Array2<T>,
}

impl<T: Scalar> Image<T> {
    /// Wraps an array, checking the type invariants (non-empty, finite).
    pub fn new(data: Array2<T>) -> Result<Self> {
        let (h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidData(format!(
                "image dimensions must be at least 1x1, got {h}x{w}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidData("image contains non-finite samples".into()));
        }
        Ok(Image { data })
    }

    pub fn from_shape_vec(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        let data = Array2::from_shape_vec((height, width), values)
            .map_err(|e| Error::InvalidData(format!("image shape mismatch: {e}")))?;
        Image::new(data)
    }

    /// Internal constructor for freshly computed values known to be valid.
    pub(crate) fn from_array_unchecked(data: Array2<T>) -> Self {
        debug_assert!(data.nrows() >= 1 && data.ncols() >= 1);
        Image { data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "degenerate image dimensions");
        Image {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(height >= 1 && width >= 1, "degenerate image dimensions");
        Image {
            data: Array2::from_shape_fn((height, width), move |(r, c)| f(r, c)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[(row, col)]
    }

    pub fn as_array(&self) -> &Array2<T> {
        &self.data
    }

    pub fn into_array(self) -> Array2<T> {
        self.data
    }

    /// Row-major contiguous view of the samples.
    pub fn as_slice(&self) -> &[T] {
        self.data.as_slice().expect("image storage is standard row-major")
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [T] {
        self.data
            .as_slice_mut()
            .expect("image storage is standard row-major")
    }

    /// Bilinear sample at fractional coordinates (`x` along columns, `y`
    /// along rows). Returns `None` outside `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<T> {
        let (h, w) = self.dims();
        if !(x.is_finite() && y.is_finite()) {
            return None;
        }
        if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
            return None;
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let c0 = x0 as usize;
        let r0 = y0 as usize;
        let c1 = (c0 + 1).min(w - 1);
        let r1 = (r0 + 1).min(h - 1);
        let v00 = to_f64(self.data[(r0, c0)]);
        let v01 = to_f64(self.data[(r0, c1)]);
        let v10 = to_f64(self.data[(r1, c0)]);
        let v11 = to_f64(self.data[(r1, c1)]);
        let top = v00 + fx * (v01 - v00);
        let bot = v10 + fx * (v11 - v10);
        Some(cast(top + fy * (bot - top)))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Image<T> {
        Image {
            data: self.data.map(|&v| f(v)),
        }
    }
}

#[inline]
fn to_f64<T: Scalar>(v: T) -> f64 {
    crate::scalar::to_f64(v)
}

/// Left/right stereo half-images of identical dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoPair<T> {
    left: Image<T>,
    right: Image<T>,
}

impl<T: Scalar> StereoPair<T> {
    pub fn new(left: Image<T>, right: Image<T>) -> Result<Self> {
        if left.dims() != right.dims() {
            return Err(Error::InvalidData(format!(
                "stereo halves disagree in size: {:?} vs {:?}",
                left.dims(),
                right.dims()
            )));
        }
        Ok(StereoPair { left, right })
    }

    pub fn left(&self) -> &Image<T> {
        &self.left
    }

    pub fn right(&self) -> &Image<T> {
        &self.right
    }

    pub fn dims(&self) -> (usize, usize) {
        self.left.dims()
    }

    pub fn into_parts(self) -> (Image<T>, Image<T>) {
        (self.left, self.right)
    }

    /// Applies the same image transform to both halves.
    pub fn map_halves(&self, f: impl Fn(&Image<T>) -> Result<Image<T>>) -> Result<StereoPair<T>> {
        StereoPair::new(f(&self.left)?, f(&self.right)?)
    }
}

/// Output of [`normalize_pair`]: the normalized pair plus a flag marking
/// zero-energy inputs that training should skip.
#[derive(Clone, Debug)]
pub struct NormalizedPair<T> {
    pub pair: StereoPair<T>,
    pub degenerate: bool,
}

/// Symmetric (half-sample) reflection of an index into `[0, n)`.
#[inline]
fn reflect(mut i: isize, n: isize) -> usize {
    debug_assert!(n >= 1);
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Discretized Gaussian with truncation radius `ceil(4 sigma)`, normalized
/// to unit sum. Computed in `f64` regardless of the working scalar.
pub fn gaussian_kernel_1d(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma must be positive and finite, got {sigma}"
        )));
    }
    let radius = (4.0 * sigma).ceil() as usize;
    let mut weights = Vec::with_capacity(2 * radius + 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for i in -(radius as isize)..=(radius as isize) {
        let d = i as f64;
        weights.push((-d * d * inv).exp());
    }
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    Ok(weights)
}

fn convolve_separable<T: Scalar>(img: &Image<T>, kernel: &[f64]) -> Image<T> {
    let (h, w) = img.dims();
    let radius = (kernel.len() / 2) as isize;
    let src = img.as_slice();

    // Horizontal pass in f64 accumulators.
    let mut tmp = vec![0.0f64; h * w];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, &kw) in kernel.iter().enumerate() {
                let ci = reflect(c as isize + ki as isize - radius, w as isize);
                acc += kw * to_f64(row[ci]);
            }
            tmp[r * w + c] = acc;
        }
    }

    // Vertical pass.
    let mut out = Array2::<T>::zeros((h, w));
    let out_slice = out.as_slice_mut().expect("fresh array is contiguous");
    for c in 0..w {
        for r in 0..h {
            let mut acc = 0.0;
            for (ki, &kw) in kernel.iter().enumerate() {
                let ri = reflect(r as isize + ki as isize - radius, h as isize);
                acc += kw * tmp[ri * w + c];
            }
            out_slice[r * w + c] = cast(acc);
        }
    }
    Image::from_array_unchecked(out)
}

/// Gaussian smoothing with a unit-integral sampled kernel and symmetric
/// border reflection.
pub fn gaussian_blur<T: Scalar>(img: &Image<T>, sigma: f64) -> Result<Image<T>> {
    let kernel = gaussian_kernel_1d(sigma)?;
    Ok(convolve_separable(img, &kernel))
}

/// Difference-of-Gaussians bandpass: `blur(inner) - blur(outer)`.
///
/// Defaults used by the retinal preprocessing stage are `inner = 1` and
/// `outer = 5.5` pixels.
pub fn dog_filter<T: Scalar>(img: &Image<T>, sigma_inner: f64, sigma_outer: f64) -> Result<Image<T>> {
    if !(sigma_inner > 0.0 && sigma_inner < sigma_outer) {
        return Err(Error::InvalidArgument(format!(
            "difference-of-Gaussians requires 0 < inner < outer, got {sigma_inner} and {sigma_outer}"
        )));
    }
    let inner = gaussian_blur(img, sigma_inner)?;
    let outer = gaussian_blur(img, sigma_outer)?;
    Ok(Image {
        data: &inner.data - &outer.data,
    })
}

/// Mean-centers each half independently, then scales both halves by one
/// shared factor so the l2-norm of the concatenation is 1.
///
/// A pair with no energy left after centering cannot be normalized; it is
/// returned centered (all zeros) with `degenerate = true` so training can
/// skip it.
pub fn normalize_pair<T: Scalar>(pair: &StereoPair<T>) -> NormalizedPair<T> {
    let center = |img: &Image<T>| -> (Array2<f64>, f64) {
        let n = (img.height() * img.width()) as f64;
        let sum: f64 = img.as_slice().iter().map(|&v| to_f64(v)).sum();
        let mean = sum / n;
        let centered = img.data.map(|&v| to_f64(v) - mean);
        let sq = centered.iter().map(|v| v * v).sum();
        (centered, sq)
    };

    let (left, sq_l) = center(pair.left());
    let (right, sq_r) = center(pair.right());
    let norm = (sq_l + sq_r).sqrt();

    // Scale-aware zero test: anything at the level of centering round-off
    // carries no usable signal.
    let input_scale: f64 = pair
        .left()
        .as_slice()
        .iter()
        .chain(pair.right().as_slice())
        .map(|&v| to_f64(v).abs())
        .fold(0.0, f64::max);
    let tiny = crate::scalar::to_f64(T::epsilon()) * 64.0 * (1.0 + input_scale);

    let scale = if norm <= tiny { 0.0 } else { 1.0 / norm };
    let finish = |a: Array2<f64>| -> Image<T> {
        Image::from_array_unchecked(a.map(|&v| {
            cast::<T>(if scale == 0.0 { v } else { v * scale })
        }))
    };
    NormalizedPair {
        pair: StereoPair {
            left: finish(left),
            right: finish(right),
        },
        degenerate: scale == 0.0,
    }
}

/// Resampling kernel for [`downscale`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleMethod {
    Bilinear,
    Bicubic,
}

fn triangle(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        1.0 - x
    } else {
        0.0
    }
}

/// Keys cubic with a = -0.5.
fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

struct AxisTaps {
    start: Vec<isize>,
    weights: Vec<Vec<f64>>,
}

fn axis_taps(n_out: usize, factor: f64, method: ResampleMethod) -> AxisTaps {
    let (kernel, radius): (fn(f64) -> f64, f64) = match method {
        ResampleMethod::Bilinear => (triangle, 1.0),
        ResampleMethod::Bicubic => (cubic, 2.0),
    };
    // When shrinking, widen the kernel support to keep it low-pass.
    let scale = if factor < 1.0 { 1.0 / factor } else { 1.0 };
    let support = radius * scale;
    let mut start = Vec::with_capacity(n_out);
    let mut weights = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let center = (o as f64 + 0.5) / factor - 0.5;
        let lo = (center - support).ceil() as isize;
        let hi = (center + support).floor() as isize;
        let mut w = Vec::with_capacity((hi - lo + 1).max(1) as usize);
        for i in lo..=hi {
            w.push(kernel((i as f64 - center) / scale));
        }
        let sum: f64 = w.iter().sum();
        if sum != 0.0 {
            for v in &mut w {
                *v /= sum;
            }
        }
        start.push(lo);
        weights.push(w);
    }
    AxisTaps { start, weights }
}

/// Separable resampling to `round(dims * factor)` with `factor` in `(0, 1]`.
///
/// Shrinking widens the kernel support by `1/factor` so downscales stay
/// anti-aliased; `factor = 1` reproduces the input exactly.
pub fn downscale<T: Scalar>(img: &Image<T>, factor: f64, method: ResampleMethod) -> Result<Image<T>> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "downscale factor must lie in (0, 1], got {factor}"
        )));
    }
    let (h, w) = img.dims();
    let oh = (h as f64 * factor).round() as usize;
    let ow = (w as f64 * factor).round() as usize;
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument(format!(
            "downscale factor {factor} yields degenerate output size {oh}x{ow}"
        )));
    }

    let col_taps = axis_taps(ow, factor, method);
    let row_taps = axis_taps(oh, factor, method);
    let src = img.as_slice();

    // Horizontal pass.
    let mut tmp = vec![0.0f64; h * ow];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        for c in 0..ow {
            let mut acc = 0.0;
            let lo = col_taps.start[c];
            for (k, &kw) in col_taps.weights[c].iter().enumerate() {
                let ci = reflect(lo + k as isize, w as isize);
                acc += kw * to_f64(row[ci]);
            }
            tmp[r * ow + c] = acc;
        }
    }

    // Vertical pass.
    let mut out = Array2::<T>::zeros((oh, ow));
    let out_slice = out.as_slice_mut().expect("fresh array is contiguous");
    for c in 0..ow {
        for r in 0..oh {
            let mut acc = 0.0;
            let lo = row_taps.start[r];
            for (k, &kw) in row_taps.weights[r].iter().enumerate() {
                let ri = reflect(lo + k as isize, h as isize);
                acc += kw * tmp[ri * ow + c];
            }
            out_slice[r * ow + c] = cast(acc);
        }
    }
    Ok(Image::from_array_unchecked(out))
}

/// Retinal preprocessing parameters: Gaussian smoothing followed by a
/// difference-of-Gaussians bandpass, then joint pair normalization and a
/// fixed gain.
///
/// The gain sets the working scale of the sparse-coding stage. Joint
/// normalization alone leaves a kernel-sized patch with expected norm
/// `patch_px / sqrt(H W)`, which vanishes with image size; the automatic
/// gain (`sqrt(H W) / patch_px`) restores unit expected patch energy, so
/// activation thresholds keep the same meaning at every image size.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Preprocess {
    pub blur_sigma: f64,
    pub dog_sigma_inner: f64,
    pub dog_sigma_outer: f64,
    /// Post-normalization gain; `None` selects `sqrt(H W) / patch_px`.
    pub gain: Option<f64>,
    /// Kernel extent the automatic gain is calibrated to.
    pub patch_px: usize,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            blur_sigma: 0.5,
            dog_sigma_inner: 1.0,
            dog_sigma_outer: 5.5,
            gain: None,
            patch_px: 16,
        }
    }
}

impl Preprocess {
    /// Runs the full front end on a raw stereo pair. The result is the
    /// jointly normalized pair scaled by the configured gain; degenerate
    /// pairs come back unscaled and flagged.
    pub fn apply<T: Scalar>(&self, pair: &StereoPair<T>) -> Result<NormalizedPair<T>> {
        let filtered = pair.map_halves(|img| {
            let smoothed = gaussian_blur(img, self.blur_sigma)?;
            dog_filter(&smoothed, self.dog_sigma_inner, self.dog_sigma_outer)
        })?;
        let normalized = normalize_pair(&filtered);
        if normalized.degenerate {
            return Ok(normalized);
        }
        let (h, w) = pair.dims();
        let gain = self
            .gain
            .unwrap_or_else(|| ((h * w) as f64).sqrt() / self.patch_px.max(1) as f64);
        let g = cast::<T>(gain);
        Ok(NormalizedPair {
            pair: normalized.pair.map_halves(|img| Ok(img.map(|v| v * g)))?,
            degenerate: false,
        })
    }
}

/// Loads a PNG as linear luminance in `[0, 1]`.
///
/// RGB inputs collapse through Rec. 709 weights `0.2126 R + 0.7152 G +
/// 0.0722 B`; grayscale inputs pass through unchanged (scaled to `[0, 1]`).
/// Alpha channels are ignored.
pub fn load_grayscale<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| Error::Codec {
        path: path.into(),
        source: e,
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::InvalidData(format!("empty image {}", path.display())));
    }

    let luma = |r: f64, g: f64, b: f64| 0.2126 * r + 0.7152 * g + 0.0722 * b;
    let mut values: Vec<T> = Vec::with_capacity(w * h);
    use image::DynamicImage::*;
    match decoded {
        ImageLuma8(img) => {
            values.extend(img.pixels().map(|p| cast::<T>(p.0[0] as f64 / 255.0)));
        }
        ImageLumaA8(img) => {
            values.extend(img.pixels().map(|p| cast::<T>(p.0[0] as f64 / 255.0)));
        }
        ImageLuma16(img) => {
            values.extend(img.pixels().map(|p| cast::<T>(p.0[0] as f64 / 65535.0)));
        }
        ImageLumaA16(img) => {
            values.extend(img.pixels().map(|p| cast::<T>(p.0[0] as f64 / 65535.0)));
        }
        ImageRgb8(img) => {
            values.extend(img.pixels().map(|p| {
                cast::<T>(luma(
                    p.0[0] as f64 / 255.0,
                    p.0[1] as f64 / 255.0,
                    p.0[2] as f64 / 255.0,
                ))
            }));
        }
        ImageRgba8(img) => {
            values.extend(img.pixels().map(|p| {
                cast::<T>(luma(
                    p.0[0] as f64 / 255.0,
                    p.0[1] as f64 / 255.0,
                    p.0[2] as f64 / 255.0,
                ))
            }));
        }
        ImageRgb16(img) => {
            values.extend(img.pixels().map(|p| {
                cast::<T>(luma(
                    p.0[0] as f64 / 65535.0,
                    p.0[1] as f64 / 65535.0,
                    p.0[2] as f64 / 65535.0,
                ))
            }));
        }
        ImageRgba16(img) => {
            values.extend(img.pixels().map(|p| {
                cast::<T>(luma(
                    p.0[0] as f64 / 65535.0,
                    p.0[1] as f64 / 65535.0,
                    p.0[2] as f64 / 65535.0,
                ))
            }));
        }
        other => {
            return Err(Error::UnsupportedPixelFormat {
                path: path.into(),
                detail: format!("unsupported sample layout {:?}", other.color()),
            });
        }
    }
    Image::from_shape_vec(h, w, values)
}

/// Writes an image as an 8-bit grayscale PNG, clamping values to `[0, 1]`.
pub fn save_png<T: Scalar>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = img.dims();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for (r, row) in img.as_slice().chunks(w).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let v = to_f64(v).clamp(0.0, 1.0);
            buf.put_pixel(c as u32, r as u32, image::Luma([(v * 255.0).round() as u8]));
        }
    }
    buf.save(path).map_err(|e| Error::Codec {
        path: path.into(),
        source: e,
    })
}
