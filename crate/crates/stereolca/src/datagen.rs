//! Synthetic stimulus databases: shifted-pair disparity stimuli,
//! virtual-vergence homography warps, and textured slanted-plane stereo
//! renders with closed-form ground truth.
//!
//! Disparity sign convention, used everywhere downstream: positive `dx`
//! means the right half-image content is shifted left relative to the left
//! half-image (crossed / near disparity); positive `dy` shifts the right
//! half's content up.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{homography_warp, listing_angle, listing_rotation, CameraIntrinsics, Point2};
use crate::imagecore::{downscale, Image, ResampleMethod, StereoPair};
use crate::scalar::{cast, to_f64, Scalar};
use crate::tensor;

/// Horizontal/vertical disparity of a shifted-pair stimulus, in output
/// pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisparityLabel {
    pub dx: f64,
    pub dy: f64,
}

/// Surface orientation: tilt (depth-gradient direction in the image plane)
/// and slant (angle against the fronto-parallel plane), both in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceLabel {
    pub tilt_deg: f64,
    pub slant_deg: f64,
}

/// Stimulus label of either database.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Disparity(DisparityLabel),
    Surface(SurfaceLabel),
}

impl Label {
    /// Label as a 2-vector in its natural units (px for disparity,
    /// degrees for surface orientation).
    pub fn as_vec2(&self) -> [f64; 2] {
        match self {
            Label::Disparity(d) => [d.dx, d.dy],
            Label::Surface(s) => [s.tilt_deg, s.slant_deg],
        }
    }
}

/// Symmetric square disparity grid: `dx, dy` run over
/// `-max_abs ..= max_abs` in steps of `step`.
///
/// Ordering: `dy` is the outer axis, `dx` the inner one, both ascending;
/// `index = iy * nx + ix`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisparityGrid {
    pub max_abs: f64,
    pub step: f64,
}

impl Default for DisparityGrid {
    fn default() -> Self {
        // 25 x 25 labels covering -6..6 px in 0.5 px steps.
        DisparityGrid {
            max_abs: 6.0,
            step: 0.5,
        }
    }
}

impl DisparityGrid {
    pub fn values(&self) -> Vec<f64> {
        let n = (2.0 * self.max_abs / self.step).round() as usize + 1;
        (0..n).map(|i| -self.max_abs + i as f64 * self.step).collect()
    }

    pub fn labels(&self) -> Vec<DisparityLabel> {
        let vals = self.values();
        let mut out = Vec::with_capacity(vals.len() * vals.len());
        for &dy in &vals {
            for &dx in &vals {
                out.push(DisparityLabel { dx, dy });
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(self.max_abs >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "disparity grid needs step > 0 and max_abs >= 0, got step {} max {}",
                self.step, self.max_abs
            )));
        }
        let ratio = self.max_abs / self.step;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "grid step {} must divide max_abs {}",
                self.step, self.max_abs
            )));
        }
        Ok(())
    }
}

/// Tilt/slant grid. Label 0 is the fronto-parallel plane; labels
/// `1 + i_slant * n_tilt + i_tilt` sweep tilts (inner, ascending) within
/// slants (outer, ascending).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    /// Tilt step in degrees; tilts run over `0, step, ..., < 360`.
    pub tilt_step_deg: f64,
    /// Nonzero slant angles, ascending.
    pub slants_deg: Vec<f64>,
}

impl Default for SurfaceGrid {
    fn default() -> Self {
        SurfaceGrid {
            tilt_step_deg: 10.0,
            slants_deg: default_slants(),
        }
    }
}

/// Default nonzero slants: uniform steps in `tan(slant)` anchored at 6
/// degrees, one disparity-pixel per step under the calibrated rig (the
/// sixth value extends the published five-entry list by one more step so
/// the grid reaches the documented 36*6+1 = 217 labels).
pub fn default_slants() -> Vec<f64> {
    vec![6.0, 24.3, 38.2, 48.2, 55.2, 60.6]
}

impl SurfaceGrid {
    pub fn tilts(&self) -> Vec<f64> {
        let n = (360.0 / self.tilt_step_deg).round() as usize;
        (0..n).map(|i| i as f64 * self.tilt_step_deg).collect()
    }

    pub fn labels(&self) -> Vec<SurfaceLabel> {
        let tilts = self.tilts();
        let mut out = Vec::with_capacity(1 + tilts.len() * self.slants_deg.len());
        out.push(SurfaceLabel {
            tilt_deg: 0.0,
            slant_deg: 0.0,
        });
        for &slant in &self.slants_deg {
            for &tilt in &tilts {
                out.push(SurfaceLabel {
                    tilt_deg: tilt,
                    slant_deg: slant,
                });
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tilt_step_deg > 0.0) || (360.0 / self.tilt_step_deg).fract().abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "tilt step {} must evenly divide 360",
                self.tilt_step_deg
            )));
        }
        let mut prev = 0.0;
        for &s in &self.slants_deg {
            if !(s > prev && s < 90.0) {
                return Err(Error::InvalidArgument(format!(
                    "slants must ascend within (0, 90), got {:?}",
                    self.slants_deg
                )));
            }
            prev = s;
        }
        Ok(())
    }
}

/// Discrete stimulus-parameter space with a stable, documented ordering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LabelGrid {
    Disparity(DisparityGrid),
    Surface(SurfaceGrid),
}

impl LabelGrid {
    pub fn labels(&self) -> Vec<Label> {
        match self {
            LabelGrid::Disparity(g) => g.labels().into_iter().map(Label::Disparity).collect(),
            LabelGrid::Surface(g) => g.labels().into_iter().map(Label::Surface).collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            LabelGrid::Disparity(g) => {
                let n = g.values().len();
                n * n
            }
            LabelGrid::Surface(g) => 1 + g.tilts().len() * g.slants_deg.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LabelGrid::Disparity(g) => g.validate(),
            LabelGrid::Surface(g) => g.validate(),
        }
    }

    /// Index of the zero-disparity / fronto-parallel label.
    pub fn zero_index(&self) -> usize {
        match self {
            LabelGrid::Disparity(g) => {
                let n = g.values().len();
                (n / 2) * n + n / 2
            }
            LabelGrid::Surface(_) => 0,
        }
    }

    /// Exact grid index of a label, if it is a grid member.
    pub fn index_of(&self, label: &Label) -> Option<usize> {
        let target = label.as_vec2();
        self.labels()
            .iter()
            .position(|l| {
                let v = l.as_vec2();
                (v[0] - target[0]).abs() < 1e-9 && (v[1] - target[1]).abs() < 1e-9
            })
    }
}

/// Crops a seeded-random source window twice with a relative offset of
/// `(2 dx, 2 dy)` px, then halves the resolution of both crops with
/// bilinear filtering, yielding an effective disparity of `(dx, dy)` at
/// output scale.
///
/// `crop` is the source-window edge length; the output pair is
/// `crop/2 x crop/2`. Bit-reproducible for a fixed `(label, seed)`.
pub fn make_shifted_pair<T: Scalar>(
    img: &Image<T>,
    label: DisparityLabel,
    crop: usize,
    seed: u64,
) -> Result<StereoPair<T>> {
    if crop < 2 {
        return Err(Error::InvalidArgument("crop must be at least 2 px".into()));
    }
    let (h, w) = img.dims();
    let off_x = 2.0 * label.dx;
    let off_y = 2.0 * label.dy;

    // The left crop origin must keep both windows inside the source.
    let lo_x = (-off_x).max(0.0).ceil() as isize;
    let hi_x = (w as f64 - crop as f64 - off_x.max(0.0)).floor() as isize;
    let lo_y = (-off_y).max(0.0).ceil() as isize;
    let hi_y = (h as f64 - crop as f64 - off_y.max(0.0)).floor() as isize;
    if hi_x < lo_x || hi_y < lo_y {
        return Err(Error::InvalidData(format!(
            "source {h}x{w} too small for crop {crop} with offset ({off_x}, {off_y})"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rng.gen_range(lo_x..=hi_x) as usize;
    let y0 = rng.gen_range(lo_y..=hi_y) as usize;

    let left = Image::from_fn(crop, crop, |r, c| img.get(y0 + r, x0 + c));
    let integer_offset = off_x.fract() == 0.0 && off_y.fract() == 0.0;
    let right = if integer_offset {
        let rx = (x0 as isize + off_x as isize) as usize;
        let ry = (y0 as isize + off_y as isize) as usize;
        Image::from_fn(crop, crop, |r, c| img.get(ry + r, rx + c))
    } else {
        Image::from_fn(crop, crop, |r, c| {
            img.sample_bilinear(x0 as f64 + c as f64 + off_x, y0 as f64 + r as f64 + off_y)
                .expect("offset window stays inside the source by construction")
        })
    };

    let left = downscale(&left, 0.5, ResampleMethod::Bilinear)?;
    let right = downscale(&right, 0.5, ResampleMethod::Bilinear)?;
    StereoPair::new(left, right)
}

/// Virtual vergence: warps each half toward its fixation point by a
/// Listing rotation, then crops `crop x crop` px centered on the principal
/// point.
///
/// Fails when either rotation angle exceeds `max_angle_deg`, or when the
/// crop leaves the warped images' valid region.
pub fn make_virtual_fixation<T: Scalar>(
    pair: &StereoPair<T>,
    fix_left: Point2,
    fix_right: Point2,
    intrinsics: &CameraIntrinsics,
    max_angle_deg: f64,
    crop: usize,
) -> Result<StereoPair<T>> {
    let (h, w) = pair.dims();
    for (name, p) in [("left", fix_left), ("right", fix_right)] {
        if p.x < 0.0 || p.y < 0.0 || p.x > (w - 1) as f64 || p.y > (h - 1) as f64 {
            return Err(Error::InvalidArgument(format!(
                "{name} fixation point ({}, {}) lies outside the image",
                p.x, p.y
            )));
        }
    }
    let principal = Point2::new(intrinsics.px, intrinsics.py);
    let f = intrinsics.fx;
    let max_angle = max_angle_deg.to_radians();
    for (name, p) in [("left", fix_left), ("right", fix_right)] {
        let angle = listing_angle(p, principal, f);
        if angle > max_angle {
            return Err(Error::InvalidData(format!(
                "{name} fixation needs a {:.2} degree rotation, over the {max_angle_deg} degree budget",
                angle.to_degrees()
            )));
        }
    }

    let warp_half = |img: &Image<T>, fix: Point2| -> Result<Image<T>> {
        let rot = listing_rotation(fix, principal, f)?;
        let warped = homography_warp(img, intrinsics, &rot)?;
        // Crop window centered on the principal point.
        let cx = intrinsics.px.round() as isize - (crop as isize) / 2;
        let cy = intrinsics.py.round() as isize - (crop as isize) / 2;
        if cx < 0 || cy < 0 || cx + crop as isize > w as isize || cy + crop as isize > h as isize {
            return Err(Error::InvalidData(format!(
                "crop {crop} px around the principal point exceeds the {h}x{w} image"
            )));
        }
        let (cx, cy) = (cx as usize, cy as usize);
        for r in 0..crop {
            for c in 0..crop {
                if !warped.mask_at(cy + r, cx + c, w) {
                    return Err(Error::InvalidData(
                        "crop exceeds the valid region of the warped image".into(),
                    ));
                }
            }
        }
        Ok(Image::from_fn(crop, crop, |r, c| warped.image.get(cy + r, cx + c)))
    };

    StereoPair::new(warp_half(pair.left(), fix_left)?, warp_half(pair.right(), fix_right)?)
}

/// Stereo rig for the slanted-plane renderer: two verged pinhole cameras
/// fixating the center of a textured plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    /// Camera separation in meters.
    pub baseline_m: f64,
    /// Distance from the baseline midpoint to the plane center, meters.
    pub fixation_distance_m: f64,
    /// Full horizontal field of view, degrees.
    pub fov_deg: f64,
    /// Output image edge length in pixels.
    pub image_px: usize,
    /// Plane-texture sampling scale, meters per texture pixel.
    pub texture_m_per_px: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        RigSpec {
            baseline_m: 0.07,
            fixation_distance_m: 1.0,
            fov_deg: 11.8,
            image_px: 256,
            texture_m_per_px: 0.002,
        }
    }
}

impl RigSpec {
    /// Rig whose disparity increments match the published slant grid:
    /// one pixel of horizontal disparity per slant step, assessed 10 px
    /// from the image center. Requires `baseline / distance = 0.3`; the
    /// printed 7 cm baseline at 1 m yields only ~0.23 px per step.
    pub fn calibrated() -> Self {
        RigSpec {
            baseline_m: 0.3,
            ..RigSpec::default()
        }
    }

    pub fn focal_px(&self) -> f64 {
        (self.image_px as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan()
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let f = self.focal_px();
        let c = (self.image_px as f64 - 1.0) / 2.0;
        CameraIntrinsics {
            fx: f,
            fy: f,
            px: c,
            py: c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.baseline_m > 0.0
            && self.fixation_distance_m > 0.0
            && self.fov_deg > 0.0
            && self.fov_deg < 180.0
            && self.texture_m_per_px > 0.0
            && self.image_px >= 2)
        {
            return Err(Error::InvalidArgument(format!("invalid rig: {self:?}")));
        }
        Ok(())
    }

    /// First-order horizontal disparity (px) a plane of the given slant
    /// produces at `eccentricity_px` from the image center when tilted
    /// horizontally: `x * (b / D) * tan(slant)`. Ignores the vergence
    /// keystone; see [`RigSpec::plane_disparity_exact`] for the exact
    /// value.
    pub fn slant_disparity_px(&self, slant_deg: f64, eccentricity_px: f64) -> f64 {
        eccentricity_px * (self.baseline_m / self.fixation_distance_m)
            * slant_deg.to_radians().tan()
    }

    /// Exact horizontal disparity of a horizontally slanted plane at a
    /// left-image eccentricity, under this rig's verged cameras: the left
    /// pixel's ray is intersected with the plane and the hit point
    /// projected into the right camera.
    pub fn plane_disparity_exact(&self, slant_deg: f64, eccentricity_px: f64) -> f64 {
        let f = self.focal_px();
        let d = self.fixation_distance_m;
        let h = self.baseline_m / 2.0;
        let a = slant_deg.to_radians();
        let normal = [a.sin(), 0.0, a.cos()];
        let basis = |cx: f64| {
            let norm = (cx * cx + d * d).sqrt();
            let z = [-cx / norm, 0.0, d / norm];
            // cross((0,1,0), z), normalized.
            let x = [z[2], 0.0, -z[0]];
            let xn = (x[0] * x[0] + x[2] * x[2]).sqrt();
            ([x[0] / xn, 0.0, x[2] / xn], z)
        };
        let (xl, zl) = basis(-h);
        let (xr, zr) = basis(h);
        let s = eccentricity_px / f;
        let dir = [xl[0] * s + zl[0], 0.0, xl[2] * s + zl[2]];
        let cam_l = [-h, 0.0, -d];
        let t = -(normal[0] * cam_l[0] + normal[2] * cam_l[2])
            / (normal[0] * dir[0] + normal[2] * dir[2]);
        let p = [cam_l[0] + t * dir[0], 0.0, cam_l[2] + t * dir[2]];
        let pr = [p[0] - h, 0.0, p[2] + d];
        let x_right = f * (pr[0] * xr[0] + pr[2] * xr[2]) / (pr[0] * zr[0] + pr[2] * zr[2]);
        eccentricity_px - x_right
    }
}

/// Slant grid calibrated against a rig: starting from `anchor_deg`, each
/// further slant adds `px_per_step` of exact horizontal disparity at
/// `probe_eccentricity_px` from the center (bisection on the exact
/// plane-projection geometry).
pub fn calibrated_slants(
    rig: &RigSpec,
    probe_eccentricity_px: f64,
    px_per_step: f64,
    count: usize,
    anchor_deg: f64,
) -> Vec<f64> {
    let d0 = rig.plane_disparity_exact(anchor_deg, probe_eccentricity_px);
    let mut out = vec![anchor_deg];
    for k in 1..count {
        let target = d0 + k as f64 * px_per_step;
        let mut lo = anchor_deg;
        let mut hi = 89.9;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if rig.plane_disparity_exact(mid, probe_eccentricity_px) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        out.push(0.5 * (lo + hi));
    }
    out
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Renders both half-images of a textured plane through the exact
/// plane-induced homography of two verged pinhole cameras.
///
/// World frame: origin at the plane center (the fixation point), `x`
/// right, `y` down, `z` from the cameras toward the plane. The plane is
/// the fronto-parallel `z = 0` plane rotated by `slant` about the
/// in-plane axis perpendicular to the tilt direction; the texture rides
/// on the plane and is sampled with symmetric reflection, so any texture
/// size works.
pub fn render_slanted_plane<T: Scalar>(
    texture: &Image<T>,
    label: SurfaceLabel,
    rig: &RigSpec,
) -> Result<StereoPair<T>> {
    rig.validate()?;
    if !(label.slant_deg >= 0.0 && label.slant_deg < 90.0) {
        return Err(Error::InvalidArgument(format!(
            "slant must lie in [0, 90), got {}",
            label.slant_deg
        )));
    }

    let tilt = label.tilt_deg.to_radians();
    let slant = label.slant_deg.to_radians();
    // Depth gradient along (cos tilt, sin tilt); the plane rotates about
    // the perpendicular in-plane axis.
    let axis = [-tilt.sin(), tilt.cos(), 0.0];
    let rot = if slant == 0.0 {
        crate::geometry::Mat3::IDENTITY
    } else {
        crate::geometry::rodrigues(axis, slant)
    };
    let e1 = rot.mul_vec([1.0, 0.0, 0.0]);
    let e2 = rot.mul_vec([0.0, 1.0, 0.0]);
    let normal = rot.mul_vec([0.0, 0.0, 1.0]);

    let d = rig.fixation_distance_m;
    let half_b = rig.baseline_m / 2.0;
    let intr = rig.intrinsics();
    let n_px = rig.image_px;
    let (tex_h, tex_w) = texture.dims();
    let tex_cx = (tex_w as f64 - 1.0) / 2.0;
    let tex_cy = (tex_h as f64 - 1.0) / 2.0;

    let render_one = |cam_x: f64| -> Result<Image<T>> {
        let center = [cam_x, 0.0, -d];
        // Verged look-at basis: optical axis toward the plane center.
        let z_c = normalize3([-center[0], -center[1], -center[2]]);
        let x_c = normalize3(cross([0.0, 1.0, 0.0], z_c));
        let y_c = cross(z_c, x_c);

        let mut out = Image::<T>::zeros(n_px, n_px);
        let slice = out.as_mut_slice();
        for r in 0..n_px {
            for c in 0..n_px {
                let dir_cam = [
                    (c as f64 - intr.px) / intr.fx,
                    (r as f64 - intr.py) / intr.fy,
                    1.0,
                ];
                let dir = [
                    x_c[0] * dir_cam[0] + y_c[0] * dir_cam[1] + z_c[0] * dir_cam[2],
                    x_c[1] * dir_cam[0] + y_c[1] * dir_cam[1] + z_c[1] * dir_cam[2],
                    x_c[2] * dir_cam[0] + y_c[2] * dir_cam[1] + z_c[2] * dir_cam[2],
                ];
                let denom = dot(normal, dir);
                if denom.abs() < 1e-12 {
                    return Err(Error::InvalidData(
                        "view ray parallel to the plane; slant too extreme for the rig".into(),
                    ));
                }
                let t = -dot(normal, center) / denom;
                if t <= 0.0 {
                    return Err(Error::InvalidData("plane behind camera".into()));
                }
                let p = [
                    center[0] + t * dir[0],
                    center[1] + t * dir[1],
                    center[2] + t * dir[2],
                ];
                let u = dot(p, e1) / rig.texture_m_per_px + tex_cx;
                let v = dot(p, e2) / rig.texture_m_per_px + tex_cy;
                slice[r * n_px + c] = sample_reflected(texture, u, v);
            }
        }
        Ok(out)
    };

    StereoPair::new(render_one(-half_b)?, render_one(half_b)?)
}

/// Bilinear texture sampling with symmetric reflection at the borders.
fn sample_reflected<T: Scalar>(img: &Image<T>, x: f64, y: f64) -> T {
    let (h, w) = img.dims();
    let reflect = |v: f64, n: f64| -> f64 {
        // Fold into [0, 2n) then mirror the upper half.
        let m = 2.0 * n;
        let mut t = v.rem_euclid(m);
        if t >= n {
            t = m - t - 1.0 / (1e9);
        }
        t.clamp(0.0, n - 1.0)
    };
    let xs = reflect(x, w as f64);
    let ys = reflect(y, h as f64);
    img.sample_bilinear(xs, ys).expect("reflected coordinate is in range")
}

/// Measures horizontal disparity at one image location by normalized
/// cross-correlation: the shift `d` maximizing the match between the left
/// patch at `(x, y)` and the right patch at `(x - d, y)`, on a subpixel
/// grid. Positive values follow the crate's sign convention (right
/// content shifted left).
pub fn probe_horizontal_disparity<T: Scalar>(
    pair: &StereoPair<T>,
    x: f64,
    y: f64,
    half_width: usize,
    half_height: usize,
    max_shift: f64,
    step: f64,
) -> Result<f64> {
    let (h, w) = pair.dims();
    let hw = half_width as f64;
    let hh = half_height as f64;
    if x - hw - max_shift < 0.0
        || x + hw + max_shift > (w - 1) as f64
        || y - hh < 0.0
        || y + hh > (h - 1) as f64
    {
        return Err(Error::InvalidArgument(format!(
            "probe window at ({x}, {y}) exceeds the {h}x{w} image"
        )));
    }
    let nw = 2 * half_width + 1;
    let nh = 2 * half_height + 1;
    let mut left_patch = Vec::with_capacity(nw * nh);
    for r in 0..nh {
        for c in 0..nw {
            let sample = pair
                .left()
                .sample_bilinear(x - hw + c as f64, y - hh + r as f64)
                .expect("window checked against bounds");
            left_patch.push(to_f64(sample));
        }
    }
    let lm = left_patch.iter().sum::<f64>() / left_patch.len() as f64;
    for v in &mut left_patch {
        *v -= lm;
    }
    let lnorm = left_patch.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);

    let mut best = (0.0f64, f64::MIN);
    let steps = (2.0 * max_shift / step).round() as usize;
    for i in 0..=steps {
        let d = -max_shift + i as f64 * step;
        let mut dot = 0.0;
        let mut rsum = 0.0;
        let mut rsq = 0.0;
        let mut right_patch = Vec::with_capacity(nw * nh);
        for r in 0..nh {
            for c in 0..nw {
                let sample = pair
                    .right()
                    .sample_bilinear(x - d - hw + c as f64, y - hh + r as f64)
                    .expect("window checked against bounds");
                right_patch.push(to_f64(sample));
            }
        }
        for v in &right_patch {
            rsum += v;
        }
        let rm = rsum / right_patch.len() as f64;
        for (l, r) in left_patch.iter().zip(&right_patch) {
            let rv = r - rm;
            dot += l * rv;
            rsq += rv * rv;
        }
        let ncc = dot / (lnorm * rsq.sqrt().max(1e-12));
        if ncc > best.1 {
            best = (d, ncc);
        }
    }
    Ok(best.0)
}

/// One smoothstep-interpolated value-noise octave, in `[-1, 1]`.
fn noise_octave(height: usize, width: usize, cell: usize, seed: u64) -> Vec<f64> {
    let gw = width / cell + 2;
    let gh = height / cell + 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0f64; height * width];
    for r in 0..height {
        let gy = r as f64 / cell as f64;
        let y0 = gy.floor() as usize;
        let fy = gy - y0 as f64;
        let sy = fy * fy * (3.0 - 2.0 * fy);
        for c in 0..width {
            let gx = c as f64 / cell as f64;
            let x0 = gx.floor() as usize;
            let fx = gx - x0 as f64;
            let sx = fx * fx * (3.0 - 2.0 * fx);
            let v00 = grid[y0 * gw + x0];
            let v01 = grid[y0 * gw + x0 + 1];
            let v10 = grid[(y0 + 1) * gw + x0];
            let v11 = grid[(y0 + 1) * gw + x0 + 1];
            let top = v00 + sx * (v01 - v00);
            let bot = v10 + sx * (v11 - v10);
            out[r * width + c] = top + sy * (bot - top);
        }
    }
    out
}

/// Multi-octave value-noise texture in `[0, 1]`, deterministic for a
/// seed. A smooth contrast envelope modulates the detail, leaving some
/// regions nearly flat the way natural images do.
pub fn procedural_texture<T: Scalar>(height: usize, width: usize, seed: u64) -> Image<T> {
    let octaves: &[(usize, f64)] = &[(64, 1.0), (32, 0.7), (16, 0.5), (8, 0.35), (4, 0.25), (2, 0.15)];
    let mut acc = vec![0.0f64; height * width];
    for (oi, &(cell, amp)) in octaves.iter().enumerate() {
        let layer = noise_octave(
            height,
            width,
            cell,
            seed.wrapping_add(0x51ab ^ (oi as u64) << 17),
        );
        for (a, v) in acc.iter_mut().zip(&layer) {
            *a += amp * v;
        }
    }
    let envelope = noise_octave(
        height,
        width,
        height.max(width) / 3 + 1,
        seed ^ 0xC0DE_55AA,
    );
    for (a, e) in acc.iter_mut().zip(&envelope) {
        let u = 0.5 + 0.5 * e;
        *a *= 0.08 + 0.92 * u * u;
    }
    let max = acc.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-9);
    Image::from_fn(height, width, |r, c| {
        cast::<T>(0.5 + 0.5 * acc[r * width + c] / max)
    })
}

/// One stimulus file in a dataset directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path of the pair tensor, relative to the manifest.
    pub path: String,
    /// Ground-truth label; `None` for unlabeled (vergence) stimuli.
    pub label: Option<Label>,
    pub seed: u64,
    /// Output scale relative to the source material.
    pub scale: f64,
}

/// Dataset directory manifest (`manifest.json`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Label grid; `None` for unlabeled datasets.
    pub grid: Option<LabelGrid>,
    pub pair_height: usize,
    pub pair_width: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(&path, format!("manifest not serializable: {e}")))?;
        text.push('\n');
        std::fs::create_dir_all(dir.as_ref()).map_err(|e| Error::io(dir.as_ref(), e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join("manifest.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, format!("bad manifest: {e}")))
    }
}

/// Writes a stereo pair as a `[2, H, W]` f32 tensor.
pub fn save_pair<T: Scalar>(pair: &StereoPair<T>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = pair.dims();
    let mut data = Vec::with_capacity(2 * h * w);
    data.extend(pair.left().as_slice().iter().map(|&v| to_f64(v) as f32));
    data.extend(pair.right().as_slice().iter().map(|&v| to_f64(v) as f32));
    tensor::write_f32(path, &[2, h, w], &data)
}

/// Reads a stereo pair written by [`save_pair`].
pub fn load_pair<T: Scalar>(path: impl AsRef<Path>) -> Result<StereoPair<T>> {
    let path = path.as_ref();
    let (dims, data) = tensor::read_f32(path)?;
    if dims.len() != 3 || dims[0] != 2 {
        return Err(Error::format(
            path,
            format!("expected a [2, H, W] pair tensor, got {dims:?}"),
        ));
    }
    let (h, w) = (dims[1], dims[2]);
    let half = h * w;
    let left = Image::from_shape_vec(h, w, data[..half].iter().map(|&v| cast::<T>(v as f64)).collect())?;
    let right =
        Image::from_shape_vec(h, w, data[half..].iter().map(|&v| cast::<T>(v as f64)).collect())?;
    StereoPair::new(left, right)
}

/// Resolves a manifest entry against its directory.
pub fn entry_path(dir: impl AsRef<Path>, entry: &ManifestEntry) -> PathBuf {
    dir.as_ref().join(&entry.path)
}
