//! Pinhole-camera geometry: 3x3 matrices, virtual camera rotations toward
//! fixation points, and homography warping.
//!
//! All geometry runs in `f64` regardless of the image scalar type; camera
//! rotations must stay orthonormal to machine precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::Image;
use crate::scalar::Scalar;

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn mul(&self, other: &Mat3) -> Mat3 {
        let a = &self.0;
        let b = &other.0;
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        Mat3(out)
    }

    pub fn mul_vec(&self, v: [f64; 3]) -> [f64; 3] {
        let a = &self.0;
        [
            a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
            a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
            a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
        ]
    }

    pub fn transpose(&self) -> Mat3 {
        let a = &self.0;
        Mat3([
            [a[0][0], a[1][0], a[2][0]],
            [a[0][1], a[1][1], a[2][1]],
            [a[0][2], a[1][2], a[2][2]],
        ])
    }

    pub fn det(&self) -> f64 {
        let a = &self.0;
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    }

    /// Frobenius distance of `R^T R` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.transpose().mul(self);
        let mut err = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                err += (gram.0[i][j] - target).powi(2);
            }
        }
        err.sqrt()
    }
}

/// Pinhole intrinsics: focal lengths and principal point in pixels.
/// `px` runs along columns (x), `py` along rows (y).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub px: f64,
    pub py: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, px: f64, py: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        Ok(CameraIntrinsics { fx, fy, px, py })
    }

    /// Camera matrix K.
    pub fn matrix(&self) -> Mat3 {
        Mat3([
            [self.fx, 0.0, self.px],
            [0.0, self.fy, self.py],
            [0.0, 0.0, 1.0],
        ])
    }

    /// Analytic inverse of K.
    pub fn inverse_matrix(&self) -> Mat3 {
        Mat3([
            [1.0 / self.fx, 0.0, -self.px / self.fx],
            [0.0, 1.0 / self.fy, -self.py / self.fy],
            [0.0, 0.0, 1.0],
        ])
    }
}

/// Image point in pixel coordinates (`x` along columns, `y` along rows).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }
}

/// Virtual camera rotation that fixates the image point `s`, following
/// Listing's law.
///
/// The rotation axis lies in the image plane, `u = (-(s_x - p_x),
/// s_y - p_y, 0)`, and the angle is `atan(|s - p| / f)`. Returns the
/// identity when `s = p`.
///
/// Note the axis is the one used by the source material: it lies in the
/// image plane but is not in general perpendicular to `s - p`.
pub fn listing_rotation(s: Point2, p: Point2, f: f64) -> Result<Mat3> {
    if !(f > 0.0) || !f.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "focal length must be positive, got {f}"
        )));
    }
    let dx = s.x - p.x;
    let dy = s.y - p.y;
    let dist = (dx * dx + dy * dy).sqrt();
    if dist == 0.0 {
        return Ok(Mat3::IDENTITY);
    }
    let theta = (dist / f).atan();
    let ux = -dx / dist;
    let uy = dy / dist;
    Ok(rodrigues_in_plane(ux, uy, theta))
}

/// Rotation angle that [`listing_rotation`] would use for fixating `s`.
pub fn listing_angle(s: Point2, p: Point2, f: f64) -> f64 {
    let dx = s.x - p.x;
    let dy = s.y - p.y;
    ((dx * dx + dy * dy).sqrt() / f).atan()
}

/// Rodrigues rotation about a unit axis `(ux, uy, 0)` lying in the image
/// plane.
fn rodrigues_in_plane(ux: f64, uy: f64, theta: f64) -> Mat3 {
    let c = theta.cos();
    let s = theta.sin();
    let t = 1.0 - c;
    Mat3([
        [c + ux * ux * t, ux * uy * t, uy * s],
        [ux * uy * t, c + uy * uy * t, -ux * s],
        [-uy * s, ux * s, c],
    ])
}

/// General Rodrigues formula, used as an independent oracle in tests and
/// by the slanted-plane renderer.
pub fn rodrigues(axis: [f64; 3], theta: f64) -> Mat3 {
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    assert!(norm > 0.0, "rotation axis must be nonzero");
    let (x, y, z) = (axis[0] / norm, axis[1] / norm, axis[2] / norm);
    let c = theta.cos();
    let s = theta.sin();
    let t = 1.0 - c;
    Mat3([
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ])
}

/// Warped image plus validity mask (`true` where the source was in view).
#[derive(Clone, Debug)]
pub struct Warped<T> {
    pub image: Image<T>,
    pub mask: Vec<bool>,
}

impl<T> Warped<T> {
    pub fn mask_at(&self, row: usize, col: usize, width: usize) -> bool {
        self.mask[row * width + col]
    }
}

/// Applies the pixel mapping `x' = K R K^-1 x` by inverse warping with
/// bilinear sampling. Out-of-view pixels are zero-filled and masked out.
pub fn homography_warp<T: Scalar>(
    img: &Image<T>,
    intrinsics: &CameraIntrinsics,
    rotation: &Mat3,
) -> Result<Warped<T>> {
    let ortho = rotation.orthonormality_error();
    if ortho > 1e-6 || (rotation.det() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "warp rotation is not orthonormal (error {ortho:.2e}, det {})",
            rotation.det()
        )));
    }
    // Forward map: x' = K R K^-1 x. Inverse warping samples the source at
    // K R^T K^-1 x'.
    let k = intrinsics.matrix();
    let k_inv = intrinsics.inverse_matrix();
    let back = k.mul(&rotation.transpose()).mul(&k_inv);

    let (h, w) = img.dims();
    let mut out = Image::<T>::zeros(h, w);
    let mut mask = vec![false; h * w];
    let slice = out.as_mut_slice();
    for r in 0..h {
        for c in 0..w {
            let v = back.mul_vec([c as f64, r as f64, 1.0]);
            if v[2].abs() < 1e-12 {
                continue;
            }
            let sx = v[0] / v[2];
            let sy = v[1] / v[2];
            if let Some(val) = img.sample_bilinear(sx, sy) {
                slice[r * w + c] = val;
                mask[r * w + c] = true;
            }
        }
    }
    Ok(Warped { image: out, mask })
}
