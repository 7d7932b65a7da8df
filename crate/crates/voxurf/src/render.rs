//! Camera rays, along-ray sampling, SDF- and density-based opacity, and
//! volume-rendering compositing, all with hand-derived adjoints.

use crate::grid::DenseGrid;
use crate::math::{Aabb, Vec3};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Pinhole camera: intrinsics (zero skew) plus a rigid world-from-camera
/// transform. Camera frame: x right, y down, z forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major 4x4 rigid transform mapping camera coordinates to world.
    pub world_from_camera: [[f64; 4]; 4],
}

impl Camera {
    pub fn new(
        intrinsics: [f64; 9],
        world_from_camera: [[f64; 4]; 4],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let (fx, fy) = (intrinsics[0], intrinsics[4]);
        let (cx, cy) = (intrinsics[2], intrinsics[5]);
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Dataset(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_from_camera,
        };
        // rotation block must be orthonormal
        let r = cam.rotation();
        for a in 0..3 {
            for b in 0..3 {
                let dot = r[a].dot(r[b]);
                let want = if a == b { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::Dataset(format!(
                        "camera rotation is not orthonormal (rows {a},{b}: {dot})"
                    )));
                }
            }
        }
        Ok(cam)
    }

    fn rotation(&self) -> [Vec3; 3] {
        let m = &self.world_from_camera;
        [
            Vec3::new(m[0][0], m[0][1], m[0][2]),
            Vec3::new(m[1][0], m[1][1], m[1][2]),
            Vec3::new(m[2][0], m[2][1], m[2][2]),
        ]
    }

    pub fn center(&self) -> Vec3 {
        let m = &self.world_from_camera;
        Vec3::new(m[0][3], m[1][3], m[2][3])
    }

    /// Unit world-space direction through pixel coordinate `(u, v)`; the
    /// pixel center of the integer pixel `(u, v)` is at `(u + 0.5, v + 0.5)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let d_cam = Vec3::new(
            (u + 0.5 - self.cx) / self.fx,
            (v + 0.5 - self.cy) / self.fy,
            1.0,
        );
        let r = self.rotation();
        Vec3::new(
            r[0].x * d_cam.x + r[0].y * d_cam.y + r[0].z * d_cam.z,
            r[1].x * d_cam.x + r[1].y * d_cam.y + r[1].z * d_cam.z,
            r[2].x * d_cam.x + r[2].y * d_cam.y + r[2].z * d_cam.z,
        )
        .normalized()
    }
}

/// A batch of camera rays with ground-truth colors attached.
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub origins: Vec<Vec3>,
    pub dirs: Vec<Vec3>,
    /// (view index, pixel index) provenance of each ray.
    pub pixels: Vec<(u32, u32)>,
    pub gt_colors: Vec<Vec3>,
    pub gt_masks: Option<Vec<f64>>,
    /// Global sampling range hints of the dataset.
    pub near: f64,
    pub far: f64,
}

impl Default for RayBatch {
    fn default() -> Self {
        RayBatch {
            origins: Vec::new(),
            dirs: Vec::new(),
            pixels: Vec::new(),
            gt_colors: Vec::new(),
            gt_masks: None,
            near: 0.0,
            far: f64::INFINITY,
        }
    }
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Build rays through the centers of the listed integer pixels.
pub fn generate_rays(camera: &Camera, pixels: &[(u32, u32)]) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let o = camera.center();
    let mut origins = Vec::with_capacity(pixels.len());
    let mut dirs = Vec::with_capacity(pixels.len());
    for &(u, v) in pixels {
        if u as usize >= camera.width || v as usize >= camera.height {
            return Err(Error::Dataset(format!(
                "pixel ({u},{v}) outside {}x{} image",
                camera.width, camera.height
            )));
        }
        origins.push(o);
        dirs.push(camera.ray_direction(u as f64, v as f64));
    }
    Ok((origins, dirs))
}

/// Uniformly spaced sample positions of one ray inside `bbox`.
///
/// Returns the parameter values `t_near + i*step` covering `[t_near, t_far]`
/// (the exit point is included when the spacing lands on it exactly). Rays
/// missing the box produce no samples. `valid` marks samples inside the
/// occupancy mask; invalid samples contribute zero opacity downstream rather
/// than being dropped, so per-ray shapes stay rectangular.
#[derive(Debug, Clone, Default)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub pos: Vec<Vec3>,
    pub valid: Vec<bool>,
}

pub fn sample_points(
    origin: Vec3,
    dir: Vec3,
    bbox: Aabb,
    step: f64,
    near: f64,
    far: f64,
    occupancy: Option<&DenseGrid>,
) -> RaySamples {
    debug_assert!(step > 0.0);
    let mut out = RaySamples::default();
    let Some((t0, t1)) = bbox.ray_range(origin, dir, near.max(0.0), far) else {
        return out;
    };
    if t1 < t0 {
        return out;
    }
    let count = ((t1 - t0) / step + 1e-9).floor() as usize + 1;
    out.t.reserve(count);
    out.pos.reserve(count);
    out.valid.reserve(count);
    for i in 0..count {
        let t = t0 + i as f64 * step;
        let p = bbox.clamp_point(origin + dir * t);
        let valid = match occupancy {
            Some(occ) => occ.bbox().contains(p) && occupied_at(occ, p),
            None => true,
        };
        out.t.push(t);
        out.pos.push(p);
        out.valid.push(valid);
    }
    out
}

/// Nearest-node lookup into a 0/1 occupancy grid.
fn occupied_at(occ: &DenseGrid, p: Vec3) -> bool {
    let [nx, ny, nz] = occ.dims();
    let e = occ.bbox().extent();
    let q = p - occ.bbox().min;
    let i = ((q.x / e.x * (nx - 1) as f64).round() as usize).min(nx - 1);
    let j = ((q.y / e.y * (ny - 1) as f64).round() as usize).min(ny - 1);
    let k = ((q.z / e.z * (nz - 1) as f64).round() as usize).min(nz - 1);
    occ.at(0, i, j, k) > 0.5
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Opacity of one ray interval from the SDF values at its two endpoints,
/// `alpha = max((phi(f_i) - phi(f_next)) / phi(f_i), 0)` with the logistic
/// CDF `phi(x) = 1/(1+exp(-kappa*x))`. Evaluated in log space so large
/// `kappa * f` cannot overflow.
pub fn sdf_alpha(f_i: f64, f_next: f64, kappa: f64) -> f64 {
    sdf_alpha_grad(f_i, f_next, kappa).0
}

/// Forward value plus partial derivatives w.r.t. `f_i` and `f_next`.
pub fn sdf_alpha_grad(f_i: f64, f_next: f64, kappa: f64) -> (f64, f64, f64) {
    debug_assert!(kappa > 0.0);
    // log phi(x) = -softplus(-kappa x); ratio = phi(f_next)/phi(f_i)
    let log_ratio = softplus(-kappa * f_i) - softplus(-kappa * f_next);
    let ratio = log_ratio.exp();
    if ratio >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let d_fi = ratio * kappa * sigmoid(-kappa * f_i);
    let d_fn = -ratio * kappa * sigmoid(-kappa * f_next);
    (1.0 - ratio, d_fi, d_fn)
}

/// Density-based opacity used by the search phase:
/// `alpha = 1 - exp(-softplus(sigma + shift) * delta)`.
pub fn density_alpha(sigma: f64, delta: f64, shift: f64) -> f64 {
    density_alpha_grad(sigma, delta, shift).0
}

/// Forward value plus the partial derivative w.r.t. `sigma`.
pub fn density_alpha_grad(sigma: f64, delta: f64, shift: f64) -> (f64, f64) {
    debug_assert!(delta > 0.0);
    let s = softplus(sigma + shift);
    let e = (-s * delta).exp();
    (1.0 - e, e * delta * sigmoid(sigma + shift))
}

/// Solve the softplus shift so that raw density 0 renders with opacity
/// `alpha_init` at spacing `delta`: `softplus(shift) = -ln(1-alpha_init)/delta`.
pub fn solve_density_shift(alpha_init: f64, delta: f64) -> f64 {
    debug_assert!(alpha_init > 0.0 && alpha_init < 1.0);
    let y = -(1.0 - alpha_init).ln() / delta;
    // inverse softplus
    y.exp_m1().ln()
}

/// Transmittance-weighted compositing of per-sample opacities and colors.
#[derive(Debug, Clone)]
pub struct Composite {
    pub color: Vec3,
    /// `w_i = T_i * alpha_i` per sample.
    pub weights: Vec<f64>,
    /// `sum(w_i)`; the residual `1 - acc` is composited onto the background.
    pub acc: f64,
}

/// Forward compositing: `T_i = prod_{j<i}(1 - alpha_j)`, `w_i = T_i alpha_i`,
/// `C = sum w_i c_i + (1 - sum w_i) * background`.
pub fn composite(alphas: &[f64], colors: &[Vec3], background: Vec3) -> Composite {
    debug_assert_eq!(alphas.len(), colors.len());
    let mut weights = Vec::with_capacity(alphas.len());
    let mut transmittance = 1.0;
    let mut color = Vec3::ZERO;
    let mut acc = 0.0;
    for (&a, &c) in alphas.iter().zip(colors.iter()) {
        let w = transmittance * a;
        color += c * w;
        acc += w;
        weights.push(w);
        transmittance *= 1.0 - a;
    }
    color += background * (1.0 - acc);
    Composite {
        color,
        weights,
        acc,
    }
}

/// Adjoint of [`composite`]: given cotangents on the output color and on the
/// accumulated opacity, produce cotangents on every alpha and color.
pub fn composite_adjoint(
    alphas: &[f64],
    colors: &[Vec3],
    background: Vec3,
    d_color: Vec3,
    d_acc: f64,
    d_alphas: &mut [f64],
    d_colors: &mut [Vec3],
) {
    let n = alphas.len();
    debug_assert_eq!(colors.len(), n);
    debug_assert_eq!(d_alphas.len(), n);
    debug_assert_eq!(d_colors.len(), n);
    // recompute transmittances
    let mut trans = Vec::with_capacity(n);
    let mut t = 1.0;
    for &a in alphas {
        trans.push(t);
        t *= 1.0 - a;
    }
    // suffix sums over i > k of w_i c_i and w_i
    let mut suffix_wc = Vec3::ZERO;
    let mut suffix_w = 0.0;
    for k in (0..n).rev() {
        let t_k = trans[k];
        let w_k = t_k * alphas[k];
        d_colors[k] += d_color * w_k;
        let one_minus = 1.0 - alphas[k];
        // d acc / d alpha_k = T_k - suffix_w / (1 - alpha_k)
        // d C   / d alpha_k = T_k c_k - suffix_wc/(1-a_k) - bg*(dacc term)
        let (swc, sw) = if one_minus > 1e-12 {
            (suffix_wc / one_minus, suffix_w / one_minus)
        } else {
            // alpha ~ 1: everything behind has zero weight
            (Vec3::ZERO, 0.0)
        };
        let dacc_dalpha = t_k - sw;
        let dc_dalpha = colors[k] * t_k - swc - background * dacc_dalpha;
        d_alphas[k] += d_color.dot(dc_dalpha) + d_acc * dacc_dalpha;
        suffix_wc += colors[k] * w_k;
        suffix_w += w_k;
    }
}

/// Linear sharpness schedule. The scheduled scale `s` shrinks over training,
/// so the logistic slope `kappa = 1/s = iter/speed + 1/s_start` grows
/// linearly and the rendered surface sharpens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SSchedule {
    pub s_start: f64,
    pub speed: f64,
}

impl SSchedule {
    pub fn kappa(&self, iter: u64) -> f64 {
        iter as f64 / self.speed + 1.0 / self.s_start
    }
}
