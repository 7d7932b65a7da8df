//! Dense voxel grids: trilinear interpolation, Gaussian smoothing, trilinear
//! upscaling, and the grid-level regularizers, each with a hand-derived
//! adjoint.
//!
//! Memory layout is channel-major, then row-major with z fastest:
//! `index(c,i,j,k) = ((c*Nx + i)*Ny + j)*Nz + k`. Checkpoints serialize this
//! layout directly, so it is part of the on-disk contract.

use crate::math::{Aabb, Vec3};
use crate::{Error, Result};

/// A `C`-channel dense voxel grid over an axis-aligned world box.
///
/// Grid node `(i,j,k)` sits at `bbox.min + (i,j,k) * step` with
/// `step = extent / (dims - 1)` per axis. The engine works with a single
/// scalar voxel size (the x step) and therefore requires near-cubic voxels;
/// callers pad their boxes with [`Aabb::cubed`] before building grids.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    dims: [usize; 3],
    channels: usize,
    bbox: Aabb,
    pub values: Vec<f64>,
}

impl DenseGrid {
    pub fn zeros(dims: [usize; 3], channels: usize, bbox: Aabb) -> Result<Self> {
        Self::from_values(dims, channels, bbox, vec![0.0; channels * dims[0] * dims[1] * dims[2]])
    }

    pub fn from_values(
        dims: [usize; 3],
        channels: usize,
        bbox: Aabb,
        values: Vec<f64>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::Grid(format!("dims must be >= 2 per axis, got {dims:?}")));
        }
        if channels == 0 {
            return Err(Error::Grid("channel count must be >= 1".into()));
        }
        let ext = bbox.extent();
        if !(ext.x > 0.0 && ext.y > 0.0 && ext.z > 0.0) {
            return Err(Error::Grid(format!("degenerate bbox {bbox:?}")));
        }
        let expect = channels * dims[0] * dims[1] * dims[2];
        if values.len() != expect {
            return Err(Error::Grid(format!(
                "value buffer has {} entries, dims/channels require {}",
                values.len(),
                expect
            )));
        }
        Ok(DenseGrid {
            dims,
            channels,
            bbox,
            values,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bbox(&self) -> Aabb {
        self.bbox
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn steps(&self) -> [f64; 3] {
        let e = self.bbox.extent();
        [
            e.x / (self.dims[0] - 1) as f64,
            e.y / (self.dims[1] - 1) as f64,
            e.z / (self.dims[2] - 1) as f64,
        ]
    }

    /// World units per grid step, as a single scalar (the x-axis step).
    /// Callers relying on one voxel size must build grids over boxes padded
    /// with [`Aabb::cubed`]; per-axis steps may differ by at most 1%.
    pub fn voxel_size(&self) -> f64 {
        let s = self.steps();
        let spread = (s[0].max(s[1]).max(s[2]) - s[0].min(s[1]).min(s[2])) / s[0];
        assert!(
            spread <= 0.01,
            "voxel_size on a non-cubic grid (per-axis steps {s:?})"
        );
        s[0]
    }

    #[inline]
    pub fn index(&self, c: usize, i: usize, j: usize, k: usize) -> usize {
        ((c * self.dims[0] + i) * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(c, i, j, k)]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, i: usize, j: usize, k: usize) -> &mut f64 {
        let idx = self.index(c, i, j, k);
        &mut self.values[idx]
    }

    pub fn node_pos(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let s = self.steps();
        self.bbox.min + Vec3::new(i as f64 * s[0], j as f64 * s[1], k as f64 * s[2])
    }

    /// Map a world point to continuous grid coordinates.
    fn grid_coords(&self, p: Vec3) -> [f64; 3] {
        let s = self.steps();
        [
            (p.x - self.bbox.min.x) / s[0],
            (p.y - self.bbox.min.y) / s[1],
            (p.z - self.bbox.min.z) / s[2],
        ]
    }

    /// Base cell and fractional offsets for interpolation at `p`.
    ///
    /// With `clamp` unset, a point outside the box is an error naming the
    /// offending coordinate; with it set, the point is clamped to the box
    /// first (samples are kept in-box upstream, this guards rounding).
    fn cell(&self, p: Vec3, clamp: bool) -> Result<([usize; 3], [f64; 3])> {
        let p = if clamp {
            self.bbox.clamp_point(p)
        } else {
            if !self.bbox.contains(p) {
                return Err(Error::OutOfBounds {
                    coord: p.to_array(),
                    min: self.bbox.min.to_array(),
                    max: self.bbox.max.to_array(),
                });
            }
            p
        };
        let g = self.grid_coords(p);
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let max_cell = self.dims[a] - 2;
            let fl = g[a].floor().clamp(0.0, max_cell as f64);
            base[a] = fl as usize;
            frac[a] = (g[a] - fl).clamp(0.0, 1.0);
        }
        Ok((base, frac))
    }

    /// Trilinear interpolation of all channels at `p` into `out`.
    pub fn interp_into(&self, p: Vec3, clamp: bool, out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(out.len(), self.channels);
        let ([i, j, k], [fx, fy, fz]) = self.cell(p, clamp)?;
        let w = corner_weights(fx, fy, fz);
        let [_, ny, nz] = [self.dims[0], self.dims[1], self.dims[2]];
        for (c, o) in out.iter_mut().enumerate() {
            let base = ((c * self.dims[0] + i) * ny + j) * nz + k;
            let v = &self.values;
            // Corner order: (dx,dy,dz) in bit order x=4, y=2, z=1.
            *o = w[0] * v[base]
                + w[1] * v[base + 1]
                + w[2] * v[base + nz]
                + w[3] * v[base + nz + 1]
                + w[4] * v[base + ny * nz]
                + w[5] * v[base + ny * nz + 1]
                + w[6] * v[base + ny * nz + nz]
                + w[7] * v[base + ny * nz + nz + 1];
        }
        Ok(())
    }

    /// Single-channel convenience wrapper around [`interp_into`].
    pub fn interp1(&self, p: Vec3, clamp: bool) -> Result<f64> {
        debug_assert_eq!(self.channels, 1);
        let mut out = [0.0];
        self.interp_into(p, clamp, &mut out)?;
        Ok(out[0])
    }

    /// Adjoint of [`interp_into`] w.r.t. the grid values: scatters the
    /// incoming per-channel cotangent into the 8 surrounding node slots of
    /// `grad` (same length as `values`) with the interpolation weights.
    pub fn interp_adjoint(&self, p: Vec3, clamp: bool, cot: &[f64], grad: &mut [f64]) -> Result<()> {
        debug_assert_eq!(cot.len(), self.channels);
        debug_assert_eq!(grad.len(), self.values.len());
        let ([i, j, k], [fx, fy, fz]) = self.cell(p, clamp)?;
        let w = corner_weights(fx, fy, fz);
        let [_, ny, nz] = [self.dims[0], self.dims[1], self.dims[2]];
        for (c, &g) in cot.iter().enumerate() {
            let base = ((c * self.dims[0] + i) * ny + j) * nz + k;
            grad[base] += w[0] * g;
            grad[base + 1] += w[1] * g;
            grad[base + nz] += w[2] * g;
            grad[base + nz + 1] += w[3] * g;
            grad[base + ny * nz] += w[4] * g;
            grad[base + ny * nz + 1] += w[5] * g;
            grad[base + ny * nz + nz] += w[6] * g;
            grad[base + ny * nz + nz + 1] += w[7] * g;
        }
        Ok(())
    }

    /// Mark the 8 nodes surrounding `p` with `max(current, value)` in `buf`
    /// (single-channel semantics; used for visibility maps).
    pub fn scatter_max(&self, p: Vec3, value: f64, buf: &mut [f64]) -> Result<()> {
        let ([i, j, k], _) = self.cell(p, true)?;
        let [_, ny, nz] = [self.dims[0], self.dims[1], self.dims[2]];
        let base = (i * ny + j) * nz + k;
        for off in [0, 1, nz, nz + 1, ny * nz, ny * nz + 1, ny * nz + nz, ny * nz + nz + 1] {
            let slot = &mut buf[base + off];
            if value > *slot {
                *slot = value;
            }
        }
        Ok(())
    }

    /// Cotangent of the interpolated values w.r.t. the query point itself.
    pub fn interp_point_grad(&self, p: Vec3, clamp: bool, cot: &[f64]) -> Result<Vec3> {
        debug_assert_eq!(cot.len(), self.channels);
        let ([i, j, k], [fx, fy, fz]) = self.cell(p, clamp)?;
        let s = self.steps();
        let [_, ny, nz] = [self.dims[0], self.dims[1], self.dims[2]];
        let mut acc = Vec3::ZERO;
        for (c, &g) in cot.iter().enumerate() {
            let base = ((c * self.dims[0] + i) * ny + j) * nz + k;
            let v = &self.values;
            let c000 = v[base];
            let c001 = v[base + 1];
            let c010 = v[base + nz];
            let c011 = v[base + nz + 1];
            let c100 = v[base + ny * nz];
            let c101 = v[base + ny * nz + 1];
            let c110 = v[base + ny * nz + nz];
            let c111 = v[base + ny * nz + nz + 1];
            // d/dfx of the trilinear blend, etc.
            let gx = (1.0 - fy) * (1.0 - fz) * (c100 - c000)
                + (1.0 - fy) * fz * (c101 - c001)
                + fy * (1.0 - fz) * (c110 - c010)
                + fy * fz * (c111 - c011);
            let gy = (1.0 - fx) * (1.0 - fz) * (c010 - c000)
                + (1.0 - fx) * fz * (c011 - c001)
                + fx * (1.0 - fz) * (c110 - c100)
                + fx * fz * (c111 - c101);
            let gz = (1.0 - fx) * (1.0 - fy) * (c001 - c000)
                + (1.0 - fx) * fy * (c011 - c010)
                + fx * (1.0 - fy) * (c101 - c100)
                + fx * fy * (c111 - c110);
            acc += Vec3::new(g * gx / s[0], g * gy / s[1], g * gz / s[2]);
        }
        Ok(acc)
    }

    /// Resample onto a finer grid over the same box. Each new node value is
    /// the trilinear interpolation of the old grid at the new node position;
    /// values are copied, never aliased. Downscaling is out of scope.
    pub fn upscale_trilinear(&self, new_dims: [usize; 3]) -> Result<DenseGrid> {
        for a in 0..3 {
            if new_dims[a] < self.dims[a] {
                return Err(Error::Grid(format!(
                    "upscale target {new_dims:?} is smaller than {:?} on axis {a}",
                    self.dims
                )));
            }
        }
        let mut out = DenseGrid::zeros(new_dims, self.channels, self.bbox)?;
        let mut buf = vec![0.0; self.channels];
        for i in 0..new_dims[0] {
            for j in 0..new_dims[1] {
                for k in 0..new_dims[2] {
                    let p = out.node_pos(i, j, k);
                    self.interp_into(p, true, &mut buf)?;
                    for (c, &v) in buf.iter().enumerate() {
                        *out.at_mut(c, i, j, k) = v;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Adjoint of [`DenseGrid::upscale_trilinear`]: scatters a cotangent grid at
/// the fine resolution back onto the source grid's value buffer.
pub fn upscale_trilinear_adjoint(src: &DenseGrid, cot: &DenseGrid, grad: &mut [f64]) {
    debug_assert_eq!(grad.len(), src.len());
    debug_assert_eq!(cot.channels(), src.channels());
    let [nx, ny, nz] = cot.dims();
    let mut buf = vec![0.0; src.channels()];
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let p = cot.node_pos(i, j, k);
                for (c, b) in buf.iter_mut().enumerate() {
                    *b = cot.at(c, i, j, k);
                }
                src.interp_adjoint(p, true, &buf, grad).expect("in-box node");
            }
        }
    }
}

#[inline]
fn corner_weights(fx: f64, fy: f64, fz: f64) -> [f64; 8] {
    let gx = 1.0 - fx;
    let gy = 1.0 - fy;
    let gz = 1.0 - fz;
    [
        gx * gy * gz,
        gx * gy * fz,
        gx * fy * gz,
        gx * fy * fz,
        fx * gy * gz,
        fx * gy * fz,
        fx * fy * gz,
        fx * fy * fz,
    ]
}

/// Normalized 3-D Gaussian kernel of side `2*half_width + 1`.
///
/// The weights factor into three identical 1-D kernels, so smoothing runs as
/// three separable passes; the materialized 3-D weights are kept for tests
/// and for direct convolution oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    half_width: usize,
    sigma: f64,
    weights_1d: Vec<f64>,
    weights_3d: Vec<f64>,
}

impl GaussianKernel {
    pub fn new(half_width: usize, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(Error::Grid(format!("kernel sigma must be positive, got {sigma}")));
        }
        let side = 2 * half_width + 1;
        let mut w1 = Vec::with_capacity(side);
        for i in 0..side {
            let d = i as f64 - half_width as f64;
            w1.push((-d * d / (2.0 * sigma * sigma)).exp());
        }
        let z: f64 = w1.iter().sum();
        for w in &mut w1 {
            *w /= z;
        }
        let mut w3 = Vec::with_capacity(side * side * side);
        for &a in &w1 {
            for &b in &w1 {
                for &c in &w1 {
                    w3.push(a * b * c);
                }
            }
        }
        Ok(GaussianKernel {
            half_width,
            sigma,
            weights_1d: w1,
            weights_3d: w3,
        })
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights_1d(&self) -> &[f64] {
        &self.weights_1d
    }

    /// Full (2k+1)^3 weight block, x-major then y then z.
    pub fn weights_3d(&self) -> &[f64] {
        &self.weights_3d
    }
}

/// Per-channel 3-D Gaussian convolution with replicate (edge-clamp) border
/// handling, as three separable 1-D passes. Replicate padding keeps boundary
/// SDF values from being dragged toward the zero level by the border.
pub fn gaussian_smooth(grid: &DenseGrid, kernel: &GaussianKernel) -> DenseGrid {
    let mut out = grid.clone();
    let mut tmp = vec![0.0; grid.values.len()];
    for axis in 0..3 {
        smooth_axis(&out, kernel, axis, &mut tmp);
        out.values.copy_from_slice(&tmp);
    }
    out
}

/// Adjoint of [`gaussian_smooth`]: scatters the cotangent back through the
/// three passes in reverse order, accumulating clamped border taps onto the
/// edge nodes. Adds the result into `grad`.
pub fn gaussian_smooth_adjoint(
    grid_like: &DenseGrid,
    kernel: &GaussianKernel,
    cot: &[f64],
    grad: &mut [f64],
) {
    debug_assert_eq!(cot.len(), grid_like.values.len());
    debug_assert_eq!(grad.len(), grid_like.values.len());
    let mut cur = cot.to_vec();
    let mut tmp = vec![0.0; cur.len()];
    // Forward order is axis 0,1,2; transpose runs 2,1,0.
    for axis in (0..3).rev() {
        smooth_axis_adjoint(grid_like, kernel, axis, &cur, &mut tmp);
        std::mem::swap(&mut cur, &mut tmp);
    }
    for (g, c) in grad.iter_mut().zip(cur.iter()) {
        *g += c;
    }
}

fn axis_geometry(grid: &DenseGrid, axis: usize) -> (usize, usize, usize) {
    // (length along axis, stride along axis, number of lines per channel)
    let [nx, ny, nz] = grid.dims;
    match axis {
        0 => (nx, ny * nz, ny * nz),
        1 => (ny, nz, nx * nz),
        _ => (nz, 1, nx * ny),
    }
}

fn line_base(grid: &DenseGrid, axis: usize, c: usize, line: usize) -> usize {
    let [nx, ny, nz] = grid.dims;
    let chan = c * nx * ny * nz;
    match axis {
        0 => chan + line,
        1 => {
            let i = line / nz;
            let k = line % nz;
            chan + i * ny * nz + k
        }
        _ => chan + line * nz,
    }
}

fn smooth_axis(grid: &DenseGrid, kernel: &GaussianKernel, axis: usize, out: &mut [f64]) {
    let (n, stride, lines) = axis_geometry(grid, axis);
    let k = kernel.half_width as isize;
    let w = &kernel.weights_1d;
    for c in 0..grid.channels {
        for line in 0..lines {
            let base = line_base(grid, axis, c, line);
            for i in 0..n as isize {
                let mut acc = 0.0;
                for (t, &wt) in w.iter().enumerate() {
                    let src = (i + t as isize - k).clamp(0, n as isize - 1) as usize;
                    acc += wt * grid.values[base + src * stride];
                }
                out[base + i as usize * stride] = acc;
            }
        }
    }
}

fn smooth_axis_adjoint(
    grid: &DenseGrid,
    kernel: &GaussianKernel,
    axis: usize,
    cot: &[f64],
    out: &mut [f64],
) {
    let (n, stride, lines) = axis_geometry(grid, axis);
    let k = kernel.half_width as isize;
    let w = &kernel.weights_1d;
    out.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..grid.channels {
        for line in 0..lines {
            let base = line_base(grid, axis, c, line);
            for i in 0..n as isize {
                let g = cot[base + i as usize * stride];
                for (t, &wt) in w.iter().enumerate() {
                    let src = (i + t as isize - k).clamp(0, n as isize - 1) as usize;
                    out[base + src * stride] += wt * g;
                }
            }
        }
    }
}

/// Direct (non-separable) 3-D convolution with replicate borders. Quadratic
/// in kernel side; used as the independent oracle for the separable path.
pub fn gaussian_smooth_direct(grid: &DenseGrid, kernel: &GaussianKernel) -> DenseGrid {
    let [nx, ny, nz] = grid.dims();
    let k = kernel.half_width() as isize;
    let side = 2 * kernel.half_width() + 1;
    let w3 = kernel.weights_3d();
    let mut out = grid.clone();
    for c in 0..grid.channels() {
        for i in 0..nx as isize {
            for j in 0..ny as isize {
                for l in 0..nz as isize {
                    let mut acc = 0.0;
                    for a in 0..side as isize {
                        for b in 0..side as isize {
                            for d in 0..side as isize {
                                let wi = w3[((a * side as isize + b) * side as isize + d) as usize];
                                let ii = (i + a - k).clamp(0, nx as isize - 1) as usize;
                                let jj = (j + b - k).clamp(0, ny as isize - 1) as usize;
                                let ll = (l + d - k).clamp(0, nz as isize - 1) as usize;
                                acc += wi * grid.at(c, ii, jj, ll);
                            }
                        }
                    }
                    *out.at_mut(c, i as usize, j as usize, l as usize) = acc;
                }
            }
        }
    }
    out
}

/// Total-variation loss: mean over voxels and channels of
/// `sqrt(dx^2 + dy^2 + dz^2 + eps^2)` with forward differences (differences
/// at the last index per axis are omitted). Mean normalization keeps the
/// weight resolution-robust. Returns `(loss, number_of_terms)`.
pub fn tv_loss(grid: &DenseGrid, eps: f64) -> (f64, usize) {
    let [nx, ny, nz] = grid.dims;
    let mut sum = 0.0;
    let mut terms = 0usize;
    for c in 0..grid.channels {
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let mut s = 0.0;
                    let mut any = false;
                    let v = grid.at(c, i, j, k);
                    if i + 1 < nx {
                        let d = grid.at(c, i + 1, j, k) - v;
                        s += d * d;
                        any = true;
                    }
                    if j + 1 < ny {
                        let d = grid.at(c, i, j + 1, k) - v;
                        s += d * d;
                        any = true;
                    }
                    if k + 1 < nz {
                        let d = grid.at(c, i, j, k + 1) - v;
                        s += d * d;
                        any = true;
                    }
                    if any {
                        sum += (s + eps * eps).sqrt();
                        terms += 1;
                    }
                }
            }
        }
    }
    (sum / terms.max(1) as f64, terms)
}

/// Adjoint of [`tv_loss`]: accumulates `weight * d(loss)/d(values)` into
/// `grad`.
pub fn tv_loss_adjoint(grid: &DenseGrid, eps: f64, weight: f64, grad: &mut [f64]) {
    debug_assert_eq!(grad.len(), grid.values.len());
    let [nx, ny, nz] = grid.dims;
    // every voxel except the last corner contributes one sqrt term
    let terms = grid.channels * (nx * ny * nz - 1);
    let scale = weight / terms.max(1) as f64;
    for c in 0..grid.channels {
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let idx = grid.index(c, i, j, k);
                    let v = grid.values[idx];
                    let mut s = 0.0;
                    let mut dx = 0.0;
                    let mut dy = 0.0;
                    let mut dz = 0.0;
                    let mut any = false;
                    if i + 1 < nx {
                        dx = grid.at(c, i + 1, j, k) - v;
                        s += dx * dx;
                        any = true;
                    }
                    if j + 1 < ny {
                        dy = grid.at(c, i, j + 1, k) - v;
                        s += dy * dy;
                        any = true;
                    }
                    if k + 1 < nz {
                        dz = grid.at(c, i, j, k + 1) - v;
                        s += dz * dz;
                        any = true;
                    }
                    if !any {
                        continue;
                    }
                    let r = (s + eps * eps).sqrt();
                    if r == 0.0 {
                        continue;
                    }
                    let inv = scale / r;
                    if i + 1 < nx {
                        grad[grid.index(c, i + 1, j, k)] += dx * inv;
                        grad[idx] -= dx * inv;
                    }
                    if j + 1 < ny {
                        grad[grid.index(c, i, j + 1, k)] += dy * inv;
                        grad[idx] -= dy * inv;
                    }
                    if k + 1 < nz {
                        grad[grid.index(c, i, j, k + 1)] += dz * inv;
                        grad[idx] -= dz * inv;
                    }
                }
            }
        }
    }
}

/// Central-difference spatial gradient of a single-channel grid, in world
/// units: C=3 output grid holding (d/dx, d/dy, d/dz). One-sided differences
/// at the boundaries.
pub fn grid_gradient(sdf: &DenseGrid) -> Result<DenseGrid> {
    if sdf.channels != 1 {
        return Err(Error::Grid(format!(
            "spatial gradient expects a single-channel grid, got C={}",
            sdf.channels
        )));
    }
    let [nx, ny, nz] = sdf.dims;
    let s = sdf.steps();
    let mut out = DenseGrid::zeros(sdf.dims, 3, sdf.bbox)?;
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                for (axis, n) in [nx, ny, nz].into_iter().enumerate() {
                    let idx = [i, j, k][axis];
                    let mut lo = [i, j, k];
                    let mut hi = [i, j, k];
                    let denom = if idx == 0 {
                        hi[axis] += 1;
                        s[axis]
                    } else if idx == n - 1 {
                        lo[axis] -= 1;
                        s[axis]
                    } else {
                        lo[axis] -= 1;
                        hi[axis] += 1;
                        2.0 * s[axis]
                    };
                    let d = (sdf.at(0, hi[0], hi[1], hi[2]) - sdf.at(0, lo[0], lo[1], lo[2])) / denom;
                    *out.at_mut(axis, i, j, k) = d;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`grid_gradient`]: scatters a C=3 cotangent grid back into the
/// single-channel SDF gradient buffer.
pub fn grid_gradient_adjoint(sdf: &DenseGrid, cot: &DenseGrid, grad: &mut [f64]) {
    debug_assert_eq!(cot.channels, 3);
    debug_assert_eq!(grad.len(), sdf.values.len());
    let [nx, ny, nz] = sdf.dims;
    let s = sdf.steps();
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                for (axis, n) in [nx, ny, nz].into_iter().enumerate() {
                    let g = cot.at(axis, i, j, k);
                    if g == 0.0 {
                        continue;
                    }
                    let idx = [i, j, k][axis];
                    let mut lo = [i, j, k];
                    let mut hi = [i, j, k];
                    let denom = if idx == 0 {
                        hi[axis] += 1;
                        s[axis]
                    } else if idx == n - 1 {
                        lo[axis] -= 1;
                        s[axis]
                    } else {
                        lo[axis] -= 1;
                        hi[axis] += 1;
                        2.0 * s[axis]
                    };
                    grad[sdf.index(0, hi[0], hi[1], hi[2])] += g / denom;
                    grad[sdf.index(0, lo[0], lo[1], lo[2])] -= g / denom;
                }
            }
        }
    }
}

/// Smoothness loss: mean squared difference between the Gaussian-smoothed
/// grid and the grid itself. Mean over all entries keeps the weight
/// resolution-robust.
pub fn smooth_loss(grid: &DenseGrid, kernel: &GaussianKernel) -> f64 {
    let blurred = gaussian_smooth(grid, kernel);
    let n = grid.values.len() as f64;
    grid.values
        .iter()
        .zip(blurred.values.iter())
        .map(|(&v, &b)| (b - v) * (b - v))
        .sum::<f64>()
        / n
}

/// Adjoint of [`smooth_loss`]: accumulates `weight * d(loss)/d(values)` into
/// `grad`. With `D = G(V) - V`, the gradient is `(2/N) * (G^T D - D)`.
pub fn smooth_loss_adjoint(grid: &DenseGrid, kernel: &GaussianKernel, weight: f64, grad: &mut [f64]) {
    let blurred = gaussian_smooth(grid, kernel);
    let n = grid.values.len() as f64;
    let diff: Vec<f64> = blurred
        .values
        .iter()
        .zip(grid.values.iter())
        .map(|(&b, &v)| b - v)
        .collect();
    let scale = 2.0 * weight / n;
    let mut gt = vec![0.0; diff.len()];
    gaussian_smooth_adjoint(grid, kernel, &diff, &mut gt);
    for ((g, d), t) in grad.iter_mut().zip(diff.iter()).zip(gt.iter()) {
        *g += scale * (t - d);
    }
}
