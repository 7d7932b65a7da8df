//! The trainable scene model: SDF and feature grids, positional encoding,
//! smoothed SDF queries, multi-level geometry features, and the shallow
//! color networks (single MLP for the coarse stage, dual network with a
//! residual head and stop-gradient for the fine stage).

use crate::grid::{gaussian_smooth, DenseGrid, GaussianKernel};
use crate::math::Vec3;
use crate::optim::ParamGroup;
use crate::Result;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Output dimension of [`pos_encode_into`] for a 3-vector input.
pub fn pos_encode_dim(freqs: usize) -> usize {
    3 + 6 * freqs
}

/// Frequency encoding `[x, sin(2^0 pi x), cos(2^0 pi x), ...,
/// sin(2^{L-1} pi x), cos(2^{L-1} pi x)]`, applied per component: for each
/// frequency the three sine slots come first, then the three cosines.
pub fn pos_encode_into(x: Vec3, freqs: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), pos_encode_dim(freqs));
    out[0] = x.x;
    out[1] = x.y;
    out[2] = x.z;
    let mut off = 3;
    let mut scale = std::f64::consts::PI;
    for _ in 0..freqs {
        for a in 0..3 {
            let (s, c) = (scale * x.get(a)).sin_cos();
            out[off + a] = s;
            out[off + 3 + a] = c;
        }
        off += 6;
        scale *= 2.0;
    }
}

/// Output head of an MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// Sigmoid squashing into (0,1); used for absolute colors.
    Sigmoid,
    /// Raw linear output; used for the color residual.
    Linear,
}

/// One dense layer with its gradient accumulators.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `[out_dim x in_dim]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub gw: Vec<f64>,
    pub gb: Vec<f64>,
    wname: String,
    bname: String,
}

/// Shallow rectifier MLP with hand-derived backward pass. "n-layer" counts
/// the linear layers; hidden activations are ReLU, the output activation is
/// the configured head. The final layer initializes to zero so a fresh
/// network predicts the head of zero (mid-gray for sigmoid, no-op for the
/// residual head).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    pub layers: Vec<Linear>,
    pub head: Head,
}

/// Per-sample forward activations kept for the backward pass. `acts[0]` is
/// the input; `acts[l+1]` the post-activation output of layer `l`.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    pub acts: Vec<Vec<f64>>,
}

/// Detached gradient accumulators matching an [`Mlp`]'s layers, used by
/// worker chunks before merging into the network's own buffers.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub gw: Vec<Vec<f64>>,
    pub gb: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            gw: mlp.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            gb: mlp.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    pub fn merge_into(&self, mlp: &mut Mlp) {
        for (l, (gw, gb)) in mlp.layers.iter_mut().zip(self.gw.iter().zip(self.gb.iter())) {
            for (a, b) in l.gw.iter_mut().zip(gw) {
                *a += b;
            }
            for (a, b) in l.gb.iter_mut().zip(gb) {
                *a += b;
            }
        }
    }
}

impl Mlp {
    /// `dims` lists the sizes `[input, hidden..., output]`. Hidden layers get
    /// uniform He initialization from `rng`; the output layer starts at zero.
    pub fn new(name: &str, dims: &[usize], head: Head, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let last = l == dims.len() - 2;
            let bound = (6.0 / fan_in as f64).sqrt();
            let (w, b) = if last {
                (vec![0.0; fan_in * fan_out], vec![0.0; fan_out])
            } else {
                let b_bound = 1.0 / (fan_in as f64).sqrt();
                (
                    (0..fan_in * fan_out)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect(),
                    (0..fan_out).map(|_| rng.gen_range(-b_bound..b_bound)).collect(),
                )
            };
            layers.push(Linear {
                in_dim: fan_in,
                out_dim: fan_out,
                w,
                b,
                gw: vec![0.0; fan_in * fan_out],
                gb: vec![0.0; fan_out],
                wname: format!("{name}.layer{l}.weight"),
                bname: format!("{name}.layer{l}.bias"),
            });
        }
        Mlp {
            name: name.to_string(),
            layers,
            head,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn forward(&self, input: &[f64], out: &mut [f64], cache: Option<&mut MlpCache>) {
        debug_assert_eq!(input.len(), self.in_dim());
        debug_assert_eq!(out.len(), self.out_dim());
        let mut cache = cache;
        if let Some(c) = cache.as_deref_mut() {
            c.acts.clear();
            c.acts.push(input.to_vec());
        }
        let mut cur: Vec<f64> = input.to_vec();
        let n_layers = self.layers.len();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.out_dim];
            for (o, nv) in next.iter_mut().enumerate() {
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                let mut acc = layer.b[o];
                for (wi, xi) in row.iter().zip(cur.iter()) {
                    acc += wi * xi;
                }
                *nv = acc;
            }
            let last = li == n_layers - 1;
            if last {
                if self.head == Head::Sigmoid {
                    for v in &mut next {
                        *v = stable_sigmoid(*v);
                    }
                }
            } else {
                for v in &mut next {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            if let Some(c) = cache.as_deref_mut() {
                c.acts.push(next.clone());
            }
            cur = next;
        }
        out.copy_from_slice(&cur);
    }

    /// Backward pass from a cotangent on the (post-head) output. Accumulates
    /// parameter gradients into `grads` and writes the input cotangent.
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], grads: &mut MlpGrads, d_in: &mut [f64]) {
        let n_layers = self.layers.len();
        debug_assert_eq!(cache.acts.len(), n_layers + 1);
        let mut delta: Vec<f64> = d_out.to_vec();
        // head
        if self.head == Head::Sigmoid {
            let y = &cache.acts[n_layers];
            for (d, &yv) in delta.iter_mut().zip(y.iter()) {
                *d *= yv * (1.0 - yv);
            }
        }
        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            if li != n_layers - 1 {
                // ReLU mask from the stored post-activation
                let a = &cache.acts[li + 1];
                for (d, &av) in delta.iter_mut().zip(a.iter()) {
                    if av <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &cache.acts[li];
            let gw = &mut grads.gw[li];
            let gb = &mut grads.gb[li];
            for (o, &dv) in delta.iter().enumerate() {
                gb[o] += dv;
                if dv != 0.0 {
                    let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (g, &xi) in row.iter_mut().zip(input.iter()) {
                        *g += dv * xi;
                    }
                }
            }
            let mut prev = vec![0.0; layer.in_dim];
            for (o, &dv) in delta.iter().enumerate() {
                if dv != 0.0 {
                    let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (p, &wi) in prev.iter_mut().zip(row.iter()) {
                        *p += dv * wi;
                    }
                }
            }
            delta = prev;
        }
        d_in.copy_from_slice(&delta);
    }

    pub fn param_groups(&mut self, lr: f64) -> Vec<ParamGroup<'_>> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            let Linear {
                w,
                b,
                gw,
                gb,
                wname,
                bname,
                ..
            } = l;
            out.push(ParamGroup {
                name: wname,
                lr,
                values: w,
                grad: gw,
            });
            out.push(ParamGroup {
                name: bname,
                lr,
                values: b,
                grad: gb,
            });
        }
        out
    }
}

#[inline]
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Which pieces of the multi-level geometry feature are produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoFeatureSpec {
    /// Neighborhood level in half-voxel steps: 0.5, 1.0, 1.5, ... (0 keeps
    /// only the center SDF value).
    pub level: f64,
    /// Include the center + neighbor SDF values.
    pub include_sdf: bool,
    /// Include the per-level finite-difference normals.
    pub include_normals: bool,
}

impl GeoFeatureSpec {
    pub fn level_count(&self) -> usize {
        (self.level * 2.0).round().max(0.0) as usize
    }

    pub fn sdf_dim(&self) -> usize {
        if self.include_sdf {
            1 + 6 * self.level_count()
        } else {
            0
        }
    }

    pub fn normal_dim(&self) -> usize {
        if self.include_normals {
            3 * self.level_count()
        } else {
            0
        }
    }

    pub fn dim(&self) -> usize {
        self.sdf_dim() + self.normal_dim()
    }
}

/// The trainable scene grids: SDF grid, feature grid, the Gaussian query
/// kernel and its cached smoothed grid. Gradient buffers live with the
/// training phase, not here, so adjoint scatters can run while the field is
/// borrowed for queries.
#[derive(Debug, Clone)]
pub struct SceneField {
    pub sdf: DenseGrid,
    pub feat: DenseGrid,
    pub kernel: GaussianKernel,
    /// Gaussian-smoothed copy of `sdf`, refreshed once per training step
    /// when smoothed queries are active.
    pub smoothed: Option<DenseGrid>,
}

impl SceneField {
    pub fn new(sdf: DenseGrid, feat: DenseGrid, kernel: GaussianKernel) -> Self {
        assert_eq!(sdf.bbox(), feat.bbox(), "grids must share one bbox");
        SceneField {
            sdf,
            feat,
            kernel,
            smoothed: None,
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.sdf.voxel_size()
    }

    /// Recompute the smoothed-grid cache from the current SDF values.
    pub fn refresh_smoothed(&mut self) {
        self.smoothed = Some(gaussian_smooth(&self.sdf, &self.kernel));
    }

    pub fn drop_smoothed(&mut self) {
        self.smoothed = None;
    }

    /// SDF value at `p`; `smoothed` selects the Gaussian-smoothed grid
    /// (refreshed by the caller once per step) or the raw grid.
    pub fn query_sdf(&self, p: Vec3, smoothed: bool) -> Result<f64> {
        if smoothed {
            self.smoothed
                .as_ref()
                .expect("smoothed cache not refreshed")
                .interp1(p, true)
        } else {
            self.sdf.interp1(p, true)
        }
    }

    /// Scatter an SDF-query cotangent into `sink`. For raw queries the sink
    /// is the SDF gradient buffer; for smoothed queries it is the cotangent
    /// w.r.t. the smoothed grid, convolved back once per step by the caller.
    /// Interpolation weights depend only on geometry, so one scatter serves
    /// both cases.
    pub fn query_sdf_adjoint(&self, p: Vec3, cot: f64, sink: &mut [f64]) -> Result<()> {
        self.sdf.interp_adjoint(p, true, &[cot], sink)
    }

    /// Interpolated feature-grid vector at `p`.
    pub fn query_feat(&self, p: Vec3, out: &mut [f64]) -> Result<()> {
        self.feat.interp_into(p, true, out)
    }

    pub fn query_feat_adjoint(&self, p: Vec3, cot: &[f64], sink: &mut [f64]) -> Result<()> {
        self.feat.interp_adjoint(p, true, cot, sink)
    }

    /// The six axis neighbors of `p` at `level` (half-voxel units), clamped
    /// to the box: `x– = max(x - level*vs, min.x)`, `x+ = min(x + level*vs,
    /// max.x)`, likewise per axis.
    fn level_neighbors(&self, p: Vec3, level: f64) -> [(Vec3, Vec3); 3] {
        let bb = self.sdf.bbox();
        let d = level * self.voxel_size();
        let mut out = [(p, p); 3];
        for (axis, slot) in out.iter_mut().enumerate() {
            let mut lo = p;
            let mut hi = p;
            lo.set(axis, (p.get(axis) - d).max(bb.min.get(axis)));
            hi.set(axis, (p.get(axis) + d).min(bb.max.get(axis)));
            *slot = (lo, hi);
        }
        out
    }

    /// Multi-level geometry feature at `p`: per-level neighbor SDF values
    /// `[d0, dx-, dx+, dy-, dy+, dz-, dz+]...` followed by the per-level
    /// normals. Differences use the nominal spacing `2*level*vs` even when a
    /// neighbor was clamped at the box; the box is padded so the boundary
    /// region is free space.
    pub fn geo_feature(
        &self,
        p: Vec3,
        spec: &GeoFeatureSpec,
        smoothed: bool,
        out: &mut [f64],
    ) -> Result<()> {
        debug_assert_eq!(out.len(), spec.dim());
        let levels = spec.level_count();
        let mut off = 0;
        if spec.include_sdf {
            out[0] = self.query_sdf(p, smoothed)?;
            off = 1;
        }
        let normal_base = spec.sdf_dim();
        for li in 0..levels {
            let lv = 0.5 * (li + 1) as f64;
            let nb = self.level_neighbors(p, lv);
            let mut delta = Vec3::ZERO;
            for (axis, &(lo, hi)) in nb.iter().enumerate() {
                let dm = self.query_sdf(lo, smoothed)?;
                let dp = self.query_sdf(hi, smoothed)?;
                if spec.include_sdf {
                    out[off + 2 * axis] = dm;
                    out[off + 2 * axis + 1] = dp;
                }
                delta.set(axis, (dp - dm) / (2.0 * lv * self.voxel_size()));
            }
            if spec.include_sdf {
                off += 6;
            }
            if spec.include_normals {
                let n = delta.norm();
                // flat field: emit zero instead of dividing by ~0
                let nvec = if n < 1e-12 { Vec3::ZERO } else { delta / n };
                out[normal_base + 3 * li] = nvec.x;
                out[normal_base + 3 * li + 1] = nvec.y;
                out[normal_base + 3 * li + 2] = nvec.z;
            }
        }
        Ok(())
    }

    /// Adjoint of [`geo_feature`]: accumulates cotangents for every SDF
    /// query into `sink` (see [`query_sdf_adjoint`](Self::query_sdf_adjoint)
    /// for the sink semantics).
    pub fn geo_feature_adjoint(
        &self,
        p: Vec3,
        spec: &GeoFeatureSpec,
        smoothed: bool,
        cot: &[f64],
        sink: &mut [f64],
    ) -> Result<()> {
        debug_assert_eq!(cot.len(), spec.dim());
        let levels = spec.level_count();
        let mut off = 0;
        if spec.include_sdf {
            if cot[0] != 0.0 {
                self.query_sdf_adjoint(p, cot[0], sink)?;
            }
            off = 1;
        }
        let normal_base = spec.sdf_dim();
        for li in 0..levels {
            let lv = 0.5 * (li + 1) as f64;
            let nb = self.level_neighbors(p, lv);
            let spacing = 2.0 * lv * self.voxel_size();
            // direct value cotangents plus the normalize jacobian
            let mut d_delta = Vec3::ZERO;
            if spec.include_normals {
                let mut delta = Vec3::ZERO;
                for (axis, &(lo, hi)) in nb.iter().enumerate() {
                    let dm = self.query_sdf(lo, smoothed)?;
                    let dp = self.query_sdf(hi, smoothed)?;
                    delta.set(axis, (dp - dm) / spacing);
                }
                let nrm = delta.norm();
                if nrm >= 1e-12 {
                    let nv = delta / nrm;
                    let g = Vec3::new(
                        cot[normal_base + 3 * li],
                        cot[normal_base + 3 * li + 1],
                        cot[normal_base + 3 * li + 2],
                    );
                    // d(normalize)/d(delta) = (I - n n^T)/|delta|
                    d_delta = (g - nv * nv.dot(g)) / nrm;
                }
            }
            for (axis, &(lo, hi)) in nb.iter().enumerate() {
                let mut cm = 0.0;
                let mut cp = 0.0;
                if spec.include_sdf {
                    cm += cot[off + 2 * axis];
                    cp += cot[off + 2 * axis + 1];
                }
                let dd = d_delta.get(axis) / spacing;
                cm -= dd;
                cp += dd;
                if cm != 0.0 {
                    self.query_sdf_adjoint(lo, cm, sink)?;
                }
                if cp != 0.0 {
                    self.query_sdf_adjoint(hi, cp, sink)?;
                }
            }
            if spec.include_sdf {
                off += 6;
            }
        }
        Ok(())
    }
}

/// Layout of a color-network input vector; offsets of the optional blocks.
#[derive(Debug, Clone, Copy)]
pub struct ColorInputLayout {
    pub pe_pos: usize,
    pub pe_view: usize,
    pub geo: usize,
    pub feat: usize,
    pub prev_color: usize,
    pub total: usize,
}

impl ColorInputLayout {
    pub fn new(pos_freqs: usize, view_freqs: usize, geo_dim: usize, feat_dim: usize, prev_color: bool) -> Self {
        let pe_pos = pos_encode_dim(pos_freqs);
        let pe_view = pos_encode_dim(view_freqs);
        let prev = if prev_color { 3 } else { 0 };
        ColorInputLayout {
            pe_pos,
            pe_view,
            geo: geo_dim,
            feat: feat_dim,
            prev_color: prev,
            total: pe_pos + pe_view + geo_dim + feat_dim + prev,
        }
    }

    pub fn geo_range(&self) -> std::ops::Range<usize> {
        let s = self.pe_pos + self.pe_view;
        s..s + self.geo
    }

    pub fn feat_range(&self) -> std::ops::Range<usize> {
        let s = self.pe_pos + self.pe_view + self.geo;
        s..s + self.feat
    }

    pub fn prev_color_range(&self) -> std::ops::Range<usize> {
        let s = self.pe_pos + self.pe_view + self.geo + self.feat;
        s..s + self.prev_color
    }
}

/// Dual color network: `g0` is geometry-conditioned, `g1` adds the local
/// feature and predicts a residual on a detached copy of `g0`'s output.
#[derive(Debug, Clone)]
pub struct DualColor {
    pub g0: Mlp,
    pub g1: Mlp,
    pub layout0: ColorInputLayout,
    pub layout1: ColorInputLayout,
    /// Combine with a residual on top of `c0` (otherwise `g1` predicts the
    /// final color directly through a sigmoid head).
    pub residual: bool,
    /// Stop gradients on `c0` along both paths into the final color.
    pub detach: bool,
}

/// Forward artifacts of one dual-color evaluation, kept for backward.
#[derive(Debug, Clone, Default)]
pub struct DualColorEval {
    pub c0: Vec3,
    pub c: Vec3,
    pub c_pre: Vec3,
    pub cache0: MlpCache,
    pub cache1: MlpCache,
}

impl DualColor {
    pub fn new(
        pos_freqs: usize,
        view_freqs: usize,
        geo_dim: usize,
        feat_dim: usize,
        width: usize,
        layers: usize,
        residual: bool,
        detach: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let layout0 = ColorInputLayout::new(pos_freqs, view_freqs, geo_dim, 0, false);
        let layout1 = ColorInputLayout::new(pos_freqs, view_freqs, geo_dim, feat_dim, true);
        let mut dims0 = vec![layout0.total];
        let mut dims1 = vec![layout1.total];
        for _ in 0..layers.saturating_sub(1) {
            dims0.push(width);
            dims1.push(width);
        }
        dims0.push(3);
        dims1.push(3);
        let g0 = Mlp::new("g0", &dims0, Head::Sigmoid, rng);
        let g1 = Mlp::new(
            "g1",
            &dims1,
            if residual { Head::Linear } else { Head::Sigmoid },
            rng,
        );
        DualColor {
            g0,
            g1,
            layout0,
            layout1,
            residual,
            detach,
        }
    }

    /// Evaluate both networks. `in0`/`in1` are caller-assembled input
    /// buffers; the `c0` slots of `in1` are filled here.
    pub fn forward(&self, in0: &[f64], in1: &mut [f64], cache: bool) -> DualColorEval {
        let mut eval = DualColorEval::default();
        let mut c0 = [0.0; 3];
        self.g0.forward(
            in0,
            &mut c0,
            if cache { Some(&mut eval.cache0) } else { None },
        );
        eval.c0 = Vec3::new(c0[0], c0[1], c0[2]);
        in1[self.layout1.prev_color_range()].copy_from_slice(&c0);
        let mut out1 = [0.0; 3];
        self.g1.forward(
            in1,
            &mut out1,
            if cache { Some(&mut eval.cache1) } else { None },
        );
        let r = Vec3::new(out1[0], out1[1], out1[2]);
        if self.residual {
            eval.c_pre = eval.c0 + r;
            eval.c = Vec3::new(
                eval.c_pre.x.clamp(0.0, 1.0),
                eval.c_pre.y.clamp(0.0, 1.0),
                eval.c_pre.z.clamp(0.0, 1.0),
            );
        } else {
            eval.c_pre = r;
            eval.c = r;
        }
        eval
    }

    /// Backward from cotangents on the final color `c` and (separately) on
    /// `c0`, as produced by the two-term reconstruction loss. With `detach`
    /// set, no gradient reaches `g0` through `c`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        eval: &DualColorEval,
        d_c: Vec3,
        d_c0: Vec3,
        grads0: &mut MlpGrads,
        grads1: &mut MlpGrads,
        d_in0: &mut [f64],
        d_in1: &mut [f64],
    ) {
        // clamp pass-through mask
        let mask = |pre: f64| (pre > 0.0 && pre < 1.0) as u8 as f64;
        let d_cpre = if self.residual {
            Vec3::new(
                d_c.x * mask(eval.c_pre.x),
                d_c.y * mask(eval.c_pre.y),
                d_c.z * mask(eval.c_pre.z),
            )
        } else {
            d_c
        };
        self.g1.backward(
            &eval.cache1,
            &[d_cpre.x, d_cpre.y, d_cpre.z],
            grads1,
            d_in1,
        );
        let mut d_c0_total = d_c0;
        if !self.detach {
            // gradient through the residual base and through g1's c0 input
            if self.residual {
                d_c0_total += d_cpre;
            }
            let r = self.layout1.prev_color_range();
            d_c0_total += Vec3::new(d_in1[r.start], d_in1[r.start + 1], d_in1[r.start + 2]);
        }
        self.g0.backward(
            &eval.cache0,
            &[d_c0_total.x, d_c0_total.y, d_c0_total.z],
            grads0,
            d_in0,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Aabb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encode_l0_is_identity() {
        let mut out = [0.0; 3];
        pos_encode_into(Vec3::new(0.1, -0.2, 0.3), 0, &mut out);
        assert_eq!(out, [0.1, -0.2, 0.3]);
    }

    #[test]
    fn encode_dims_and_first_sine() {
        assert_eq!(pos_encode_dim(5), 33);
        let mut out = vec![0.0; pos_encode_dim(1)];
        pos_encode_into(Vec3::new(0.25, 0.0, 0.0), 1, &mut out);
        assert!((out[3] - (std::f64::consts::PI * 0.25).sin()).abs() < 1e-12);
        assert!((out[3] - 0.70711).abs() < 1e-5);
        assert!((out[6] - (std::f64::consts::PI * 0.25).cos()).abs() < 1e-12);
    }

    #[test]
    fn zero_output_layer_gives_mid_gray() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new("c", &[10, 16, 3], Head::Sigmoid, &mut rng);
        let input = vec![0.3; 10];
        let mut out = [0.0; 3];
        mlp.forward(&input, &mut out, None);
        for v in out {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn param_count_matches_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new("c", &[7, 16, 16, 3], Head::Sigmoid, &mut rng);
        assert_eq!(
            mlp.param_count(),
            7 * 16 + 16 + 16 * 16 + 16 + 16 * 3 + 3
        );
    }

    #[test]
    fn geo_feature_dims_follow_closed_form() {
        for (level, want) in [
            (0.0, 1),
            (0.5, 1 + 6 + 3),
            (1.0, 1 + 12 + 6),
            (1.5, 1 + 18 + 9),
            (2.0, 37),
            (2.5, 1 + 30 + 15),
            (3.0, 1 + 36 + 18),
        ] {
            let spec = GeoFeatureSpec {
                level,
                include_sdf: true,
                include_normals: level > 0.0,
            };
            assert_eq!(spec.dim(), want, "level {level}");
        }
    }

    fn sphere_field(dims: usize) -> SceneField {
        let bbox = Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0));
        let mut sdf = DenseGrid::zeros([dims; 3], 1, bbox).unwrap();
        for i in 0..dims {
            for j in 0..dims {
                for k in 0..dims {
                    let p = sdf.node_pos(i, j, k);
                    *sdf.at_mut(0, i, j, k) = p.norm() - 0.5;
                }
            }
        }
        let feat = DenseGrid::zeros([dims; 3], 1, bbox).unwrap();
        SceneField::new(sdf, feat, GaussianKernel::new(2, 0.8).unwrap())
    }

    #[test]
    fn level0_feature_is_center_value_only() {
        let field = sphere_field(16);
        let spec = GeoFeatureSpec {
            level: 0.0,
            include_sdf: true,
            include_normals: false,
        };
        assert_eq!(spec.dim(), 1);
        let p = Vec3::new(0.2, 0.1, -0.3);
        let mut out = [0.0];
        field.geo_feature(p, &spec, false, &mut out).unwrap();
        assert_eq!(out[0], field.query_sdf(p, false).unwrap());
    }

    #[test]
    fn linear_field_normals_and_values() {
        // SDF d(p) = z: every level normal must be (0,0,1) and neighbor
        // values must match the plane height at the clamped query points.
        let bbox = Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0));
        let mut sdf = DenseGrid::zeros([9; 3], 1, bbox).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                for k in 0..9 {
                    *sdf.at_mut(0, i, j, k) = sdf.node_pos(i, j, k).z;
                }
            }
        }
        let feat = DenseGrid::zeros([9; 3], 1, bbox).unwrap();
        let field = SceneField::new(sdf, feat, GaussianKernel::new(2, 0.8).unwrap());
        let spec = GeoFeatureSpec {
            level: 2.0,
            include_sdf: true,
            include_normals: true,
        };
        let p = Vec3::new(0.1, -0.2, 0.05);
        let mut out = vec![0.0; spec.dim()];
        field.geo_feature(p, &spec, false, &mut out).unwrap();
        let vs = field.voxel_size();
        for li in 0..4 {
            let lv = 0.5 * (li + 1) as f64;
            // z- and z+ neighbors move the plane height; x/y do not
            assert!((out[1 + 6 * li] - p.z).abs() < 1e-12, "x- level {lv}");
            assert!((out[2 + 6 * li] - p.z).abs() < 1e-12);
            assert!((out[3 + 6 * li] - p.z).abs() < 1e-12);
            assert!((out[4 + 6 * li] - p.z).abs() < 1e-12);
            assert!((out[5 + 6 * li] - (p.z - lv * vs)).abs() < 1e-12);
            assert!((out[6 + 6 * li] - (p.z + lv * vs)).abs() < 1e-12);
            let n = Vec3::new(out[25 + 3 * li], out[25 + 3 * li + 1], out[25 + 3 * li + 2]);
            assert!((n - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12, "level {lv}");
        }
    }

    #[test]
    fn sphere_normals_point_radially() {
        let field = sphere_field(64);
        let spec = GeoFeatureSpec {
            level: 2.0,
            include_sdf: true,
            include_normals: true,
        };
        let vs = field.voxel_size();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut out = vec![0.0; spec.dim()];
        let mut checked = 0;
        while checked < 1000 {
            let p = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if p.norm() < 1e-3 {
                continue;
            }
            // stay away from the box boundary
            if p.abs().max_component() > 1.0 - 2.0 * vs {
                continue;
            }
            field.geo_feature(p, &spec, false, &mut out).unwrap();
            let analytic = p.normalized();
            for li in 0..4 {
                let n = Vec3::new(out[25 + 3 * li], out[25 + 3 * li + 1], out[25 + 3 * li + 2]);
                let cos = n.dot(analytic);
                assert!(cos > 0.99, "p={p:?} level {li}: cos={cos}");
            }
            checked += 1;
        }
    }

    #[test]
    fn neighbor_clamping_never_leaves_box() {
        let field = sphere_field(16);
        let bb = field.sdf.bbox();
        let vs = field.voxel_size();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            // points deliberately hugging the boundary
            let p = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                1.0 - rng.gen_range(0.0..2.0 * vs),
            );
            for lv in [0.5, 1.0, 1.5, 2.0] {
                for (lo, hi) in field.level_neighbors(p, lv) {
                    assert!(bb.contains(lo), "lo {lo:?}");
                    assert!(bb.contains(hi), "hi {hi:?}");
                }
            }
        }
    }

    fn make_dual(detach: bool, rng: &mut ChaCha8Rng) -> (DualColor, GeoFeatureSpec) {
        let spec = GeoFeatureSpec {
            level: 1.0,
            include_sdf: true,
            include_normals: true,
        };
        let mut dual = DualColor::new(2, 1, spec.dim(), 4, 8, 3, true, detach, rng);
        // randomize the zero-initialized heads so gradients are generic
        for mlp in [&mut dual.g0, &mut dual.g1] {
            let last = mlp.layers.last_mut().unwrap();
            for w in &mut last.w {
                *w = rng.gen_range(-0.3..0.3);
            }
            for b in &mut last.b {
                *b = rng.gen_range(-0.1..0.1);
            }
        }
        (dual, spec)
    }

    #[test]
    fn zero_g1_passes_c0_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = GeoFeatureSpec {
            level: 1.0,
            include_sdf: true,
            include_normals: true,
        };
        let mut dual = DualColor::new(2, 1, spec.dim(), 4, 8, 3, true, true, &mut rng);
        for l in &mut dual.g1.layers {
            l.w.iter_mut().for_each(|w| *w = 0.0);
            l.b.iter_mut().for_each(|b| *b = 0.0);
        }
        let in0: Vec<f64> = (0..dual.layout0.total).map(|i| (i as f64).sin()).collect();
        let mut in1: Vec<f64> = (0..dual.layout1.total).map(|i| (i as f64).cos()).collect();
        let eval = dual.forward(&in0, &mut in1, false);
        assert_eq!(eval.c, eval.c0);
    }

    #[test]
    fn detach_blocks_g0_gradients_through_final_color() {
        let rng = ChaCha8Rng::seed_from_u64(22);
        for (detach, expect_zero) in [(true, true), (false, false)] {
            let (dual, _) = make_dual(detach, &mut rng.clone());
            let in0: Vec<f64> = (0..dual.layout0.total)
                .map(|i| 0.3 * (i as f64 + 1.0).sin())
                .collect();
            let mut in1: Vec<f64> = (0..dual.layout1.total)
                .map(|i| 0.3 * (i as f64 + 2.0).cos())
                .collect();
            let eval = dual.forward(&in0, &mut in1, true);
            let mut g0 = MlpGrads::zeros_like(&dual.g0);
            let mut g1 = MlpGrads::zeros_like(&dual.g1);
            let mut d_in0 = vec![0.0; dual.layout0.total];
            let mut d_in1 = vec![0.0; dual.layout1.total];
            // a scalar function of c only: L = sum(c); no direct c0 term
            dual.backward(
                &eval,
                Vec3::splat(1.0),
                Vec3::ZERO,
                &mut g0,
                &mut g1,
                &mut d_in0,
                &mut d_in1,
            );
            let g0_norm: f64 = g0.gw.iter().flatten().map(|g| g * g).sum();
            if expect_zero {
                assert_eq!(g0_norm, 0.0, "detach must block all g0 gradients");
            } else {
                assert!(g0_norm > 0.0, "without detach g0 must receive gradient");
            }
            // the direct c0 supervision path always reaches g0
            let mut g0b = MlpGrads::zeros_like(&dual.g0);
            let mut g1b = MlpGrads::zeros_like(&dual.g1);
            dual.backward(
                &eval,
                Vec3::ZERO,
                Vec3::splat(1.0),
                &mut g0b,
                &mut g1b,
                &mut d_in0,
                &mut d_in1,
            );
            let g0b_norm: f64 = g0b.gw.iter().flatten().map(|g| g * g).sum();
            assert!(g0b_norm > 0.0);
        }
    }
}
