//! Per-step forward/backward evaluation.
//!
//! Rays split into fixed-size chunks processed in parallel; each chunk
//! returns its own network-gradient buffers and a list of grid scatter
//! records. Chunks merge sequentially in chunk order, so results are
//! bit-identical for any thread count; only the chunk math itself runs
//! concurrently.

use super::{ColorModel, SdfPhase, SearchPhase, Stage, TrainConfig};
use crate::field::{pos_encode_into, DualColorEval, GeoFeatureSpec, MlpCache, MlpGrads, SceneField};
use crate::grid::{
    gaussian_smooth_adjoint, grid_gradient, grid_gradient_adjoint, smooth_loss, smooth_loss_adjoint,
    tv_loss, tv_loss_adjoint, DenseGrid,
};
use crate::math::Vec3;
use crate::optim::{adam_step, lr_schedule, ParamGroup};
use crate::render::{
    composite, composite_adjoint, density_alpha_grad, sample_points, sdf_alpha_grad, RayBatch,
    SSchedule,
};
use crate::{Error, Result};
use rayon::prelude::*;
use std::ops::Range;

const CHUNK_RAYS: usize = 32;

/// Per-step loss breakdown; the reported `loss` is exactly
/// `recon + tv + smooth`.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub loss: f64,
    pub recon: f64,
    pub tv: f64,
    pub smooth: f64,
    pub kappa: f64,
    pub psnr: f64,
}

pub(crate) fn stage_geo_spec(cfg: &TrainConfig, stage: Stage) -> GeoFeatureSpec {
    match stage {
        Stage::Coarse => GeoFeatureSpec {
            level: 0.5,
            include_sdf: false,
            include_normals: cfg.coarse_use_normal,
        },
        _ => GeoFeatureSpec {
            level: cfg.hier_level,
            include_sdf: cfg.geo_feature_sdf,
            include_normals: cfg.geo_feature_normals,
        },
    }
}

fn chunk_ranges(n: usize) -> Vec<Range<usize>> {
    (0..n)
        .step_by(CHUNK_RAYS)
        .map(|s| s..(s + CHUNK_RAYS).min(n))
        .collect()
}

fn par_map_chunks<T: Send, F>(pool: Option<&rayon::ThreadPool>, n: usize, f: F) -> Vec<T>
where
    F: Fn(Range<usize>) -> T + Sync,
{
    let ranges = chunk_ranges(n);
    match pool {
        Some(p) => p.install(|| ranges.into_par_iter().map(&f).collect()),
        None => ranges.into_iter().map(f).collect(),
    }
}

/// Grid-bound cotangents produced by a chunk, scattered during the merge.
#[derive(Default)]
struct ScatterList {
    /// SDF-value cotangents at sample points (opacity path).
    sdf_pts: Vec<Vec3>,
    sdf_cot: Vec<f64>,
    /// Geometry-feature cotangents, `geo_dim` entries per point.
    geo_pts: Vec<Vec3>,
    geo_cot: Vec<f64>,
    /// Feature-grid cotangents, `C` entries per point.
    feat_pts: Vec<Vec3>,
    feat_cot: Vec<f64>,
}

struct ChunkOut {
    /// Per-ray squared color errors (main and auxiliary predictions).
    sq: Vec<f64>,
    sq0: Vec<f64>,
    /// Per-ray auxiliary term: mask BCE in the SDF stages, the per-sample
    /// density prior in the search stage.
    aux: Vec<f64>,
    /// Second auxiliary: accumulated opacity of background rays (search).
    aux2: Vec<f64>,
    grads0: Option<MlpGrads>,
    grads1: Option<MlpGrads>,
    scatter: ScatterList,
    err: Option<Error>,
}

enum ColorEval {
    Single(MlpCache),
    Dual(DualColorEval),
}

/// Reusable per-ray buffers.
#[derive(Default)]
struct Scratch {
    f: Vec<f64>,
    positions: Vec<Vec3>,
    valid: Vec<bool>,
    alphas: Vec<f64>,
    dfi: Vec<f64>,
    dfn: Vec<f64>,
    colors: Vec<Vec3>,
    colors0: Vec<Vec3>,
    evals: Vec<Option<ColorEval>>,
    d_alphas: Vec<f64>,
    d_colors: Vec<Vec3>,
    d_colors0: Vec<Vec3>,
    df: Vec<f64>,
    e_p: Vec<f64>,
    e_v: Vec<f64>,
    geo: Vec<f64>,
    featv: Vec<f64>,
    input: Vec<f64>,
    in1: Vec<f64>,
    d_in0: Vec<f64>,
    d_in1: Vec<f64>,
}

struct SdfCtx<'a> {
    field: &'a SceneField,
    color: &'a ColorModel,
    occupancy: &'a DenseGrid,
    spec: GeoFeatureSpec,
    smoothed: bool,
    kappa: f64,
    step: f64,
    near: f64,
    far: f64,
    bg: Vec3,
    alpha_skip: f64,
    term_eps: f64,
    lambda0: f64,
    mask_weight: f64,
    inv_rays: f64,
}

struct RayForward {
    /// Effective sample count after early termination.
    m: usize,
    color: Vec3,
    color0: Vec3,
    acc: f64,
}

fn forward_sdf_ray(
    ctx: &SdfCtx<'_>,
    o: Vec3,
    d: Vec3,
    s: &mut Scratch,
    keep_caches: bool,
) -> Result<RayForward> {
    let samples = sample_points(
        o,
        d,
        ctx.field.sdf.bbox(),
        ctx.step,
        ctx.near,
        ctx.far,
        Some(ctx.occupancy),
    );
    let n = samples.t.len();
    s.f.clear();
    s.f.resize(n, f64::NAN);
    s.alphas.clear();
    s.alphas.resize(n, 0.0);
    s.dfi.clear();
    s.dfi.resize(n, 0.0);
    s.dfn.clear();
    s.dfn.resize(n, 0.0);
    s.colors.clear();
    s.colors.resize(n, Vec3::ZERO);
    s.colors0.clear();
    s.colors0.resize(n, Vec3::ZERO);
    s.evals.clear();
    s.evals.resize_with(n, || None);
    // positions kept for the backward scatter
    s.positions.clear();
    s.positions.extend_from_slice(&samples.pos);
    s.valid.clear();
    s.valid.extend_from_slice(&samples.valid);

    if n == 0 {
        return Ok(RayForward {
            m: 0,
            color: ctx.bg,
            color0: ctx.bg,
            acc: 0.0,
        });
    }

    // opacity sweep with early termination
    let mut transmittance = 1.0;
    let mut m = n;
    for i in 0..n {
        if samples.valid[i] && s.f[i].is_nan() {
            s.f[i] = ctx.field.query_sdf(samples.pos[i], ctx.smoothed)?;
        }
        if i + 1 < n && samples.valid[i] && samples.valid[i + 1] {
            if s.f[i + 1].is_nan() {
                s.f[i + 1] = ctx.field.query_sdf(samples.pos[i + 1], ctx.smoothed)?;
            }
            let (a, dfi, dfn) = sdf_alpha_grad(s.f[i], s.f[i + 1], ctx.kappa);
            s.alphas[i] = a;
            s.dfi[i] = dfi;
            s.dfn[i] = dfn;
        }
        transmittance *= 1.0 - s.alphas[i];
        if transmittance < ctx.term_eps {
            m = i + 1;
            break;
        }
    }

    // colors where opacity warrants a network evaluation
    pos_encode_view(ctx, d, s);
    for i in 0..m {
        if s.alphas[i] > ctx.alpha_skip {
            let (c, c0, eval) = eval_color(ctx, samples.pos[i], s, keep_caches)?;
            s.colors[i] = c;
            s.colors0[i] = c0;
            s.evals[i] = eval;
        }
    }
    let comp = composite(&s.alphas[..m], &s.colors[..m], ctx.bg);
    let comp0 = if matches!(ctx.color, ColorModel::Dual(_)) {
        composite(&s.alphas[..m], &s.colors0[..m], ctx.bg)
    } else {
        comp.clone()
    };
    Ok(RayForward {
        m,
        color: comp.color,
        color0: comp0.color,
        acc: comp.acc,
    })
}

fn pos_encode_view(ctx: &SdfCtx<'_>, d: Vec3, s: &mut Scratch) {
    let (lp, lv) = layout_freqs(ctx.color);
    s.e_p.resize(crate::field::pos_encode_dim(lp), 0.0);
    s.e_v.resize(crate::field::pos_encode_dim(lv), 0.0);
    pos_encode_into(d, lv, &mut s.e_v);
}

fn layout_freqs(color: &ColorModel) -> (usize, usize) {
    // frequencies are baked into the layouts at construction
    match color {
        ColorModel::Single { layout, .. } => (
            (layout.pe_pos - 3) / 6,
            (layout.pe_view - 3) / 6,
        ),
        ColorModel::Dual(d) => ((d.layout0.pe_pos - 3) / 6, (d.layout0.pe_view - 3) / 6),
    }
}

fn eval_color(
    ctx: &SdfCtx<'_>,
    p: Vec3,
    s: &mut Scratch,
    keep_caches: bool,
) -> Result<(Vec3, Vec3, Option<ColorEval>)> {
    let (lp, _) = layout_freqs(ctx.color);
    pos_encode_into(p, lp, &mut s.e_p);
    let geo_dim = ctx.spec.dim();
    s.geo.resize(geo_dim, 0.0);
    if geo_dim > 0 {
        ctx.field.geo_feature(p, &ctx.spec, ctx.smoothed, &mut s.geo)?;
    }
    match ctx.color {
        ColorModel::Single {
            mlp,
            layout,
            use_feat,
        } => {
            s.input.resize(layout.total, 0.0);
            s.input[..layout.pe_pos].copy_from_slice(&s.e_p);
            s.input[layout.pe_pos..layout.pe_pos + layout.pe_view].copy_from_slice(&s.e_v);
            s.input[layout.geo_range()].copy_from_slice(&s.geo);
            if *use_feat && layout.feat > 0 {
                s.featv.resize(layout.feat, 0.0);
                ctx.field.query_feat(p, &mut s.featv)?;
                s.input[layout.feat_range()].copy_from_slice(&s.featv);
            }
            let mut out = [0.0; 3];
            let mut cache = MlpCache::default();
            mlp.forward(
                &s.input,
                &mut out,
                if keep_caches { Some(&mut cache) } else { None },
            );
            let c = Vec3::new(out[0], out[1], out[2]);
            Ok((
                c,
                c,
                keep_caches.then_some(ColorEval::Single(cache)),
            ))
        }
        ColorModel::Dual(dual) => {
            let l0 = &dual.layout0;
            let l1 = &dual.layout1;
            s.input.resize(l0.total, 0.0);
            s.input[..l0.pe_pos].copy_from_slice(&s.e_p);
            s.input[l0.pe_pos..l0.pe_pos + l0.pe_view].copy_from_slice(&s.e_v);
            s.input[l0.geo_range()].copy_from_slice(&s.geo);
            s.in1.resize(l1.total, 0.0);
            s.in1[..l1.pe_pos].copy_from_slice(&s.e_p);
            s.in1[l1.pe_pos..l1.pe_pos + l1.pe_view].copy_from_slice(&s.e_v);
            s.in1[l1.geo_range()].copy_from_slice(&s.geo);
            s.featv.resize(l1.feat, 0.0);
            ctx.field.query_feat(p, &mut s.featv)?;
            s.in1[l1.feat_range()].copy_from_slice(&s.featv);
            let eval = dual.forward(&s.input, &mut s.in1, keep_caches);
            let (c, c0) = (eval.c, eval.c0);
            Ok((c, c0, keep_caches.then_some(ColorEval::Dual(eval))))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_sdf_ray(
    ctx: &SdfCtx<'_>,
    fwd: &RayForward,
    gt: Vec3,
    mask: Option<f64>,
    s: &mut Scratch,
    out: &mut ChunkOut,
) {
    let m = fwd.m;
    let n = s.alphas.len();
    if n == 0 {
        return;
    }
    let d_color = (fwd.color - gt) * (2.0 * ctx.inv_rays);
    let mut d_acc = 0.0;
    if let Some(mv) = mask {
        if ctx.mask_weight > 0.0 {
            let eps = 1e-6;
            // d/dacc of -(m ln(acc+eps) + (1-m) ln(1-acc+eps))
            d_acc = ctx.mask_weight
                * ctx.inv_rays
                * (-mv / (fwd.acc + eps) + (1.0 - mv) / (1.0 - fwd.acc + eps));
        }
    }
    s.d_alphas.clear();
    s.d_alphas.resize(m, 0.0);
    s.d_colors.clear();
    s.d_colors.resize(m, Vec3::ZERO);
    s.d_colors0.clear();
    s.d_colors0.resize(m, Vec3::ZERO);
    composite_adjoint(
        &s.alphas[..m],
        &s.colors[..m],
        ctx.bg,
        d_color,
        d_acc,
        &mut s.d_alphas,
        &mut s.d_colors,
    );
    let dual = matches!(ctx.color, ColorModel::Dual(_));
    if dual {
        let d_color0 = (fwd.color0 - gt) * (2.0 * ctx.lambda0 * ctx.inv_rays);
        composite_adjoint(
            &s.alphas[..m],
            &s.colors0[..m],
            ctx.bg,
            d_color0,
            0.0,
            &mut s.d_alphas,
            &mut s.d_colors0,
        );
    }
    // opacity path into SDF values
    s.df.clear();
    s.df.resize(n, 0.0);
    for i in 0..m {
        if s.alphas[i] > 0.0 {
            s.df[i] += s.d_alphas[i] * s.dfi[i];
            s.df[i + 1] += s.d_alphas[i] * s.dfn[i];
        }
    }
    for i in 0..n {
        if s.df[i] != 0.0 {
            out.scatter.sdf_pts.push(s.positions[i]);
            out.scatter.sdf_cot.push(s.df[i]);
        }
    }
    // color paths
    let geo_dim = ctx.spec.dim();
    for i in 0..m {
        let Some(eval) = s.evals[i].take() else {
            continue;
        };
        let p = s.positions[i];
        match (&eval, ctx.color) {
            (ColorEval::Single(cache), ColorModel::Single { mlp, layout, use_feat }) => {
                let dc = s.d_colors[i];
                s.d_in0.resize(layout.total, 0.0);
                let grads = out.grads0.as_mut().expect("single grads");
                mlp.backward(cache, &[dc.x, dc.y, dc.z], grads, &mut s.d_in0);
                if geo_dim > 0 {
                    out.scatter.geo_pts.push(p);
                    out.scatter.geo_cot.extend_from_slice(&s.d_in0[layout.geo_range()]);
                }
                if *use_feat && layout.feat > 0 {
                    out.scatter.feat_pts.push(p);
                    out.scatter
                        .feat_cot
                        .extend_from_slice(&s.d_in0[layout.feat_range()]);
                }
            }
            (ColorEval::Dual(ev), ColorModel::Dual(dual)) => {
                let dc = s.d_colors[i];
                let dc0 = s.d_colors0[i];
                s.d_in0.resize(dual.layout0.total, 0.0);
                s.d_in1.resize(dual.layout1.total, 0.0);
                let g0 = out.grads0.as_mut().expect("g0 grads");
                let g1 = out.grads1.as_mut().expect("g1 grads");
                dual.backward(ev, dc, dc0, g0, g1, &mut s.d_in0, &mut s.d_in1);
                if geo_dim > 0 {
                    let r0 = dual.layout0.geo_range();
                    let r1 = dual.layout1.geo_range();
                    out.scatter.geo_pts.push(p);
                    let base = out.scatter.geo_cot.len();
                    out.scatter.geo_cot.extend_from_slice(&s.d_in0[r0]);
                    for (slot, v) in out.scatter.geo_cot[base..].iter_mut().zip(&s.d_in1[r1]) {
                        *slot += v;
                    }
                }
                out.scatter.feat_pts.push(p);
                out.scatter
                    .feat_cot
                    .extend_from_slice(&s.d_in1[dual.layout1.feat_range()]);
            }
            _ => unreachable!("eval kind matches color model"),
        }
    }
}

fn bce(acc: f64, mask: f64) -> f64 {
    let eps = 1e-6;
    -(mask * (acc + eps).ln() + (1.0 - mask) * (1.0 - acc + eps).ln())
}

/// One optimization step of the coarse or fine stage.
pub(crate) fn sdf_step(
    phase: &mut SdfPhase,
    stage: Stage,
    batch: &RayBatch,
    cfg: &TrainConfig,
    iter: u64,
    total_iters: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<StepMetrics> {
    let schedule = match stage {
        Stage::Coarse => SSchedule {
            s_start: cfg.stage1_s_start,
            speed: cfg.stage1_s_speed,
        },
        _ => SSchedule {
            s_start: cfg.stage2_s_start,
            speed: cfg.stage2_s_speed,
        },
    };
    let kappa = schedule.kappa(iter);
    // zero-ray batches advance the iteration and change nothing else
    if batch.is_empty() {
        return Ok(StepMetrics {
            loss: 0.0,
            recon: 0.0,
            tv: 0.0,
            smooth: 0.0,
            kappa,
            psnr: 99.0,
        });
    }
    let smoothed = match stage {
        Stage::Coarse => cfg.smoothed_queries_stage1,
        _ => cfg.smoothed_queries_stage2,
    };
    let SdfPhase {
        field,
        color,
        occupancy,
        adam,
        sdf_grad,
        feat_grad,
        ..
    } = phase;
    if smoothed {
        field.refresh_smoothed();
    } else {
        field.drop_smoothed();
    }
    sdf_grad.iter_mut().for_each(|g| *g = 0.0);
    feat_grad.iter_mut().for_each(|g| *g = 0.0);
    color.zero_grads();

    let spec = stage_geo_spec(cfg, stage);
    let n_rays = batch.len();
    let ctx = SdfCtx {
        field,
        color,
        occupancy,
        spec,
        smoothed,
        kappa,
        step: field.voxel_size() * cfg.step_ratio,
        near: batch.near,
        far: batch.far,
        bg: Vec3::new(cfg.background[0], cfg.background[1], cfg.background[2]),
        alpha_skip: cfg.alpha_skip,
        term_eps: cfg.term_eps,
        lambda0: cfg.lambda0,
        mask_weight: cfg.mask_loss_weight,
        inv_rays: 1.0 / n_rays as f64,
    };

    let dual = matches!(color, ColorModel::Dual(_));
    let outs = par_map_chunks(pool, n_rays, |range| {
        let mut out = ChunkOut {
            sq: Vec::with_capacity(range.len()),
            sq0: Vec::with_capacity(range.len()),
            aux: Vec::with_capacity(range.len()),
            aux2: Vec::new(),
            grads0: Some(match ctx.color {
                ColorModel::Single { mlp, .. } => MlpGrads::zeros_like(mlp),
                ColorModel::Dual(d) => MlpGrads::zeros_like(&d.g0),
            }),
            grads1: match ctx.color {
                ColorModel::Dual(d) => Some(MlpGrads::zeros_like(&d.g1)),
                _ => None,
            },
            scatter: ScatterList::default(),
            err: None,
        };
        let mut scratch = Scratch::default();
        for ri in range {
            let gt = batch.gt_colors[ri];
            let mask = batch.gt_masks.as_ref().map(|m| m[ri]);
            match forward_sdf_ray(&ctx, batch.origins[ri], batch.dirs[ri], &mut scratch, true) {
                Ok(fwd) => {
                    let d = fwd.color - gt;
                    out.sq.push(d.dot(d));
                    let d0 = fwd.color0 - gt;
                    out.sq0.push(if dual { d0.dot(d0) } else { 0.0 });
                    out.aux.push(match mask {
                        Some(mv) if ctx.mask_weight > 0.0 => bce(fwd.acc, mv),
                        _ => 0.0,
                    });
                    backward_sdf_ray(&ctx, &fwd, gt, mask, &mut scratch, &mut out);
                }
                Err(e) => {
                    out.err = Some(e);
                    break;
                }
            }
        }
        out
    });

    // sequential merge in chunk order
    let mut smoothed_cot = if smoothed {
        vec![0.0; field.sdf.len()]
    } else {
        Vec::new()
    };
    let mut sq_sum = 0.0;
    let mut sq0_sum = 0.0;
    let mut bce_sum = 0.0;
    for mut out in outs {
        if let Some(e) = out.err.take() {
            return Err(e);
        }
        for v in &out.sq {
            sq_sum += v;
        }
        for v in &out.sq0 {
            sq0_sum += v;
        }
        for v in &out.aux {
            bce_sum += v;
        }
        match color {
            ColorModel::Single { mlp, .. } => out.grads0.unwrap().merge_into(mlp),
            ColorModel::Dual(d) => {
                out.grads0.unwrap().merge_into(&mut d.g0);
                out.grads1.unwrap().merge_into(&mut d.g1);
            }
        }
        let sdf_sink: &mut [f64] = if smoothed {
            &mut smoothed_cot
        } else {
            sdf_grad
        };
        for (p, cot) in out.scatter.sdf_pts.iter().zip(&out.scatter.sdf_cot) {
            field.sdf.interp_adjoint(*p, true, &[*cot], sdf_sink)?;
        }
        let geo_dim = spec.dim();
        for (pi, p) in out.scatter.geo_pts.iter().enumerate() {
            let cot = &out.scatter.geo_cot[pi * geo_dim..(pi + 1) * geo_dim];
            field.geo_feature_adjoint(*p, &spec, smoothed, cot, sdf_sink)?;
        }
        let fc = field.feat.channels();
        for (pi, p) in out.scatter.feat_pts.iter().enumerate() {
            let cot = &out.scatter.feat_cot[pi * fc..(pi + 1) * fc];
            field.feat.interp_adjoint(*p, true, cot, feat_grad)?;
        }
    }
    if smoothed {
        gaussian_smooth_adjoint(&field.sdf, &field.kernel, &smoothed_cot, sdf_grad);
    }

    let inv = 1.0 / n_rays as f64;
    let recon_color = (sq_sum + cfg.lambda0 * if dual { sq0_sum } else { 0.0 }) * inv;
    let mask_term = cfg.mask_loss_weight * bce_sum * inv;
    let recon = recon_color + mask_term;

    // regularizers
    let (lambda_tv, lambda_smooth, lambda_tv_feat) = match stage {
        Stage::Coarse => (
            cfg.stage1_lambda_tv,
            cfg.stage1_lambda_smooth,
            cfg.stage1_lambda_tv_feat,
        ),
        _ => (cfg.stage2_lambda_tv, cfg.stage2_lambda_smooth, 0.0),
    };
    let mut tv_term = 0.0;
    if lambda_tv > 0.0 {
        let (t, _) = tv_loss(&field.sdf, cfg.tv_eps);
        tv_term += lambda_tv * t;
        tv_loss_adjoint(&field.sdf, cfg.tv_eps, lambda_tv, sdf_grad);
    }
    if lambda_tv_feat > 0.0 {
        let (t, _) = tv_loss(&field.feat, cfg.tv_eps);
        tv_term += lambda_tv_feat * t;
        tv_loss_adjoint(&field.feat, cfg.tv_eps, lambda_tv_feat, feat_grad);
    }
    let mut smooth_term = 0.0;
    if lambda_smooth > 0.0 {
        let ggrid = grid_gradient(&field.sdf)?;
        smooth_term = lambda_smooth * smooth_loss(&ggrid, &field.kernel);
        let mut cot = vec![0.0; ggrid.len()];
        smooth_loss_adjoint(&ggrid, &field.kernel, lambda_smooth, &mut cot);
        let cot_grid = DenseGrid::from_values(ggrid.dims(), 3, ggrid.bbox(), cot)?;
        grid_gradient_adjoint(&field.sdf, &cot_grid, sdf_grad);
    }

    for (name, v) in [
        ("recon", recon),
        ("tv", tv_term),
        ("smooth", smooth_term),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name.into()));
        }
    }
    let loss = recon + tv_term + smooth_term;

    // optimizer
    let (lr_sdf, lr_feat) = match stage {
        Stage::Coarse => (cfg.lr_grid_coarse, cfg.lr_grid_coarse),
        _ => (cfg.lr_sdf_fine, cfg.lr_feat_fine),
    };
    let mut groups = vec![
        ParamGroup {
            name: "sdf_grid",
            lr: lr_sdf,
            values: &mut field.sdf.values,
            grad: sdf_grad,
        },
        ParamGroup {
            name: "feat_grid",
            lr: lr_feat,
            values: &mut field.feat.values,
            grad: feat_grad,
        },
    ];
    match color {
        ColorModel::Single { mlp, .. } => groups.extend(mlp.param_groups(cfg.lr_mlp)),
        ColorModel::Dual(d) => {
            groups.extend(d.g0.param_groups(cfg.lr_mlp));
            groups.extend(d.g1.param_groups(cfg.lr_mlp));
        }
    }
    let lr_scale = lr_schedule(1.0, iter, total_iters, cfg.lr_decay);
    adam_step(&mut groups, adam, lr_scale, cfg.weight_decay, cfg.grad_clip)?;

    let mse = sq_sum * inv / 3.0;
    let psnr = if mse < 1e-10 {
        99.0
    } else {
        10.0 * (1.0 / mse).log10()
    };
    Ok(StepMetrics {
        loss,
        recon,
        tv: tv_term,
        smooth: smooth_term,
        kappa,
        psnr,
    })
}

// ---------------------------------------------------------------------------
// Search phase
// ---------------------------------------------------------------------------

struct SearchCtx<'a> {
    density: &'a DenseGrid,
    feat: &'a DenseGrid,
    mlp: &'a crate::field::Mlp,
    layout: &'a crate::field::ColorInputLayout,
    shift: f64,
    step: f64,
    near: f64,
    far: f64,
    bg: Vec3,
    alpha_skip: f64,
    term_eps: f64,
    inv_rays: f64,
    sparsity_weight: f64,
    empty_weight: f64,
}

/// One optimization step of the density search phase.
pub(crate) fn search_step(
    phase: &mut SearchPhase,
    batch: &RayBatch,
    cfg: &TrainConfig,
    iter: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Ok(StepMetrics {
            loss: 0.0,
            recon: 0.0,
            tv: 0.0,
            smooth: 0.0,
            kappa: 0.0,
            psnr: 99.0,
        });
    }
    let SearchPhase {
        density,
        feat,
        mlp,
        layout,
        shift,
        adam,
        density_grad,
        feat_grad,
    } = phase;
    density_grad.iter_mut().for_each(|g| *g = 0.0);
    feat_grad.iter_mut().for_each(|g| *g = 0.0);
    for l in &mut mlp.layers {
        l.gw.iter_mut().for_each(|g| *g = 0.0);
        l.gb.iter_mut().for_each(|g| *g = 0.0);
    }
    let n_rays = batch.len();
    let ctx = SearchCtx {
        density,
        feat,
        mlp,
        layout,
        shift: *shift,
        step: density.voxel_size() * cfg.step_ratio,
        near: batch.near,
        far: batch.far,
        bg: Vec3::new(cfg.background[0], cfg.background[1], cfg.background[2]),
        alpha_skip: cfg.alpha_skip,
        term_eps: cfg.term_eps,
        inv_rays: 1.0 / n_rays as f64,
        sparsity_weight: cfg.search_sparsity_weight,
        empty_weight: cfg.search_empty_weight,
    };

    let lp = (layout.pe_pos - 3) / 6;
    let lv = (layout.pe_view - 3) / 6;
    let outs = par_map_chunks(pool, n_rays, |range| {
        let mut out = ChunkOut {
            sq: Vec::with_capacity(range.len()),
            sq0: Vec::new(),
            aux: Vec::new(),
            aux2: Vec::new(),
            grads0: Some(MlpGrads::zeros_like(ctx.mlp)),
            grads1: None,
            scatter: ScatterList::default(),
            err: None,
        };
        let mut s = Scratch::default();
        for ri in range {
            let o = batch.origins[ri];
            let d = batch.dirs[ri];
            let gt = batch.gt_colors[ri];
            let mask = batch.gt_masks.as_ref().map(|m| m[ri]);
            if let Err(e) = search_ray(&ctx, lp, lv, o, d, gt, mask, &mut s, &mut out) {
                out.err = Some(e);
                break;
            }
        }
        out
    });

    let mut sq_sum = 0.0;
    let mut aux_sum = 0.0;
    let mut empty_sum = 0.0;
    for mut out in outs {
        if let Some(e) = out.err.take() {
            return Err(e);
        }
        for v in &out.sq {
            sq_sum += v;
        }
        for v in &out.aux {
            aux_sum += v;
        }
        for v in &out.aux2 {
            empty_sum += v;
        }
        out.grads0.unwrap().merge_into(mlp);
        for (p, cot) in out.scatter.sdf_pts.iter().zip(&out.scatter.sdf_cot) {
            density.interp_adjoint(*p, true, &[*cot], density_grad)?;
        }
        let fc = feat.channels();
        for (pi, p) in out.scatter.feat_pts.iter().enumerate() {
            let cot = &out.scatter.feat_cot[pi * fc..(pi + 1) * fc];
            feat.interp_adjoint(*p, true, cot, feat_grad)?;
        }
    }

    let sparsity = (cfg.search_sparsity_weight * aux_sum
        + cfg.search_empty_weight * empty_sum)
        / n_rays as f64;
    let recon = sq_sum / n_rays as f64;
    for (name, v) in [("recon", recon), ("sparsity", sparsity)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name.into()));
        }
    }
    // the density priors report through the regularizer slot
    let loss = recon + sparsity;

    let mut groups = vec![
        ParamGroup {
            name: "density_grid",
            lr: cfg.lr_grid_coarse,
            values: &mut density.values,
            grad: density_grad,
        },
        ParamGroup {
            name: "feat_grid",
            lr: cfg.lr_grid_coarse,
            values: &mut feat.values,
            grad: feat_grad,
        },
    ];
    groups.extend(mlp.param_groups(cfg.lr_mlp));
    let lr_scale = lr_schedule(1.0, iter, cfg.iters_search, cfg.lr_decay);
    adam_step(&mut groups, adam, lr_scale, cfg.weight_decay, cfg.grad_clip)?;

    let mse = recon / 3.0;
    let psnr = if mse < 1e-10 {
        99.0
    } else {
        10.0 * (1.0 / mse).log10()
    };
    Ok(StepMetrics {
        loss,
        recon,
        tv: sparsity,
        smooth: 0.0,
        kappa: 0.0,
        psnr,
    })
}

#[allow(clippy::too_many_arguments)]
fn search_ray(
    ctx: &SearchCtx<'_>,
    lp: usize,
    lv: usize,
    o: Vec3,
    d: Vec3,
    gt: Vec3,
    mask: Option<f64>,
    s: &mut Scratch,
    out: &mut ChunkOut,
) -> Result<()> {
    // a ray is background when the mask says so, or (mask-free) when its
    // target color is indistinguishable from the background
    let is_bg = match mask {
        Some(mv) => mv < 0.5,
        None => (gt - ctx.bg).abs().max_component() < 0.02,
    };
    let samples = sample_points(o, d, ctx.density.bbox(), ctx.step, ctx.near, ctx.far, None);
    let n = samples.t.len();
    s.alphas.clear();
    s.alphas.resize(n, 0.0);
    s.dfi.clear();
    s.dfi.resize(n, 0.0);
    s.colors.clear();
    s.colors.resize(n, Vec3::ZERO);
    s.evals.clear();
    s.evals.resize_with(n, || None);
    s.positions.clear();
    s.positions.extend_from_slice(&samples.pos);
    if n == 0 {
        let diff = ctx.bg - gt;
        out.sq.push(diff.dot(diff));
        out.aux.push(0.0);
        out.aux2.push(0.0);
        return Ok(());
    }
    s.f.clear();
    s.f.resize(n, 0.0);
    let mut transmittance = 1.0;
    let mut m = n;
    for i in 0..n {
        let sigma = ctx.density.interp1(samples.pos[i], true)?;
        s.f[i] = sigma;
        let (a, da) = density_alpha_grad(sigma, ctx.step, ctx.shift);
        s.alphas[i] = a;
        s.dfi[i] = da;
        transmittance *= 1.0 - a;
        if transmittance < ctx.term_eps {
            m = i + 1;
            break;
        }
    }
    s.e_v.resize(crate::field::pos_encode_dim(lv), 0.0);
    pos_encode_into(d, lv, &mut s.e_v);
    s.e_p.resize(crate::field::pos_encode_dim(lp), 0.0);
    for i in 0..m {
        if s.alphas[i] > ctx.alpha_skip {
            let p = samples.pos[i];
            pos_encode_into(p, lp, &mut s.e_p);
            s.input.resize(ctx.layout.total, 0.0);
            s.input[..ctx.layout.pe_pos].copy_from_slice(&s.e_p);
            s.input[ctx.layout.pe_pos..ctx.layout.pe_pos + ctx.layout.pe_view]
                .copy_from_slice(&s.e_v);
            s.featv.resize(ctx.layout.feat, 0.0);
            ctx.feat.interp_into(p, true, &mut s.featv)?;
            s.input[ctx.layout.feat_range()].copy_from_slice(&s.featv);
            let mut c = [0.0; 3];
            let mut cache = MlpCache::default();
            ctx.mlp.forward(&s.input, &mut c, Some(&mut cache));
            s.colors[i] = Vec3::new(c[0], c[1], c[2]);
            s.evals[i] = Some(ColorEval::Single(cache));
        }
    }
    let comp = composite(&s.alphas[..m], &s.colors[..m], ctx.bg);
    let diff = comp.color - gt;
    out.sq.push(diff.dot(diff));
    // per-sample density prior: mean softplus over this ray's samples; it
    // clears fog the photometric term has no opinion about (black on black)
    let mut sparsity = 0.0;
    let sp_scale = ctx.sparsity_weight * ctx.inv_rays / m as f64;
    if ctx.sparsity_weight > 0.0 {
        for i in 0..m {
            sparsity += softplus(s.f[i] + ctx.shift);
        }
        sparsity /= m as f64;
    }
    out.aux.push(sparsity);
    // one-sided emptiness prior: background rays should carry no opacity at
    // all, not merely render the background color; this is what removes
    // view-dependent floaters that paint themselves black
    let mut d_acc = 0.0;
    if is_bg && ctx.empty_weight > 0.0 {
        out.aux2.push(comp.acc);
        d_acc = ctx.empty_weight * ctx.inv_rays;
    } else {
        out.aux2.push(0.0);
    }

    // backward
    let d_color = diff * (2.0 * ctx.inv_rays);
    s.d_alphas.clear();
    s.d_alphas.resize(m, 0.0);
    s.d_colors.clear();
    s.d_colors.resize(m, Vec3::ZERO);
    composite_adjoint(
        &s.alphas[..m],
        &s.colors[..m],
        ctx.bg,
        d_color,
        d_acc,
        &mut s.d_alphas,
        &mut s.d_colors,
    );
    for i in 0..m {
        let mut d_sigma = s.d_alphas[i] * s.dfi[i];
        if ctx.sparsity_weight > 0.0 {
            d_sigma += sp_scale * sigmoid(s.f[i] + ctx.shift);
        }
        if d_sigma != 0.0 {
            out.scatter.sdf_pts.push(s.positions[i]);
            out.scatter.sdf_cot.push(d_sigma);
        }
        if let Some(ColorEval::Single(cache)) = s.evals[i].take() {
            let dc = s.d_colors[i];
            s.d_in0.resize(ctx.layout.total, 0.0);
            let grads = out.grads0.as_mut().expect("search grads");
            ctx.mlp
                .backward(&cache, &[dc.x, dc.y, dc.z], grads, &mut s.d_in0);
            out.scatter.feat_pts.push(s.positions[i]);
            out.scatter
                .feat_cot
                .extend_from_slice(&s.d_in0[ctx.layout.feat_range()]);
        }
    }
    Ok(())
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

/// Forward-only batch rendering through a trained SDF model.
#[allow(clippy::too_many_arguments)]
pub fn render_rays(
    field: &SceneField,
    color: &ColorModel,
    occupancy: &DenseGrid,
    cfg: &TrainConfig,
    spec: GeoFeatureSpec,
    smoothed: bool,
    kappa: f64,
    near: f64,
    far: f64,
    origins: &[Vec3],
    dirs: &[Vec3],
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<Vec3>> {
    let ctx = SdfCtx {
        field,
        color,
        occupancy,
        spec,
        smoothed,
        kappa,
        step: field.voxel_size() * cfg.step_ratio,
        near,
        far,
        bg: Vec3::new(cfg.background[0], cfg.background[1], cfg.background[2]),
        alpha_skip: cfg.alpha_skip,
        term_eps: cfg.term_eps,
        lambda0: cfg.lambda0,
        mask_weight: 0.0,
        inv_rays: 1.0,
    };
    let chunks = par_map_chunks(pool, origins.len(), |range| {
        let mut s = Scratch::default();
        let mut colors = Vec::with_capacity(range.len());
        let mut err = None;
        for ri in range {
            match forward_sdf_ray(&ctx, origins[ri], dirs[ri], &mut s, false) {
                Ok(fwd) => colors.push(fwd.color),
                Err(e) => {
                    err = Some(e);
                    break;
                }
            }
        }
        (colors, err)
    });
    let mut out = Vec::with_capacity(origins.len());
    for (colors, err) in chunks {
        if let Some(e) = err {
            return Err(e);
        }
        out.extend(colors);
    }
    Ok(out)
}
