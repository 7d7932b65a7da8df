//! Shared helpers for the integration and acceptance suites: the central
//! finite-difference harness and tiny scene builders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxurf::dataio::{make_synthetic, SyntheticConfig, SyntheticScene};
use voxurf::grid::DenseGrid;
use voxurf::math::{Aabb, Vec3};

/// Step size for central differences: cbrt(machine eps) scaled to the value.
pub fn fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

/// Central finite difference of a scalar function at `x0`.
pub fn central_diff(f: impl FnMut(f64) -> f64, x0: f64) -> f64 {
    central_diff_scaled(f, x0, 1.0)
}

/// Central difference with the step scaled by `scale` (for kink detection).
pub fn central_diff_scaled(mut f: impl FnMut(f64) -> f64, x0: f64, scale: f64) -> f64 {
    let h = fd_step(x0) * scale;
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// Relative error with an absolute floor of 1.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Check one analytic derivative against central differences.
pub fn assert_grad(name: &str, analytic: f64, fd: f64, tol: f64) {
    let e = rel_err(analytic, fd);
    assert!(
        e <= tol,
        "{name}: analytic {analytic:.10e} vs fd {fd:.10e} (rel err {e:.3e})"
    );
}

pub fn unit_box() -> Aabb {
    Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0))
}

/// Random grid with values in [-1, 1).
pub fn random_grid(rng: &mut ChaCha8Rng, dims: [usize; 3], channels: usize) -> DenseGrid {
    let n = channels * dims[0] * dims[1] * dims[2];
    let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    DenseGrid::from_values(dims, channels, unit_box(), values).unwrap()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random point comfortably inside the unit box.
pub fn random_point(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(
        rng.gen_range(-0.9..0.9),
        rng.gen_range(-0.9..0.9),
        rng.gen_range(-0.9..0.9),
    )
}

/// Render a tiny synthetic dataset into `dir` and load it back.
pub fn tiny_dataset(dir: &std::path::Path, views: usize, px: usize) -> voxurf::dataio::Dataset {
    let scene = SyntheticScene::sphere();
    let cfg = SyntheticConfig {
        n_views: views,
        width: px,
        height: px,
        gt_points: 1000,
        ..Default::default()
    };
    let manifest = make_synthetic(&scene, &cfg, dir).unwrap();
    voxurf::dataio::load_dataset(&manifest).unwrap()
}

use voxurf::field::{ColorInputLayout, DualColor, Head, Mlp, SceneField};
use voxurf::optim::AdamState;
use voxurf::render::RayBatch;
use voxurf::trainer::{ColorModel, Phase, PipelineState, SdfPhase, Stage, TrainConfig};

/// Configuration for tiny gradient-check scenes: zero learning rates (a
/// train step then reports loss and gradients without moving parameters),
/// no evaluation shortcuts, small networks.
pub fn tiny_cfg(dual: bool, smoothed: bool) -> TrainConfig {
    TrainConfig {
        lr_mlp: 0.0,
        lr_grid_coarse: 0.0,
        lr_sdf_fine: 0.0,
        lr_feat_fine: 0.0,
        mlp_width: 8,
        hier_level: 1.0,
        feat_channels: 4,
        pos_freqs: 2,
        view_freqs: 1,
        fine_mlp_layers: 3,
        coarse_mlp_layers: 3,
        dual_color: dual,
        smoothed_queries_stage1: smoothed,
        smoothed_queries_stage2: smoothed,
        alpha_skip: 0.0,
        term_eps: 0.0,
        mask_loss_weight: 0.1,
        kernel_half_width: 1,
        stage2_s_start: 0.1,
        stage1_s_start: 0.2,
        ..TrainConfig::default()
    }
}

fn randomize_head(mlp: &mut Mlp, rng: &mut ChaCha8Rng) {
    let last = mlp.layers.last_mut().unwrap();
    for w in &mut last.w {
        *w = rng.gen_range(-0.4..0.4);
    }
    for b in &mut last.b {
        *b = rng.gen_range(-0.1..0.1);
    }
}

/// A fully assembled tiny SDF-stage state over random grids, plus a small
/// ray batch with ground-truth colors and masks. Finite-difference checks
/// must build the dual network with `detach` off: a stop-gradient makes the
/// analytic gradient differ from the true loss derivative by construction,
/// and central differences can only see the latter.
pub fn tiny_sdf_state(
    stage: Stage,
    dual: bool,
    smoothed: bool,
    detach: bool,
    seed: u64,
) -> (PipelineState, RayBatch) {
    assert!(matches!(stage, Stage::Coarse | Stage::Fine));
    let cfg = tiny_cfg(dual, smoothed);
    let mut rng = seeded(seed);
    let dims = [5usize; 3];
    let mut sdf = random_grid(&mut rng, dims, 1);
    // bias toward an ellipsoid so rays cross a surface
    for i in 0..5 {
        for j in 0..5 {
            for k in 0..5 {
                let p = sdf.node_pos(i, j, k);
                *sdf.at_mut(0, i, j, k) = p.norm() - 0.6 + 0.2 * sdf.at(0, i, j, k);
            }
        }
    }
    let feat = random_grid(&mut rng, dims, cfg.feat_channels);
    let kernel = cfg.kernel().unwrap();
    let field = SceneField::new(sdf, feat, kernel);
    let mut occupancy = DenseGrid::zeros([4; 3], 1, unit_box()).unwrap();
    occupancy.values.iter_mut().for_each(|v| *v = 1.0);

    let spec_dim = {
        let spec = match stage {
            Stage::Coarse => voxurf::field::GeoFeatureSpec {
                level: 0.5,
                include_sdf: false,
                include_normals: true,
            },
            _ => voxurf::field::GeoFeatureSpec {
                level: cfg.hier_level,
                include_sdf: true,
                include_normals: true,
            },
        };
        spec.dim()
    };
    let color = if dual && stage == Stage::Fine {
        let mut d = DualColor::new(
            cfg.pos_freqs,
            cfg.view_freqs,
            spec_dim,
            cfg.feat_channels,
            cfg.mlp_width,
            cfg.fine_mlp_layers,
            cfg.residual,
            detach,
            &mut rng,
        );
        randomize_head(&mut d.g0, &mut rng);
        randomize_head(&mut d.g1, &mut rng);
        ColorModel::Dual(d)
    } else {
        let layout = ColorInputLayout::new(
            cfg.pos_freqs,
            cfg.view_freqs,
            spec_dim,
            cfg.feat_channels,
            false,
        );
        let mut mlp = Mlp::new(
            "tiny",
            &[layout.total, cfg.mlp_width, cfg.mlp_width, 3],
            Head::Sigmoid,
            &mut rng,
        );
        randomize_head(&mut mlp, &mut rng);
        ColorModel::Single {
            mlp,
            layout,
            use_feat: true,
        }
    };
    let n_sdf = field.sdf.len();
    let n_feat = field.feat.len();
    let state = PipelineState {
        cfg,
        stage,
        iter: 3,
        epoch: 0,
        batch_pos: 0,
        phase: Phase::Sdf(SdfPhase {
            field,
            color,
            occupancy,
            adam: AdamState::new(),
            upscaled: false,
            sdf_grad: vec![0.0; n_sdf],
            feat_grad: vec![0.0; n_feat],
        }),
    };

    let mut batch = RayBatch::default();
    let mut masks = Vec::new();
    for i in 0..3 {
        let angle = i as f64 * 2.3 + seed as f64 * 0.7;
        let origin = Vec3::new(2.0 * angle.cos(), 2.0 * angle.sin(), 0.4);
        let target = Vec3::new(
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
        );
        batch.origins.push(origin);
        batch.dirs.push((target - origin).normalized());
        batch.pixels.push((0, i as u32));
        batch.gt_colors.push(Vec3::new(
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
        ));
        masks.push(if i % 2 == 0 { 1.0 } else { 0.0 });
    }
    batch.gt_masks = Some(masks);
    (state, batch)
}

/// Loss of the tiny state on the batch; learning rates are zero so the
/// underlying step leaves parameters untouched.
pub fn loss_of(state: &PipelineState, batch: &RayBatch) -> f64 {
    let mut s = state.clone();
    s.train_step(batch, None).unwrap().loss
}

/// Full-loss finite-difference sweep over every parameter group of a tiny
/// scene. Returns (checked parameter count, max relative error).
pub fn full_loss_fd(stage: Stage, dual: bool, smoothed: bool, seed: u64, tol: f64) -> (usize, f64) {
    let (state, batch) = tiny_sdf_state(stage, dual, smoothed, false, seed);
    let mut forward = state.clone();
    forward.train_step(&batch, None).unwrap();
    let Phase::Sdf(trained) = &forward.phase else {
        unreachable!()
    };

    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut max_err = 0.0f64;
    // The opacity clamp and the ReLU make the loss piecewise smooth; a
    // parameter whose FD step straddles a kink shows a step-size-dependent
    // quotient. Those points are not differentiable and are skipped, with
    // the skip rate bounded below.
    let mut check = |name: &str, analytic: f64, fd: f64, refine: &mut dyn FnMut(f64) -> f64| {
        let e = rel_err(analytic, fd);
        if e > tol {
            let fd2 = refine(1.0 / 16.0);
            if rel_err(fd, fd2) > tol * 0.5 {
                skipped += 1;
                return;
            }
            panic!("{name}: analytic {analytic:.8e} vs fd {fd:.8e} (rel {e:.2e})");
        }
        checked += 1;
        max_err = max_err.max(e);
    };

    // SDF grid values
    for idx in 0..trained.field.sdf.len() {
        let x0 = state.sdf_phase().unwrap().field.sdf.values[idx];
        let mut eval = |x: f64| {
            let mut s = state.clone();
            if let Phase::Sdf(p) = &mut s.phase {
                p.field.sdf.values[idx] = x;
            }
            loss_of(&s, &batch)
        };
        let fd = central_diff(&mut eval, x0);
        check(
            &format!("sdf[{idx}]"),
            trained.sdf_grad[idx],
            fd,
            &mut |scale| central_diff_scaled(&mut eval, x0, scale),
        );
    }
    // feature grid values (sampled to keep runtime bounded)
    for idx in (0..trained.field.feat.len()).step_by(3) {
        let x0 = state.sdf_phase().unwrap().field.feat.values[idx];
        let mut eval = |x: f64| {
            let mut s = state.clone();
            if let Phase::Sdf(p) = &mut s.phase {
                p.field.feat.values[idx] = x;
            }
            loss_of(&s, &batch)
        };
        let fd = central_diff(&mut eval, x0);
        check(
            &format!("feat[{idx}]"),
            trained.feat_grad[idx],
            fd,
            &mut |scale| central_diff_scaled(&mut eval, x0, scale),
        );
    }
    // network parameters
    let nets: Vec<usize> = match &trained.color {
        ColorModel::Single { .. } => vec![0],
        ColorModel::Dual(_) => vec![0, 1],
    };
    for net in nets {
        let n_layers = match &trained.color {
            ColorModel::Single { mlp, .. } => mlp.layers.len(),
            ColorModel::Dual(d) => [&d.g0, &d.g1][net].layers.len(),
        };
        for li in 0..n_layers {
            let (wn, bn) = {
                let mlp = match &trained.color {
                    ColorModel::Single { mlp, .. } => mlp,
                    ColorModel::Dual(d) => [&d.g0, &d.g1][net],
                };
                (mlp.layers[li].w.len(), mlp.layers[li].b.len())
            };
            for (is_w, count) in [(true, wn), (false, bn)] {
                for idx in (0..count).step_by(5) {
                    let with_param = |s: &mut PipelineState, f: &mut dyn FnMut(&mut f64)| {
                        if let Phase::Sdf(p) = &mut s.phase {
                            let mlp = match &mut p.color {
                                ColorModel::Single { mlp, .. } => mlp,
                                ColorModel::Dual(d) => [&mut d.g0, &mut d.g1].into_iter().nth(net).unwrap(),
                            };
                            let l = &mut mlp.layers[li];
                            f(if is_w { &mut l.w[idx] } else { &mut l.b[idx] });
                        }
                    };
                    let mut x0 = 0.0;
                    {
                        let mut s = state.clone();
                        with_param(&mut s, &mut |v| x0 = *v);
                    }
                    let mut eval = |x: f64| {
                        let mut s = state.clone();
                        with_param(&mut s, &mut |v| *v = x);
                        loss_of(&s, &batch)
                    };
                    let fd = central_diff(&mut eval, x0);
                    let analytic = {
                        let mlp = match &trained.color {
                            ColorModel::Single { mlp, .. } => mlp,
                            ColorModel::Dual(d) => [&d.g0, &d.g1][net],
                        };
                        if is_w {
                            mlp.layers[li].gw[idx]
                        } else {
                            mlp.layers[li].gb[idx]
                        }
                    };
                    check(
                        &format!("net{net}.l{li}.{}[{idx}]", if is_w { "w" } else { "b" }),
                        analytic,
                        fd,
                        &mut |scale| central_diff_scaled(&mut eval, x0, scale),
                    );
                }
            }
        }
    }
    // non-differentiable points must stay rare
    assert!(
        skipped * 50 <= checked + skipped,
        "too many kink skips: {skipped} of {}",
        checked + skipped
    );
    (checked, max_err)
}
