//! Finite-difference contracts for every hand-derived adjoint, from the
//! grid primitives up to the fully assembled training loss.

mod common;

use common::*;
use rand::Rng;
use voxurf::field::{pos_encode_dim, GeoFeatureSpec, SceneField};
use voxurf::grid::{
    gaussian_smooth, gaussian_smooth_adjoint, grid_gradient, grid_gradient_adjoint, smooth_loss,
    smooth_loss_adjoint, tv_loss, tv_loss_adjoint, upscale_trilinear_adjoint, GaussianKernel,
};
use voxurf::math::Vec3;
use voxurf::render::{composite, composite_adjoint, density_alpha_grad, sdf_alpha_grad};
use voxurf::trainer::Stage;

const TOL: f64 = 1e-4;

#[test]
fn interp_value_adjoint_matches_fd() {
    for seed in 0..3 {
        let mut rng = seeded(seed);
        let grid = random_grid(&mut rng, [4, 4, 4], 2);
        let p = random_point(&mut rng);
        let cot = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        // scalar = cot . interp(grid, p)
        let mut grad = vec![0.0; grid.len()];
        grid.interp_adjoint(p, false, &cot, &mut grad).unwrap();
        for idx in 0..grid.len() {
            let fd = central_diff(
                |x| {
                    let mut g = grid.clone();
                    g.values[idx] = x;
                    let mut out = [0.0; 2];
                    g.interp_into(p, false, &mut out).unwrap();
                    cot[0] * out[0] + cot[1] * out[1]
                },
                grid.values[idx],
            );
            assert_grad(&format!("interp value[{idx}]"), grad[idx], fd, TOL);
        }
    }
}

#[test]
fn interp_point_adjoint_matches_fd() {
    for seed in 0..3 {
        let mut rng = seeded(seed);
        let grid = random_grid(&mut rng, [5, 5, 5], 1);
        let p = random_point(&mut rng);
        let cot = [rng.gen_range(-1.0..1.0)];
        let g = grid.interp_point_grad(p, false, &cot).unwrap();
        for axis in 0..3 {
            let fd = central_diff(
                |x| {
                    let mut q = p;
                    q.set(axis, x);
                    cot[0] * grid.interp1(q, false).unwrap()
                },
                p.get(axis),
            );
            assert_grad(&format!("interp point axis {axis}"), g.get(axis), fd, TOL);
        }
    }
}

#[test]
fn gaussian_smooth_adjoint_matches_fd() {
    for seed in 0..3 {
        let mut rng = seeded(seed);
        let grid = random_grid(&mut rng, [5, 4, 5], 1);
        let kernel = GaussianKernel::new(1, 0.8).unwrap();
        let cot: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut grad = vec![0.0; grid.len()];
        gaussian_smooth_adjoint(&grid, &kernel, &cot, &mut grad);
        for idx in (0..grid.len()).step_by(7) {
            let fd = central_diff(
                |x| {
                    let mut g = grid.clone();
                    g.values[idx] = x;
                    let s = gaussian_smooth(&g, &kernel);
                    s.values.iter().zip(&cot).map(|(v, c)| v * c).sum()
                },
                grid.values[idx],
            );
            assert_grad(&format!("smooth[{idx}]"), grad[idx], fd, TOL);
        }
    }
}

#[test]
fn upscale_adjoint_matches_fd() {
    let mut rng = seeded(4);
    let grid = random_grid(&mut rng, [3, 3, 3], 1);
    let up = grid.upscale_trilinear([5, 5, 5]).unwrap();
    let mut cot_grid = up.clone();
    for v in &mut cot_grid.values {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mut grad = vec![0.0; grid.len()];
    upscale_trilinear_adjoint(&grid, &cot_grid, &mut grad);
    for idx in 0..grid.len() {
        let fd = central_diff(
            |x| {
                let mut g = grid.clone();
                g.values[idx] = x;
                let u = g.upscale_trilinear([5, 5, 5]).unwrap();
                u.values.iter().zip(&cot_grid.values).map(|(v, c)| v * c).sum()
            },
            grid.values[idx],
        );
        assert_grad(&format!("upscale[{idx}]"), grad[idx], fd, TOL);
    }
}

#[test]
fn tv_adjoint_matches_fd() {
    for seed in 0..3 {
        let mut rng = seeded(seed);
        let grid = random_grid(&mut rng, [4, 4, 4], 2);
        let eps = 1e-6;
        let weight = 0.7;
        let mut grad = vec![0.0; grid.len()];
        tv_loss_adjoint(&grid, eps, weight, &mut grad);
        for idx in (0..grid.len()).step_by(5) {
            let fd = central_diff(
                |x| {
                    let mut g = grid.clone();
                    g.values[idx] = x;
                    weight * tv_loss(&g, eps).0
                },
                grid.values[idx],
            );
            assert_grad(&format!("tv[{idx}]"), grad[idx], fd, TOL);
        }
    }
}

#[test]
fn grid_gradient_adjoint_matches_fd() {
    let mut rng = seeded(9);
    let grid = random_grid(&mut rng, [5, 5, 5], 1);
    let g3 = grid_gradient(&grid).unwrap();
    let mut cot = g3.clone();
    for v in &mut cot.values {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mut grad = vec![0.0; grid.len()];
    grid_gradient_adjoint(&grid, &cot, &mut grad);
    for idx in (0..grid.len()).step_by(3) {
        let fd = central_diff(
            |x| {
                let mut g = grid.clone();
                g.values[idx] = x;
                let gg = grid_gradient(&g).unwrap();
                gg.values.iter().zip(&cot.values).map(|(v, c)| v * c).sum()
            },
            grid.values[idx],
        );
        assert_grad(&format!("grid_gradient[{idx}]"), grad[idx], fd, TOL);
    }
}

#[test]
fn smooth_loss_adjoint_matches_fd() {
    for seed in 0..3 {
        let mut rng = seeded(seed + 20);
        let grid = random_grid(&mut rng, [4, 4, 4], 1);
        let kernel = GaussianKernel::new(1, 0.8).unwrap();
        let weight = 1.3;
        let mut grad = vec![0.0; grid.len()];
        smooth_loss_adjoint(&grid, &kernel, weight, &mut grad);
        for idx in (0..grid.len()).step_by(4) {
            let fd = central_diff(
                |x| {
                    let mut g = grid.clone();
                    g.values[idx] = x;
                    weight * smooth_loss(&g, &kernel)
                },
                grid.values[idx],
            );
            assert_grad(&format!("smooth_loss[{idx}]"), grad[idx], fd, TOL);
        }
    }
}

#[test]
fn sdf_alpha_partials_match_fd() {
    for seed in 0..5 {
        let mut rng = seeded(seed + 30);
        let kappa = rng.gen_range(1.0..60.0);
        let f_i = rng.gen_range(-0.5..0.5);
        let f_n = f_i - rng.gen_range(0.01..0.4); // decreasing: alpha > 0
        let (_, dfi, dfn) = sdf_alpha_grad(f_i, f_n, kappa);
        let fd_i = central_diff(|x| sdf_alpha_grad(x, f_n, kappa).0, f_i);
        let fd_n = central_diff(|x| sdf_alpha_grad(f_i, x, kappa).0, f_n);
        assert_grad("sdf_alpha df_i", dfi, fd_i, TOL);
        assert_grad("sdf_alpha df_next", dfn, fd_n, TOL);
    }
}

#[test]
fn density_alpha_partial_matches_fd() {
    for seed in 0..5 {
        let mut rng = seeded(seed + 40);
        let sigma = rng.gen_range(-3.0..3.0);
        let delta = rng.gen_range(0.001..0.1);
        let shift = rng.gen_range(-1.0..1.0);
        let (_, da) = density_alpha_grad(sigma, delta, shift);
        let fd = central_diff(|x| density_alpha_grad(x, delta, shift).0, sigma);
        assert_grad("density_alpha dsigma", da, fd, TOL);
    }
}

#[test]
fn composite_adjoint_matches_fd() {
    for seed in 0..5 {
        let mut rng = seeded(seed + 50);
        let n = rng.gen_range(1..12);
        let alphas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.95)).collect();
        let colors: Vec<Vec3> = (0..n)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let bg = Vec3::new(0.2, 0.1, 0.3);
        let d_color = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let d_acc = rng.gen_range(-1.0..1.0);
        let scalar = |alphas: &[f64], colors: &[Vec3]| {
            let c = composite(alphas, colors, bg);
            c.color.dot(d_color) + c.acc * d_acc
        };
        let mut d_alphas = vec![0.0; n];
        let mut d_colors = vec![Vec3::ZERO; n];
        composite_adjoint(&alphas, &colors, bg, d_color, d_acc, &mut d_alphas, &mut d_colors);
        for i in 0..n {
            let fd = central_diff(
                |x| {
                    let mut a = alphas.clone();
                    a[i] = x;
                    scalar(&a, &colors)
                },
                alphas[i],
            );
            assert_grad(&format!("composite alpha[{i}]"), d_alphas[i], fd, TOL);
            for axis in 0..3 {
                let fd = central_diff(
                    |x| {
                        let mut c = colors.clone();
                        c[i].set(axis, x);
                        scalar(&alphas, &c)
                    },
                    colors[i].get(axis),
                );
                assert_grad(
                    &format!("composite color[{i}].{axis}"),
                    d_colors[i].get(axis),
                    fd,
                    TOL,
                );
            }
        }
    }
}

#[test]
fn geo_feature_adjoint_matches_fd() {
    for (smoothed, seed) in [(false, 60u64), (true, 61)] {
        let mut rng = seeded(seed);
        let sdf = random_grid(&mut rng, [6, 6, 6], 1);
        let feat = random_grid(&mut rng, [6, 6, 6], 1);
        let kernel = GaussianKernel::new(1, 0.8).unwrap();
        let mut field = SceneField::new(sdf, feat, kernel.clone());
        let spec = GeoFeatureSpec {
            level: 1.5,
            include_sdf: true,
            include_normals: true,
        };
        let p = random_point(&mut rng);
        let cot: Vec<f64> = (0..spec.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if smoothed {
            field.refresh_smoothed();
        }
        // cotangents accumulate against the smoothed grid, then convolve back
        let mut sink = vec![0.0; field.sdf.len()];
        field
            .geo_feature_adjoint(p, &spec, smoothed, &cot, &mut sink)
            .unwrap();
        let grad = if smoothed {
            let mut g = vec![0.0; field.sdf.len()];
            gaussian_smooth_adjoint(&field.sdf, &kernel, &sink, &mut g);
            g
        } else {
            sink
        };
        let scalar = |field: &mut SceneField| {
            if smoothed {
                field.refresh_smoothed();
            }
            let mut out = vec![0.0; spec.dim()];
            field.geo_feature(p, &spec, smoothed, &mut out).unwrap();
            out.iter().zip(&cot).map(|(v, c)| v * c).sum::<f64>()
        };
        for idx in (0..field.sdf.len()).step_by(5) {
            let x0 = field.sdf.values[idx];
            let fd = central_diff(
                |x| {
                    let mut f = field.clone();
                    f.sdf.values[idx] = x;
                    scalar(&mut f)
                },
                x0,
            );
            assert_grad(
                &format!("geo_feature smoothed={smoothed} sdf[{idx}]"),
                grad[idx],
                fd,
                TOL,
            );
        }
    }
}

#[test]
fn pos_encode_dims_sanity() {
    // not a gradient, but the encoding feeds every network input below
    assert_eq!(pos_encode_dim(0), 3);
    assert_eq!(pos_encode_dim(4), 27);
}

#[test]
fn full_loss_fine_dual_matches_fd() {
    for seed in 0..2 {
        let (n, max) = full_loss_fd(Stage::Fine, true, false, seed, TOL);
        assert!(n > 400, "checked {n} params");
        println!("fine/dual seed {seed}: {n} params, max rel err {max:.2e}");
    }
}

#[test]
fn full_loss_fine_dual_smoothed_matches_fd() {
    let (n, max) = full_loss_fd(Stage::Fine, true, true, 7, TOL);
    assert!(n > 400);
    println!("fine/dual/smoothed: {n} params, max rel err {max:.2e}");
}

#[test]
fn full_loss_coarse_single_smoothed_matches_fd() {
    for seed in 0..2 {
        let (n, max) = full_loss_fd(Stage::Coarse, false, true, seed + 3, TOL);
        assert!(n > 300);
        println!("coarse/single seed {seed}: {n} params, max rel err {max:.2e}");
    }
}

#[test]
fn full_loss_fine_no_detach_matches_fd() {
    // the ablation path routes gradients through the residual into g0
    let (state, batch) = {
        let (s, b) = tiny_sdf_state(Stage::Fine, true, false, false, 11);
        (s, b)
    };
    let mut fwd = state.clone();
    fwd.train_step(&batch, None).unwrap();
    let voxurf::trainer::Phase::Sdf(trained) = &fwd.phase else {
        unreachable!()
    };
    let voxurf::trainer::ColorModel::Dual(d) = &trained.color else {
        unreachable!()
    };
    // g0 hidden weights receive gradient through the final color now
    for li in 0..d.g0.layers.len() {
        for idx in (0..d.g0.layers[li].w.len()).step_by(7) {
            let x0 = {
                let voxurf::trainer::Phase::Sdf(p) = &state.phase else {
                    unreachable!()
                };
                let voxurf::trainer::ColorModel::Dual(d0) = &p.color else {
                    unreachable!()
                };
                d0.g0.layers[li].w[idx]
            };
            let fd = central_diff(
                |x| {
                    let mut s = state.clone();
                    if let voxurf::trainer::Phase::Sdf(p) = &mut s.phase {
                        if let voxurf::trainer::ColorModel::Dual(d) = &mut p.color {
                            d.g0.layers[li].w[idx] = x;
                        }
                    }
                    loss_of(&s, &batch)
                },
                x0,
            );
            assert_grad(
                &format!("no-detach g0.l{li}.w[{idx}]"),
                d.g0.layers[li].gw[idx],
                fd,
                TOL,
            );
        }
    }
}
