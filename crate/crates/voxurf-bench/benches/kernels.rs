//! Microbenchmarks of the hot kernels: interpolation, separable smoothing,
//! compositing, the geometry feature, marching cubes and Chamfer distance.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxurf::field::{GeoFeatureSpec, Head, Mlp, SceneField};
use voxurf::grid::{gaussian_smooth, tv_loss, DenseGrid, GaussianKernel};
use voxurf::math::{Aabb, Vec3};
use voxurf::mesh::{chamfer, marching_cubes, sample_mesh_points, PointCloud};
use voxurf::render::{composite, sdf_alpha};

fn unit_box() -> Aabb {
    Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0))
}

fn random_grid(rng: &mut ChaCha8Rng, dims: usize, channels: usize) -> DenseGrid {
    let n = channels * dims * dims * dims;
    let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    DenseGrid::from_values([dims; 3], channels, unit_box(), values).unwrap()
}

fn sphere_grid(dims: usize) -> DenseGrid {
    let mut g = DenseGrid::zeros([dims; 3], 1, unit_box()).unwrap();
    for i in 0..dims {
        for j in 0..dims {
            for k in 0..dims {
                let p = g.node_pos(i, j, k);
                *g.at_mut(0, i, j, k) = p.norm() - 0.5;
            }
        }
    }
    g
}

fn bench_interp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = random_grid(&mut rng, 64, 1);
    let points: Vec<Vec3> = (0..4096)
        .map(|_| {
            Vec3::new(
                rng.gen_range(-0.99..0.99),
                rng.gen_range(-0.99..0.99),
                rng.gen_range(-0.99..0.99),
            )
        })
        .collect();
    c.bench_function("interp_4096", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for &p in &points {
                acc += grid.interp1(black_box(p), true).unwrap();
            }
            acc
        })
    });
}

fn bench_smooth(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = random_grid(&mut rng, 64, 1);
    let kernel = GaussianKernel::new(2, 0.8).unwrap();
    c.bench_function("gaussian_smooth_64", |b| {
        b.iter(|| gaussian_smooth(black_box(&grid), &kernel))
    });
    c.bench_function("tv_loss_64", |b| b.iter(|| tv_loss(black_box(&grid), 1e-6)));
}

fn bench_composite(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let alphas: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..0.2)).collect();
    let colors: Vec<Vec3> = (0..64).map(|_| Vec3::splat(rng.gen_range(0.0..1.0))).collect();
    c.bench_function("composite_64", |b| {
        b.iter(|| composite(black_box(&alphas), &colors, Vec3::ZERO))
    });
    c.bench_function("sdf_alpha", |b| {
        b.iter(|| sdf_alpha(black_box(0.02), black_box(-0.01), 120.0))
    });
}

fn bench_geo_feature(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sdf = sphere_grid(64);
    let feat = random_grid(&mut rng, 64, 6);
    let field = SceneField::new(sdf, feat, GaussianKernel::new(2, 0.8).unwrap());
    let spec = GeoFeatureSpec {
        level: 2.0,
        include_sdf: true,
        include_normals: true,
    };
    let mut out = vec![0.0; spec.dim()];
    c.bench_function("geo_feature_l2", |b| {
        b.iter(|| {
            field
                .geo_feature(black_box(Vec3::new(0.3, -0.2, 0.4)), &spec, false, &mut out)
                .unwrap()
        })
    });
}

fn bench_mlp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mlp = Mlp::new("bench", &[97, 128, 128, 128, 3], Head::Sigmoid, &mut rng);
    let input: Vec<f64> = (0..97).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = [0.0; 3];
    c.bench_function("mlp_forward_128x4", |b| {
        b.iter(|| mlp.forward(black_box(&input), &mut out, None))
    });
}

fn bench_mesh(c: &mut Criterion) {
    let grid = sphere_grid(64);
    c.bench_function("marching_cubes_64", |b| {
        b.iter(|| marching_cubes(black_box(&grid), 0.0, None).unwrap())
    });
    let mesh = marching_cubes(&grid, 0.0, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = sample_mesh_points(&mesh, 10_000, &mut rng).unwrap();
    let b_cloud = PointCloud {
        points: (0..10_000)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect(),
        normals: None,
    };
    c.bench_function("chamfer_10k", |b| {
        b.iter(|| chamfer(black_box(&a), &b_cloud).unwrap())
    });
}

criterion_group!(
    benches,
    bench_interp,
    bench_smooth,
    bench_composite,
    bench_geo_feature,
    bench_mlp,
    bench_mesh
);
criterion_main!(benches);
