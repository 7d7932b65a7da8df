//! Training orchestration: the density-based region search, the coarse SDF
//! stage rendering through a smoothed grid, the fine stage with the dual
//! color network and hierarchical geometry features, checkpointing, and
//! evaluation renders.

mod checkpoint;
mod step;

pub use checkpoint::{load_checkpoint, load_checkpoint_bytes, save_checkpoint, save_checkpoint_bytes};
pub use step::{render_rays, StepMetrics};

use crate::dataio::{Dataset, ImageBuf};
use crate::field::{ColorInputLayout, DualColor, GeoFeatureSpec, Mlp, SceneField};
use crate::grid::{DenseGrid, GaussianKernel};
use crate::math::{Aabb, Vec3};
use crate::optim::AdamState;
use crate::render::{density_alpha, solve_density_shift, Camera, RayBatch, SSchedule};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;

/// Every tunable of the pipeline. Defaults are the full-scale training
/// recipe; [`TrainConfig::toy`] is the desk-scale configuration used by the
/// synthetic acceptance scenes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,

    /// Grid resolution (cubic, nodes per axis) of the density search phase.
    pub search_dims: usize,
    /// Resolution of the coarse SDF stage.
    pub coarse_dims: usize,
    /// Fine-stage starting resolution and the resolution after upscaling.
    pub fine_dims_start: usize,
    pub fine_dims_final: usize,
    /// Fine-stage iteration at which the grids upscale.
    pub upscale_at: u64,

    pub iters_search: u64,
    pub iters_stage1: u64,
    pub iters_stage2: u64,

    pub batch_rays: usize,
    /// Ray sampling step as a fraction of the voxel size.
    pub step_ratio: f64,

    pub lr_mlp: f64,
    /// Grid learning rate for the search and coarse stages.
    pub lr_grid_coarse: f64,
    /// SDF grid learning rate in the fine stage.
    pub lr_sdf_fine: f64,
    /// Feature grid learning rate in the fine stage.
    pub lr_feat_fine: f64,
    /// Each stage decays learning rates exponentially to this fraction.
    pub lr_decay: f64,

    /// Weight of the auxiliary `g0` reconstruction term.
    pub lambda0: f64,
    pub stage1_lambda_tv: f64,
    pub stage1_lambda_smooth: f64,
    pub stage1_lambda_tv_feat: f64,
    pub stage2_lambda_tv: f64,
    pub stage2_lambda_smooth: f64,
    /// Binary cross-entropy between accumulated opacity and the mask;
    /// 0 disables (0.1 is a reasonable weight when masks are trusted).
    pub mask_loss_weight: f64,
    /// Per-sample softplus density prior of the search phase (mean over the
    /// samples of each ray); clears fog the photometric term is blind to.
    pub search_sparsity_weight: f64,
    /// One-sided emptiness prior of the search phase: accumulated opacity of
    /// background rays (mask-identified, or background-colored targets when
    /// no masks exist). Removes floaters that paint themselves black.
    pub search_empty_weight: f64,

    pub kernel_half_width: usize,
    pub kernel_sigma: f64,

    pub stage1_s_start: f64,
    pub stage1_s_speed: f64,
    pub stage2_s_start: f64,
    pub stage2_s_speed: f64,

    pub pos_freqs: usize,
    pub view_freqs: usize,
    pub feat_channels: usize,
    /// Neighborhood level of the fine-stage geometry feature.
    pub hier_level: f64,
    pub mlp_width: usize,
    pub coarse_mlp_layers: usize,
    pub fine_mlp_layers: usize,

    /// Fine-stage color architecture toggles.
    pub dual_color: bool,
    pub residual: bool,
    pub detach: bool,
    /// Components of the geometry feature (values / finite-difference
    /// normals).
    pub geo_feature_sdf: bool,
    pub geo_feature_normals: bool,
    /// Coarse-stage color inputs.
    pub coarse_use_normal: bool,
    pub coarse_use_feat: bool,
    /// Render through the Gaussian-smoothed SDF grid per stage.
    pub smoothed_queries_stage1: bool,
    pub smoothed_queries_stage2: bool,

    /// Region-search thresholds on per-voxel opacity at the median step.
    pub tau_bbox: f64,
    pub tau_occ: f64,
    /// Voxels no training ray reaches with at least this much transmittance
    /// are ignored by the region search.
    pub tau_vis: f64,
    /// Raw density 0 renders with this opacity at the median step. Kept
    /// below `tau_bbox` so space no ray ever supports stays out of the
    /// searched box by construction (low-density initialization).
    pub alpha_init: f64,
    /// Fractional padding of the searched box before cubing.
    pub bbox_pad: f64,
    /// Occupancy dilation radius in voxels.
    pub occ_dilate: usize,

    pub background: [f64; 3],
    /// Samples with opacity below this skip color-network evaluation; must
    /// stay well below `alpha_init` or a freshly initialized model has no
    /// color gradients at all.
    pub alpha_skip: f64,
    /// Early ray termination once transmittance falls below this.
    pub term_eps: f64,
    pub tv_eps: f64,

    pub checkpoint_every: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            search_dims: 96,
            coarse_dims: 96,
            fine_dims_start: 160,
            fine_dims_final: 256,
            upscale_at: 15_000,
            iters_search: 5_000,
            iters_stage1: 10_000,
            iters_stage2: 20_000,
            batch_rays: 8_192,
            step_ratio: 0.5,
            lr_mlp: 1e-3,
            lr_grid_coarse: 0.1,
            lr_sdf_fine: 5e-3,
            lr_feat_fine: 0.1,
            lr_decay: 0.1,
            lambda0: 0.5,
            stage1_lambda_tv: 1e-4,
            stage1_lambda_smooth: 2e-4,
            stage1_lambda_tv_feat: 1e-2,
            stage2_lambda_tv: 1e-3,
            stage2_lambda_smooth: 5e-4,
            mask_loss_weight: 0.0,
            search_sparsity_weight: 0.1,
            search_empty_weight: 0.1,
            kernel_half_width: 2,
            kernel_sigma: 0.8,
            stage1_s_start: 0.2,
            stage1_s_speed: 50.0,
            stage2_s_start: 0.05,
            stage2_s_speed: 50.0,
            pos_freqs: 5,
            view_freqs: 4,
            feat_channels: 6,
            hier_level: 2.0,
            mlp_width: 128,
            coarse_mlp_layers: 3,
            fine_mlp_layers: 4,
            dual_color: true,
            residual: true,
            detach: true,
            geo_feature_sdf: true,
            geo_feature_normals: true,
            coarse_use_normal: true,
            coarse_use_feat: true,
            smoothed_queries_stage1: true,
            smoothed_queries_stage2: false,
            tau_bbox: 1e-3,
            tau_occ: 1e-4,
            tau_vis: 1e-4,
            alpha_init: 1e-4,
            bbox_pad: 0.05,
            occ_dilate: 2,
            background: [0.0, 0.0, 0.0],
            alpha_skip: 1e-5,
            term_eps: 1e-10,
            tv_eps: 1e-6,
            checkpoint_every: 5_000,
            weight_decay: 0.0,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale configuration: all resolutions and iteration counts of the
    /// full recipe divided by four, with networks and ray batches sized for
    /// CPU training of the synthetic scenes. Matches the mask-supervised
    /// protocol of the full recipe, so the mask term is on.
    pub fn toy() -> Self {
        TrainConfig {
            search_dims: 64,
            coarse_dims: 64,
            fine_dims_start: 96,
            fine_dims_final: 128,
            upscale_at: 3_750,
            iters_search: 1_000,
            iters_stage1: 2_500,
            iters_stage2: 5_000,
            batch_rays: 256,
            mlp_width: 32,
            mask_loss_weight: 0.1,
            checkpoint_every: 2_500,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch size must be positive", self.batch_rays > 0),
            ("step_ratio must be positive", self.step_ratio > 0.0),
            ("kernel_sigma must be positive", self.kernel_sigma > 0.0),
            (
                "alpha_init must lie in (0,1)",
                self.alpha_init > 0.0 && self.alpha_init < 1.0,
            ),
            (
                "upscale_at must lie inside stage 2",
                self.upscale_at < self.iters_stage2 || self.iters_stage2 == 0,
            ),
            (
                "grid resolutions must be at least 2",
                self.search_dims >= 2 && self.coarse_dims >= 2 && self.fine_dims_start >= 2,
            ),
            (
                "fine_dims_final must not shrink",
                self.fine_dims_final >= self.fine_dims_start,
            ),
            (
                "s_start values must be positive",
                self.stage1_s_start > 0.0 && self.stage2_s_start > 0.0,
            ),
            (
                "schedule speeds must be positive",
                self.stage1_s_speed > 0.0 && self.stage2_s_speed > 0.0,
            ),
        ];
        for (msg, ok) in positive {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    pub fn kernel(&self) -> Result<GaussianKernel> {
        GaussianKernel::new(self.kernel_half_width, self.kernel_sigma)
    }
}

/// Pipeline stage tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Search,
    Coarse,
    Fine,
    Done,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Search => "search",
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
            Stage::Done => "done",
        }
    }

    fn code(self) -> u8 {
        match self {
            Stage::Search => 0,
            Stage::Coarse => 1,
            Stage::Fine => 2,
            Stage::Done => 3,
        }
    }

    fn from_code(c: u8) -> Result<Stage> {
        Ok(match c {
            0 => Stage::Search,
            1 => Stage::Coarse,
            2 => Stage::Fine,
            3 => Stage::Done,
            other => return Err(Error::Checkpoint(format!("unknown stage code {other}"))),
        })
    }
}

/// Density model of the search phase.
#[derive(Debug, Clone)]
pub struct SearchPhase {
    pub density: DenseGrid,
    pub feat: DenseGrid,
    pub mlp: Mlp,
    pub layout: ColorInputLayout,
    /// Softplus shift making raw density 0 render at `alpha_init`.
    pub shift: f64,
    pub adam: AdamState,
    pub density_grad: Vec<f64>,
    pub feat_grad: Vec<f64>,
}

/// Color network of the SDF stages.
#[derive(Debug, Clone)]
pub enum ColorModel {
    Single {
        mlp: Mlp,
        layout: ColorInputLayout,
        use_feat: bool,
    },
    Dual(DualColor),
}

impl ColorModel {
    pub fn zero_grads(&mut self) {
        let zero = |m: &mut Mlp| {
            for l in &mut m.layers {
                l.gw.iter_mut().for_each(|g| *g = 0.0);
                l.gb.iter_mut().for_each(|g| *g = 0.0);
            }
        };
        match self {
            ColorModel::Single { mlp, .. } => zero(mlp),
            ColorModel::Dual(d) => {
                zero(&mut d.g0);
                zero(&mut d.g1);
            }
        }
    }
}

/// State of the coarse and fine SDF stages.
#[derive(Debug, Clone)]
pub struct SdfPhase {
    pub field: SceneField,
    pub color: ColorModel,
    /// Occupancy grid from the search phase, on the search-phase box.
    pub occupancy: DenseGrid,
    pub adam: AdamState,
    pub upscaled: bool,
    pub sdf_grad: Vec<f64>,
    pub feat_grad: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum Phase {
    Search(SearchPhase),
    Sdf(SdfPhase),
}

/// Complete pipeline state; checkpoints serialize exactly this.
#[derive(Debug, Clone)]
pub struct PipelineState {
    pub cfg: TrainConfig,
    pub stage: Stage,
    /// Iteration within the current stage.
    pub iter: u64,
    /// Ray-batching epoch and position within the epoch permutation.
    pub epoch: u64,
    pub batch_pos: u64,
    pub phase: Phase,
}

fn hash_tag(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, mixed with the seed
    let mut h = 0xcbf29ce484222325u64 ^ seed.wrapping_mul(0x100000001b3);
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub(crate) fn derived_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash_tag(seed, tag))
}

/// Frustum-union bounding box of the training cameras: corner and center
/// rays of every train view at the near and far planes.
pub fn initial_bbox(dataset: &Dataset) -> Result<Aabb> {
    let mut points = Vec::new();
    for view in dataset.train_indices.iter().map(|&i| &dataset.views[i]) {
        let cam = &view.camera;
        let (w, h) = (cam.width as f64, cam.height as f64);
        let pixels = [
            (0.0, 0.0),
            (w - 1.0, 0.0),
            (0.0, h - 1.0),
            (w - 1.0, h - 1.0),
            (w * 0.5, h * 0.5),
        ];
        let o = cam.center();
        for (u, v) in pixels {
            let d = cam.ray_direction(u, v);
            points.push(o + d * dataset.near);
            points.push(o + d * dataset.far);
        }
    }
    Aabb::from_points(&points)
        .map(|b| b.cubed())
        .ok_or_else(|| Error::Dataset("dataset has no training views".into()))
}

/// Ellipsoid SDF seeding: node values
/// `(|((p - center) / a)| - 1) * min(a)` with semi-axes `a = 0.45 * extent`,
/// negative inside, approximately metric near the zero set.
pub fn init_sdf_ellipsoid(bbox: Aabb, dims: [usize; 3]) -> Result<DenseGrid> {
    let ext = bbox.extent();
    let a = Vec3::new(ext.x * 0.45, ext.y * 0.45, ext.z * 0.45);
    let c = bbox.center();
    let m = a.x.min(a.y).min(a.z);
    let mut grid = DenseGrid::zeros(dims, 1, bbox)?;
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let p = grid.node_pos(i, j, k);
                let q = Vec3::new((p.x - c.x) / a.x, (p.y - c.y) / a.y, (p.z - c.z) / a.z);
                *grid.at_mut(0, i, j, k) = (q.norm() - 1.0) * m;
            }
        }
    }
    Ok(grid)
}

/// Two-term reconstruction loss: mean over rays of `|C - gt|^2` plus
/// `lambda0 * |C0 - gt|^2` when the auxiliary prediction is present.
pub fn recon_loss(c: &[Vec3], c0: Option<&[Vec3]>, gt: &[Vec3], lambda0: f64) -> f64 {
    assert_eq!(c.len(), gt.len());
    if c.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, (&ci, &gi)) in c.iter().zip(gt.iter()).enumerate() {
        let d = ci - gi;
        total += d.dot(d);
        if let Some(c0) = c0 {
            let d0 = c0[i] - gi;
            total += lambda0 * d0.dot(d0);
        }
    }
    total / c.len() as f64
}

impl PipelineState {
    /// Fresh pipeline at the start of the search phase.
    pub fn new(dataset: &Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let bbox = initial_bbox(dataset)?;
        let dims = [cfg.search_dims; 3];
        let density = DenseGrid::zeros(dims, 1, bbox)?;
        let feat = DenseGrid::zeros(dims, cfg.feat_channels, bbox)?;
        let layout = ColorInputLayout::new(cfg.pos_freqs, cfg.view_freqs, 0, cfg.feat_channels, false);
        let mut rng = derived_rng(cfg.seed, "search_mlp");
        let mut mlp_dims = vec![layout.total];
        for _ in 0..cfg.coarse_mlp_layers.saturating_sub(1) {
            mlp_dims.push(cfg.mlp_width);
        }
        mlp_dims.push(3);
        let mlp = Mlp::new("search", &mlp_dims, crate::field::Head::Sigmoid, &mut rng);
        let step = density.voxel_size() * cfg.step_ratio;
        let shift = solve_density_shift(cfg.alpha_init, step);
        let n_density = density.len();
        let n_feat = feat.len();
        Ok(PipelineState {
            cfg,
            stage: Stage::Search,
            iter: 0,
            epoch: 0,
            batch_pos: 0,
            phase: Phase::Search(SearchPhase {
                density,
                feat,
                mlp,
                layout,
                shift,
                adam: AdamState::new(),
                density_grad: vec![0.0; n_density],
                feat_grad: vec![0.0; n_feat],
            }),
        })
    }

    pub fn schedule(&self) -> SSchedule {
        match self.stage {
            Stage::Coarse => SSchedule {
                s_start: self.cfg.stage1_s_start,
                speed: self.cfg.stage1_s_speed,
            },
            _ => SSchedule {
                s_start: self.cfg.stage2_s_start,
                speed: self.cfg.stage2_s_speed,
            },
        }
    }

    pub fn stage_iters(&self) -> u64 {
        match self.stage {
            Stage::Search => self.cfg.iters_search,
            Stage::Coarse => self.cfg.iters_stage1,
            Stage::Fine => self.cfg.iters_stage2,
            Stage::Done => 0,
        }
    }

    /// Sharpness at the current iteration (capped at the stage end).
    pub fn kappa(&self) -> f64 {
        let iter = self.iter.min(self.stage_iters());
        self.schedule().kappa(iter)
    }

    pub fn smoothed_queries(&self) -> bool {
        match self.stage {
            Stage::Coarse => self.cfg.smoothed_queries_stage1,
            _ => self.cfg.smoothed_queries_stage2,
        }
    }

    pub fn geo_spec(&self) -> GeoFeatureSpec {
        match self.stage {
            Stage::Coarse => GeoFeatureSpec {
                level: 0.5,
                include_sdf: false,
                include_normals: self.cfg.coarse_use_normal,
            },
            _ => GeoFeatureSpec {
                level: self.cfg.hier_level,
                include_sdf: self.cfg.geo_feature_sdf,
                include_normals: self.cfg.geo_feature_normals,
            },
        }
    }

    pub fn sdf_phase(&self) -> Option<&SdfPhase> {
        match &self.phase {
            Phase::Sdf(p) => Some(p),
            _ => None,
        }
    }

    /// One optimization step on a ray batch: sample, render, assemble the
    /// full loss, accumulate adjoints, and apply the optimizer. The
    /// iteration counter advances even for an empty batch (which changes
    /// nothing else). Handles the scheduled fine-stage upscale.
    pub fn train_step(
        &mut self,
        batch: &RayBatch,
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<StepMetrics> {
        if self.stage == Stage::Fine && self.iter >= self.cfg.upscale_at {
            if let Phase::Sdf(phase) = &mut self.phase {
                if !phase.upscaled {
                    upscale_fine(phase, &self.cfg)?;
                }
            }
        }
        let total = self.stage_iters();
        let metrics = match &mut self.phase {
            Phase::Search(phase) => {
                step::search_step(phase, batch, &self.cfg, self.iter, pool)?
            }
            Phase::Sdf(phase) => step::sdf_step(
                phase,
                self.stage,
                batch,
                &self.cfg,
                self.iter,
                total,
                pool,
            )?,
        };
        self.iter += 1;
        Ok(metrics)
    }
}

/// Per-voxel visibility: the maximum transmittance any training ray still
/// carries when it passes a voxel. Space behind opaque surfaces (or outside
/// every frustum) keeps visibility 0 and is ignored by the region search;
/// no loss can see it, so its density is meaningless.
fn compute_visibility(phase: &SearchPhase, cfg: &TrainConfig, dataset: &Dataset) -> Vec<f64> {
    let density = &phase.density;
    let step = density.voxel_size() * cfg.step_ratio;
    let bbox = density.bbox();
    let mut vis = vec![0.0f64; density.len()];
    for &vi in &dataset.train_indices {
        let view = &dataset.views[vi];
        let cam = &view.camera;
        let origin = cam.center();
        for py in 0..cam.height {
            for px in 0..cam.width {
                let dir = cam.ray_direction(px as f64, py as f64);
                let samples = crate::render::sample_points(
                    origin,
                    dir,
                    bbox,
                    step,
                    dataset.near,
                    dataset.far,
                    None,
                );
                let mut t = 1.0;
                for (i, p) in samples.pos.iter().enumerate() {
                    // scatter onto the 8 surrounding nodes
                    let _ = density.scatter_max(*p, t, &mut vis);
                    let sigma = density.interp1(*p, true).unwrap_or(0.0);
                    let alpha = density_alpha(sigma, step, phase.shift);
                    t *= 1.0 - alpha;
                    if t < cfg.tau_vis || i > 10_000 {
                        break;
                    }
                }
            }
        }
    }
    vis
}

/// Finish the search phase: per-node opacity at the median step masked by
/// ray visibility, 3x3x3 max-pool, tight box over `tau_bbox`, 5% pad,
/// cubed; plus the occupancy grid over `tau_occ` dilated by `occ_dilate`
/// voxels.
pub fn search_result(
    phase: &SearchPhase,
    cfg: &TrainConfig,
    dataset: &Dataset,
) -> Result<(Aabb, DenseGrid)> {
    let density = &phase.density;
    let [nx, ny, nz] = density.dims();
    let step = density.voxel_size() * cfg.step_ratio;
    let vis = compute_visibility(phase, cfg, dataset);
    let alpha_at = |i: usize, j: usize, k: usize| {
        let idx = density.index(0, i, j, k);
        if vis[idx] > cfg.tau_vis {
            density_alpha(density.values[idx], step, phase.shift)
        } else {
            0.0
        }
    };
    // max-pooled alpha over the 27-neighborhood
    let mut lo = Vec3::splat(f64::INFINITY);
    let mut hi = Vec3::splat(f64::NEG_INFINITY);
    let mut any = false;
    let mut occupancy = DenseGrid::zeros(density.dims(), 1, density.bbox())?;
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let alpha = alpha_at(i, j, k);
                if alpha > cfg.tau_occ {
                    *occupancy.at_mut(0, i, j, k) = 1.0;
                }
                let mut mp: f64 = 0.0;
                for di in i.saturating_sub(1)..(i + 2).min(nx) {
                    for dj in j.saturating_sub(1)..(j + 2).min(ny) {
                        for dk in k.saturating_sub(1)..(k + 2).min(nz) {
                            mp = mp.max(alpha_at(di, dj, dk));
                        }
                    }
                }
                if mp > cfg.tau_bbox {
                    let p = density.node_pos(i, j, k);
                    lo = lo.min(p);
                    hi = hi.max(p);
                    any = true;
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyBoundingBox);
    }
    // half-voxel margin so qualifying voxels are fully inside, then pad
    let margin = Vec3::splat(density.voxel_size() * 0.5);
    let bbox = Aabb::new(lo - margin, hi + margin)
        .padded(cfg.bbox_pad)
        .cubed();
    for _ in 0..cfg.occ_dilate {
        occupancy = dilate(&occupancy);
    }
    Ok((bbox, occupancy))
}

fn dilate(grid: &DenseGrid) -> DenseGrid {
    let [nx, ny, nz] = grid.dims();
    let mut out = grid.clone();
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                if grid.at(0, i, j, k) > 0.5 {
                    continue;
                }
                'probe: for di in i.saturating_sub(1)..(i + 2).min(nx) {
                    for dj in j.saturating_sub(1)..(j + 2).min(ny) {
                        for dk in k.saturating_sub(1)..(k + 2).min(nz) {
                            if grid.at(0, di, dj, dk) > 0.5 {
                                *out.at_mut(0, i, j, k) = 1.0;
                                break 'probe;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Build the coarse-stage model from the search result.
fn build_coarse(state: &PipelineState, bbox: Aabb, occupancy: DenseGrid) -> Result<SdfPhase> {
    let cfg = &state.cfg;
    let dims = [cfg.coarse_dims; 3];
    let sdf = init_sdf_ellipsoid(bbox, dims)?;
    let feat = DenseGrid::zeros(dims, cfg.feat_channels, bbox)?;
    let field = SceneField::new(sdf, feat, cfg.kernel()?);
    let spec = GeoFeatureSpec {
        level: 0.5,
        include_sdf: false,
        include_normals: cfg.coarse_use_normal,
    };
    let feat_dim = if cfg.coarse_use_feat {
        cfg.feat_channels
    } else {
        0
    };
    let layout = ColorInputLayout::new(cfg.pos_freqs, cfg.view_freqs, spec.dim(), feat_dim, false);
    let mut rng = derived_rng(cfg.seed, "coarse_mlp");
    let mut mlp_dims = vec![layout.total];
    for _ in 0..cfg.coarse_mlp_layers.saturating_sub(1) {
        mlp_dims.push(cfg.mlp_width);
    }
    mlp_dims.push(3);
    let mlp = Mlp::new("coarse", &mlp_dims, crate::field::Head::Sigmoid, &mut rng);
    let n_sdf = field.sdf.len();
    let n_feat = field.feat.len();
    Ok(SdfPhase {
        field,
        color: ColorModel::Single {
            mlp,
            layout,
            use_feat: cfg.coarse_use_feat,
        },
        occupancy,
        adam: AdamState::new(),
        upscaled: false,
        sdf_grad: vec![0.0; n_sdf],
        feat_grad: vec![0.0; n_feat],
    })
}

/// Carry the coarse grids into the fine stage by trilinear resampling and
/// build the fine color model.
fn build_fine(state: &PipelineState, coarse: &SdfPhase) -> Result<SdfPhase> {
    let cfg = &state.cfg;
    let dims = [cfg.fine_dims_start; 3];
    let sdf = coarse.field.sdf.upscale_trilinear(dims)?;
    let feat = coarse.field.feat.upscale_trilinear(dims)?;
    let field = SceneField::new(sdf, feat, cfg.kernel()?);
    let spec = GeoFeatureSpec {
        level: cfg.hier_level,
        include_sdf: cfg.geo_feature_sdf,
        include_normals: cfg.geo_feature_normals,
    };
    let mut rng = derived_rng(cfg.seed, "fine_mlp");
    let color = if cfg.dual_color {
        ColorModel::Dual(DualColor::new(
            cfg.pos_freqs,
            cfg.view_freqs,
            spec.dim(),
            cfg.feat_channels,
            cfg.mlp_width,
            cfg.fine_mlp_layers,
            cfg.residual,
            cfg.detach,
            &mut rng,
        ))
    } else {
        let layout = ColorInputLayout::new(
            cfg.pos_freqs,
            cfg.view_freqs,
            spec.dim(),
            cfg.feat_channels,
            false,
        );
        let mut mlp_dims = vec![layout.total];
        for _ in 0..cfg.fine_mlp_layers.saturating_sub(1) {
            mlp_dims.push(cfg.mlp_width);
        }
        mlp_dims.push(3);
        ColorModel::Single {
            mlp: Mlp::new("fine", &mlp_dims, crate::field::Head::Sigmoid, &mut rng),
            layout,
            use_feat: true,
        }
    };
    let n_sdf = field.sdf.len();
    let n_feat = field.feat.len();
    Ok(SdfPhase {
        field,
        color,
        occupancy: coarse.occupancy.clone(),
        adam: AdamState::new(),
        upscaled: false,
        sdf_grad: vec![0.0; n_sdf],
        feat_grad: vec![0.0; n_feat],
    })
}

/// Runtime options of a pipeline run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; 1 runs fully sequentially (byte-deterministic).
    pub threads: usize,
    /// Where checkpoints are written; in-memory handoff only when absent.
    pub out_dir: Option<PathBuf>,
    /// Resume from this checkpoint instead of starting fresh.
    pub resume: Option<PathBuf>,
}

/// Worker pool for a run; `threads <= 1` runs fully sequentially.
pub fn make_pool(threads: usize) -> Option<rayon::ThreadPool> {
    if threads <= 1 {
        None
    } else {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("thread pool"),
        )
    }
}

#[derive(Serialize)]
struct MetricsRecord<'a> {
    iter: u64,
    stage: &'a str,
    loss: f64,
    loss_recon: f64,
    loss_tv: f64,
    loss_smooth: f64,
    kappa: f64,
    psnr_batch: f64,
}

/// Cumulative pixel layout of the training views for ray batching.
struct PixelUniverse {
    /// (view index, pixel count) per train view, plus cumulative offsets.
    views: Vec<(usize, u64)>,
    offsets: Vec<u64>,
    total: u64,
}

impl PixelUniverse {
    fn new(dataset: &Dataset) -> Self {
        let mut views = Vec::new();
        let mut offsets = Vec::new();
        let mut total = 0u64;
        for &vi in &dataset.train_indices {
            let v = &dataset.views[vi];
            let n = (v.image.width * v.image.height) as u64;
            offsets.push(total);
            views.push((vi, n));
            total += n;
        }
        PixelUniverse {
            views,
            offsets,
            total,
        }
    }

    fn locate(&self, global: u64) -> (usize, u32) {
        let slot = match self.offsets.binary_search(&global) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        (self.views[slot].0, (global - self.offsets[slot]) as u32)
    }
}

fn epoch_permutation(cfg: &TrainConfig, stage: Stage, epoch: u64, n: u64) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..n as u32).collect();
    let tag = format!("batch/{}/{}", stage.name(), epoch);
    let mut rng = derived_rng(cfg.seed, &tag);
    perm.shuffle(&mut rng);
    perm
}

struct BatchCursor {
    stage: Stage,
    epoch: u64,
    perm: Vec<u32>,
}

#[allow(clippy::too_many_arguments)]
fn next_batch(
    dataset: &Dataset,
    universe: &PixelUniverse,
    cfg: &TrainConfig,
    stage: Stage,
    epoch: &mut u64,
    batch_pos: &mut u64,
    cursor: &mut Option<BatchCursor>,
) -> RayBatch {
    let mut batch = RayBatch {
        near: dataset.near,
        far: dataset.far,
        ..RayBatch::default()
    };
    let want = cfg.batch_rays.min(universe.total as usize);
    if want == 0 {
        return batch;
    }
    let has_masks = dataset.views.iter().all(|v| v.mask.is_some());
    if has_masks {
        batch.gt_masks = Some(Vec::with_capacity(want));
    }
    while batch.len() < want {
        let refresh = match cursor {
            Some(c) => c.stage != stage || c.epoch != *epoch,
            None => true,
        };
        if refresh {
            *cursor = Some(BatchCursor {
                stage,
                epoch: *epoch,
                perm: epoch_permutation(cfg, stage, *epoch, universe.total),
            });
        }
        let cur = cursor.as_ref().unwrap();
        if *batch_pos >= universe.total {
            *epoch += 1;
            *batch_pos = 0;
            continue;
        }
        let global = cur.perm[*batch_pos as usize] as u64;
        *batch_pos += 1;
        let (vi, pixel) = universe.locate(global);
        let view = &dataset.views[vi];
        let w = view.image.width as u32;
        let (px, py) = (pixel % w, pixel / w);
        batch.origins.push(view.camera.center());
        batch
            .dirs
            .push(view.camera.ray_direction(px as f64, py as f64));
        batch.pixels.push((vi as u32, pixel));
        batch.gt_colors.push(view.image.pixel(px as usize, py as usize));
        if let Some(masks) = &mut batch.gt_masks {
            masks.push(view.mask.as_ref().map_or(1.0, |m| m.data[pixel as usize]));
        }
    }
    batch
}

/// Run (or resume) the full pipeline: search, coarse stage, fine stage with
/// upscaling, writing one JSON metrics line per step. Stage handoffs pass
/// through checkpoint serialization, so an uninterrupted run and a run
/// resumed from any stage-boundary checkpoint produce identical results.
pub fn run_pipeline(
    dataset: &Dataset,
    cfg: TrainConfig,
    opts: &RunOptions,
    metrics: &mut dyn Write,
) -> Result<PipelineState> {
    let pool = make_pool(opts.threads);
    let mut state = match &opts.resume {
        Some(path) => load_checkpoint(path)?,
        None => PipelineState::new(dataset, cfg)?,
    };
    let universe = PixelUniverse::new(dataset);
    let mut cursor: Option<BatchCursor> = None;

    while state.stage != Stage::Done {
        let total = state.stage_iters();
        while state.iter < total {
            let batch = next_batch(
                dataset,
                &universe,
                &state.cfg,
                state.stage,
                &mut state.epoch,
                &mut state.batch_pos,
                &mut cursor,
            );
            let step_iter = state.iter;
            let m = state.train_step(&batch, pool.as_ref())?;
            let record = MetricsRecord {
                iter: step_iter,
                stage: state.stage.name(),
                loss: m.loss,
                loss_recon: m.recon,
                loss_tv: m.tv,
                loss_smooth: m.smooth,
                kappa: m.kappa,
                psnr_batch: m.psnr,
            };
            serde_json::to_writer(&mut *metrics, &record)?;
            metrics.write_all(b"\n")?;
            if state.cfg.checkpoint_every > 0
                && state.iter % state.cfg.checkpoint_every == 0
                && state.iter < total
            {
                if let Some(dir) = &opts.out_dir {
                    let name = format!("ckpt_{}_{:06}.ckpt", state.stage.name(), state.iter);
                    save_checkpoint(&state, &dir.join(name))?;
                }
            }
        }
        state = advance_stage(state, dataset, opts)?;
        cursor = None;
    }
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&state, &dir.join("ckpt_final.ckpt"))?;
    }
    Ok(state)
}

fn upscale_fine(phase: &mut SdfPhase, cfg: &TrainConfig) -> Result<()> {
    let dims = [cfg.fine_dims_final; 3];
    let sdf = phase.field.sdf.upscale_trilinear(dims)?;
    let feat = phase.field.feat.upscale_trilinear(dims)?;
    phase.field = SceneField::new(sdf, feat, cfg.kernel()?);
    phase.sdf_grad = vec![0.0; phase.field.sdf.len()];
    phase.feat_grad = vec![0.0; phase.field.feat.len()];
    // moment estimates do not transfer across resolutions
    phase.adam = AdamState::new();
    phase.upscaled = true;
    Ok(())
}

/// Stage boundary: serialize, reload, build the next stage from the
/// reloaded state. The round-trip makes uninterrupted and resumed runs
/// bit-identical (grid values pass through the checkpoint's f32 encoding
/// either way).
fn advance_stage(
    state: PipelineState,
    dataset: &Dataset,
    opts: &RunOptions,
) -> Result<PipelineState> {
    let boundary_name = format!("ckpt_{}_done.ckpt", state.stage.name());
    let reloaded = match &opts.out_dir {
        Some(dir) => {
            let path = dir.join(boundary_name);
            save_checkpoint(&state, &path)?;
            load_checkpoint(&path)?
        }
        None => {
            let bytes = save_checkpoint_bytes(&state)?;
            load_checkpoint_bytes(&bytes)?
        }
    };
    let mut next = reloaded;
    match next.stage {
        Stage::Search => {
            let Phase::Search(phase) = &next.phase else {
                return Err(Error::Checkpoint("search stage with SDF payload".into()));
            };
            let (bbox, occupancy) = search_result(phase, &next.cfg, dataset)?;
            let sdf_phase = build_coarse(&next, bbox, occupancy)?;
            next.phase = Phase::Sdf(sdf_phase);
            next.stage = Stage::Coarse;
        }
        Stage::Coarse => {
            let Phase::Sdf(phase) = &next.phase else {
                return Err(Error::Checkpoint("coarse stage with search payload".into()));
            };
            let fine = build_fine(&next, phase)?;
            next.phase = Phase::Sdf(fine);
            next.stage = Stage::Fine;
        }
        Stage::Fine => {
            next.stage = Stage::Done;
        }
        Stage::Done => {}
    }
    next.iter = 0;
    next.epoch = 0;
    next.batch_pos = 0;
    Ok(next)
}

/// Render a full view through the current model (forward only).
pub fn render_view(
    state: &PipelineState,
    camera: &Camera,
    near: f64,
    far: f64,
    threads: usize,
) -> Result<ImageBuf> {
    let Phase::Sdf(phase) = &state.phase else {
        return Err(Error::Config(
            "rendering requires a coarse- or fine-stage checkpoint".into(),
        ));
    };
    let pool = make_pool(threads);
    let mut field = phase.field.clone();
    if state.smoothed_queries() && field.smoothed.is_none() {
        field.refresh_smoothed();
    }
    let mut pixels = Vec::with_capacity(camera.width * camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            pixels.push((x as u32, y as u32));
        }
    }
    let (origins, dirs) = crate::render::generate_rays(camera, &pixels)?;
    let colors = render_rays(
        &field,
        &phase.color,
        &phase.occupancy,
        &state.cfg,
        state.geo_spec(),
        state.smoothed_queries(),
        state.kappa(),
        near,
        far,
        &origins,
        &dirs,
        pool.as_ref(),
    )?;
    let mut img = ImageBuf::new(camera.width, camera.height);
    for (i, c) in colors.into_iter().enumerate() {
        let (x, y) = (i % camera.width, i / camera.width);
        img.set_pixel(x, y, c);
    }
    Ok(img)
}

/// The SDF grid of a trained (or in-progress) model, for extraction.
pub fn extraction_grid(state: &PipelineState) -> Result<&DenseGrid> {
    match &state.phase {
        Phase::Sdf(p) => Ok(&p.field.sdf),
        Phase::Search(_) => Err(Error::Config(
            "mesh extraction requires a coarse- or fine-stage checkpoint".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::toy().validate().unwrap();
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<TrainConfig>("{\"not_a_key\": 1}").unwrap_err();
        assert!(err.to_string().contains("not_a_key"));
    }

    #[test]
    fn config_partial_file_fills_defaults() {
        let cfg: TrainConfig = serde_json::from_str("{\"batch_rays\": 64}").unwrap();
        assert_eq!(cfg.batch_rays, 64);
        assert_eq!(cfg.coarse_dims, TrainConfig::default().coarse_dims);
    }

    #[test]
    fn ellipsoid_signs_and_zero_level() {
        let bbox = Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0));
        let g = init_sdf_ellipsoid(bbox, [33; 3]).unwrap();
        // center is inside
        assert!(g.interp1(bbox.center(), false).unwrap() < 0.0);
        // every corner is outside
        for corner in [
            bbox.min,
            bbox.max,
            Vec3::new(bbox.min.x, bbox.min.y, bbox.max.z),
            Vec3::new(bbox.min.x, bbox.max.y, bbox.min.z),
            Vec3::new(bbox.max.x, bbox.min.y, bbox.min.z),
        ] {
            assert!(g.interp1(corner, false).unwrap() > 0.0, "{corner:?}");
        }
        // points on the analytic ellipsoid interpolate near zero
        let a = 0.9;
        let mut rng = derived_rng(3, "ellipsoid_test");
        use rand::Rng;
        for _ in 0..200 {
            let v = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalized();
            let p = v * a;
            let d = g.interp1(p, true).unwrap();
            assert!(d.abs() < g.voxel_size(), "d={d}");
        }
    }

    #[test]
    fn recon_loss_examples() {
        let gt = vec![Vec3::ZERO];
        let c = vec![Vec3::new(1.0, 0.0, 0.0)];
        let c0 = vec![Vec3::ZERO];
        assert_eq!(recon_loss(&c, Some(&c0), &gt, 0.5), 1.0);
        assert_eq!(recon_loss(&gt, Some(&gt), &gt, 0.5), 0.0);
        // lambda0 = 0 reduces to plain MSE of the main prediction
        let c0b = vec![Vec3::new(9.0, 9.0, 9.0)];
        assert_eq!(recon_loss(&c, Some(&c0b), &gt, 0.0), 1.0);
    }

    #[test]
    fn stage_codes_roundtrip() {
        for s in [Stage::Search, Stage::Coarse, Stage::Fine, Stage::Done] {
            assert_eq!(Stage::from_code(s.code()).unwrap(), s);
        }
        assert!(Stage::from_code(9).is_err());
    }
}
