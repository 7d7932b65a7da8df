//! Command-line pipeline: synthetic data generation, training, rendering,
//! mesh extraction, and evaluation.
//!
//! Machine-readable results go to stdout as JSON; progress and logs go to
//! stderr. Exit code 0 on success, 1 on runtime failure (with a one-line
//! diagnostic), 2 on bad flags.

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};
use voxurf::dataio::{load_dataset, make_synthetic, Dataset, SyntheticConfig, SyntheticScene};
use voxurf::mesh::{
    chamfer, marching_cubes, read_points, sample_mesh_points, write_obj, write_ply_mesh,
    TriangleMesh,
};
use voxurf::math::Vec3;
use voxurf::trainer::{
    extraction_grid, load_checkpoint, render_view, run_pipeline, PipelineState, RunOptions,
    TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "voxurf",
    about = "Voxel-grid SDF reconstruction from posed multi-view images",
    version
)]
struct Cli {
    /// Worker threads; 1 gives a bit-deterministic run
    #[arg(long, global = true, env = "VOXURF_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic scene dataset (images, masks, manifest, ground truth)
    MakeSynthetic(MakeSyntheticArgs),
    /// Run the full training pipeline on a dataset
    Train(TrainArgs),
    /// Render dataset views from a trained checkpoint to PNG
    Render(RenderArgs),
    /// Extract a triangle mesh from a checkpoint's SDF grid
    ExtractMesh(ExtractArgs),
    /// Chamfer distance of a mesh against a ground-truth point cloud
    EvalMesh(EvalMeshArgs),
    /// PSNR/SSIM of rendered views against the dataset images
    EvalImages(EvalImagesArgs),
}

#[derive(Args)]
struct MakeSyntheticArgs {
    /// Scene preset: sphere | torus | box | duo
    #[arg(long, default_value = "sphere")]
    scene: String,
    #[arg(long, default_value_t = 20)]
    views: usize,
    /// Square image side in pixels
    #[arg(long, default_value_t = 200)]
    size: usize,
    #[arg(long, default_value_t = 2.5)]
    ring_radius: f64,
    #[arg(long, default_value_t = 45.0)]
    fov_deg: f64,
    /// Ground-truth surface samples written to points_gt.ply
    #[arg(long, default_value_t = 100_000)]
    gt_points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (JSON)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, metrics and the config snapshot
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; missing keys take preset defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: paper | toy
    #[arg(long, default_value = "paper")]
    preset: String,
    /// Resume from a checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Config overrides as key=value (JSON values accepted)
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest providing the cameras
    #[arg(long)]
    data: PathBuf,
    /// Views to render: comma-separated indices, or train|test|all
    #[arg(long, default_value = "test")]
    views: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output mesh path (.obj or .ply decides the format)
    #[arg(long)]
    out: PathBuf,
    /// Iso level of the extracted surface
    #[arg(long, default_value_t = 0.0)]
    iso: f64,
    /// Gaussian-smooth the grid with the training kernel before extraction
    #[arg(long, default_value_t = false)]
    presmooth: bool,
    /// Upscale the SDF grid to this resolution (nodes per axis) first
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args)]
struct EvalMeshArgs {
    /// Mesh to evaluate (ASCII OBJ); alternative to --checkpoint
    #[arg(long, conflicts_with = "checkpoint")]
    mesh: Option<PathBuf>,
    /// Extract the mesh from this checkpoint instead
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Ground-truth point cloud (.ply or .xyz)
    #[arg(long)]
    gt: PathBuf,
    /// Surface samples drawn from the mesh
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    iso: f64,
    #[arg(long, default_value_t = false)]
    presmooth: bool,
}

#[derive(Args)]
struct EvalImagesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which views to evaluate: train | test | all
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write the rendered images to this directory
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    // `train --help` must enumerate every config key
    let keys_help = config_keys_help();
    let cmd = Cli::command().mut_subcommand("train", |c| c.after_help(keys_help));
    let matches = cmd.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Err(e) = run(cli, &matches) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn config_keys_help() -> String {
    let defaults = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    let mut out = String::from("Config keys (override with KEY=VALUE):\n");
    if let serde_json::Value::Object(map) = defaults {
        for (k, v) in map {
            out.push_str(&format!("  {k} (default {v})\n"));
        }
    }
    out
}

fn threads_of(cli: &Cli) -> usize {
    cli.threads.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    })
}

fn run(cli: Cli, matches: &ArgMatches) -> Result<()> {
    let threads = threads_of(&cli);
    match cli.cmd {
        Cmd::MakeSynthetic(args) => cmd_make_synthetic(args),
        Cmd::Train(args) => cmd_train(args, threads, matches),
        Cmd::Render(args) => cmd_render(args, threads),
        Cmd::ExtractMesh(args) => cmd_extract(args),
        Cmd::EvalMesh(args) => cmd_eval_mesh(args),
        Cmd::EvalImages(args) => cmd_eval_images(args, threads),
    }
}

fn cmd_make_synthetic(args: MakeSyntheticArgs) -> Result<()> {
    let scene = SyntheticScene::preset(&args.scene)?;
    let cfg = SyntheticConfig {
        n_views: args.views,
        width: args.size,
        height: args.size,
        ring_radius: args.ring_radius,
        fov_deg: args.fov_deg,
        gt_points: args.gt_points,
        seed: args.seed,
        ..Default::default()
    };
    let manifest = make_synthetic(&scene, &cfg, &args.out)
        .with_context(|| format!("generating {}", args.out.display()))?;
    std::fs::write(
        args.out.join("resolved_config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    eprintln!("wrote {} views to {}", args.views, args.out.display());
    println!(
        "{}",
        serde_json::json!({
            "manifest": manifest,
            "views": args.views,
            "gt_points": args.gt_points,
        })
    );
    Ok(())
}

fn resolve_config(args: &TrainArgs) -> Result<TrainConfig> {
    let base = match args.preset.as_str() {
        "paper" => TrainConfig::default(),
        "toy" => TrainConfig::toy(),
        other => bail!("unknown preset `{other}` (expected paper|toy)"),
    };
    let mut value = serde_json::to_value(&base)?;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let file_value: serde_json::Value = serde_json::from_str(&text)?;
        let obj = value.as_object_mut().unwrap();
        let serde_json::Value::Object(file_obj) = file_value else {
            bail!("config file must be a JSON object");
        };
        for (k, v) in file_obj {
            obj.insert(k, v);
        }
    }
    for ov in &args.overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{ov}` is not KEY=VALUE"))?;
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        // dotted keys address nested values; the config is flat today but
        // the syntax stays forward-compatible
        let parts: Vec<&str> = key.split('.').collect();
        set_path(&mut value, &parts, parsed).with_context(|| format!("override `{key}`"))?;
    }
    let cfg: TrainConfig =
        serde_json::from_value(value).context("invalid configuration (unknown key or bad type)")?;
    cfg.validate()?;
    Ok(cfg)
}

fn set_path(value: &mut serde_json::Value, parts: &[&str], v: serde_json::Value) -> Result<()> {
    let obj = value
        .as_object_mut()
        .ok_or_else(|| anyhow!("`{}` is not an object", parts[0]))?;
    if parts.len() == 1 {
        obj.insert(parts[0].to_string(), v);
        return Ok(());
    }
    let slot = obj
        .entry(parts[0].to_string())
        .or_insert_with(|| serde_json::Value::Object(Default::default()));
    set_path(slot, &parts[1..], v)
}

fn cmd_train(args: TrainArgs, threads: usize, _matches: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(&args)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("resolved_config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    let dataset = load_dataset(&args.data)?;
    eprintln!(
        "training on {} views ({} train / {} test), {} threads",
        dataset.views.len(),
        dataset.train_indices.len(),
        dataset.test_indices.len(),
        threads
    );
    let metrics_path = args.out.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let started = std::time::Instant::now();
    let opts = RunOptions {
        threads,
        out_dir: Some(args.out.clone()),
        resume: args.resume.clone(),
    };
    let state = run_pipeline(&dataset, cfg, &opts, &mut metrics)?;
    metrics.flush()?;
    let elapsed = started.elapsed().as_secs_f64();
    eprintln!("done in {elapsed:.1}s");
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": args.out.join("ckpt_final.ckpt"),
            "metrics": metrics_path,
            "wall_seconds": elapsed,
            "stage": state.stage.name(),
        })
    );
    Ok(())
}

fn parse_views(spec: &str, dataset: &Dataset) -> Result<Vec<usize>> {
    match spec {
        "all" => Ok((0..dataset.views.len()).collect()),
        "train" => Ok(dataset.train_indices.clone()),
        "test" => Ok(dataset.test_indices.clone()),
        list => list
            .split(',')
            .map(|t| {
                let idx: usize = t.trim().parse().context("view index")?;
                if idx >= dataset.views.len() {
                    bail!("view {idx} out of range ({} views)", dataset.views.len());
                }
                Ok(idx)
            })
            .collect(),
    }
}

fn cmd_render(args: RenderArgs, threads: usize) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    let views = parse_views(&args.views, &dataset)?;
    std::fs::create_dir_all(&args.out)?;
    let mut written = Vec::new();
    for vi in views {
        let view = &dataset.views[vi];
        let img = render_view(&state, &view.camera, dataset.near, dataset.far, threads)?;
        let path = args.out.join(format!("render_{vi:03}.png"));
        img.save_png(&path)?;
        eprintln!("rendered view {vi} -> {}", path.display());
        written.push(path);
    }
    println!(
        "{}",
        serde_json::json!({ "written": written, "checkpoint": args.checkpoint })
    );
    Ok(())
}

fn extract_mesh_from_state(
    state: &PipelineState,
    iso: f64,
    presmooth: bool,
    resolution: Option<usize>,
) -> Result<TriangleMesh> {
    let grid = extraction_grid(state)?;
    let upscaled;
    let grid = match resolution {
        Some(n) => {
            upscaled = grid.upscale_trilinear([n; 3])?;
            &upscaled
        }
        None => grid,
    };
    let kernel = state.cfg.kernel()?;
    let mesh = marching_cubes(grid, iso, presmooth.then_some(&kernel))?;
    Ok(mesh)
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint)?;
    let mesh = extract_mesh_from_state(&state, args.iso, args.presmooth, args.resolution)?;
    let ext = args
        .out
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    match ext.as_str() {
        "obj" => write_obj(&mesh, &args.out)?,
        "ply" => write_ply_mesh(&mesh, &args.out)?,
        other => bail!("unsupported mesh format `.{other}` (use .obj or .ply)"),
    }
    eprintln!(
        "extracted {} vertices / {} triangles -> {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        args.out.display()
    );
    println!(
        "{}",
        serde_json::json!({
            "out": args.out,
            "vertices": mesh.vertices.len(),
            "triangles": mesh.triangles.len(),
            "iso": args.iso,
            "presmooth": args.presmooth,
        })
    );
    Ok(())
}

fn read_obj_mesh(path: &Path) -> Result<TriangleMesh> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut mesh = TriangleMesh::default();
    for (ln, line) in text.lines().enumerate() {
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let mut coord = |what| {
                    toks.next()
                        .and_then(|t| t.parse::<f64>().ok())
                        .ok_or_else(|| anyhow!("{}:{}: bad {what}", path.display(), ln + 1))
                };
                let (x, y, z) = (coord("x")?, coord("y")?, coord("z")?);
                mesh.vertices.push(Vec3::new(x, y, z));
            }
            Some("f") => {
                let idx: Vec<u32> = toks
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or(t);
                        first
                            .parse::<u32>()
                            .map(|i| i - 1)
                            .map_err(|_| anyhow!("{}:{}: bad face index", path.display(), ln + 1))
                    })
                    .collect::<Result<_>>()?;
                // fan-triangulate polygons
                for i in 1..idx.len().saturating_sub(1) {
                    mesh.triangles.push([idx[0], idx[i], idx[i + 1]]);
                }
            }
            _ => {}
        }
    }
    if mesh.triangles.is_empty() {
        bail!("{}: no faces", path.display());
    }
    Ok(mesh)
}

fn cmd_eval_mesh(args: EvalMeshArgs) -> Result<()> {
    let mesh = match (&args.mesh, &args.checkpoint) {
        (Some(path), None) => read_obj_mesh(path)?,
        (None, Some(ckpt)) => {
            let state = load_checkpoint(ckpt)?;
            extract_mesh_from_state(&state, args.iso, args.presmooth, None)?
        }
        _ => bail!("provide exactly one of --mesh or --checkpoint"),
    };
    let gt = read_points(&args.gt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let samples = sample_mesh_points(&mesh, args.samples, &mut rng)?;
    let cd = chamfer(&samples, &gt)?;
    println!(
        "{}",
        serde_json::json!({
            "chamfer": cd,
            "mesh_samples": args.samples,
            "gt_points": gt.points.len(),
            "triangles": mesh.triangles.len(),
            "seed": args.seed,
        })
    );
    Ok(())
}

fn cmd_eval_images(args: EvalImagesArgs, threads: usize) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    let views = parse_views(&args.split, &dataset)?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
    }
    let mut per_view = Vec::new();
    let mut sum_psnr = 0.0;
    let mut sum_ssim = 0.0;
    for vi in views.iter().copied() {
        let view = &dataset.views[vi];
        let rendered = render_view(&state, &view.camera, dataset.near, dataset.far, threads)?;
        let psnr = voxurf::dataio::psnr(&rendered, &view.image)?;
        let ssim = voxurf::dataio::ssim(&rendered, &view.image)?;
        if let Some(dir) = &args.out {
            rendered.save_png(&dir.join(format!("render_{vi:03}.png")))?;
        }
        eprintln!("view {vi}: psnr {psnr:.2} ssim {ssim:.4}");
        sum_psnr += psnr;
        sum_ssim += ssim;
        per_view.push(serde_json::json!({ "view": vi, "psnr": psnr, "ssim": ssim }));
    }
    let n = views.len().max(1) as f64;
    println!(
        "{}",
        serde_json::json!({
            "split": args.split,
            "per_view": per_view,
            "mean_psnr": sum_psnr / n,
            "mean_ssim": sum_ssim / n,
        })
    );
    Ok(())
}
