use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use focal_nerf::exec::Execution;
use focal_nerf::partition::BlockAssignment;
use focal_nerf::scene::SceneConfig;
use focal_nerf::trainer::{
    block_error_maps, block_field, evaluate, load_config, load_focal_set, partition_cameras, render_view, save_config,
    train_focal, train_global, Dataset, GlobalModel, RunPaths, TrainConfig,
};

#[derive(Parser)]
#[command(name = "focal-nerf", version, about = "Two-stage hash-grid radiance fields on synthetic blob scenes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run directory holding the dataset, checkpoints and reports.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Overrides the seed of the scene and of training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat TOML file with training settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single-threaded execution with a fixed reduction order.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-district blob scene, its cameras and ground truth.
    GenScene {
        #[arg(long, default_value_t = 64)]
        width: u32,
        #[arg(long, default_value_t = 64)]
        height: u32,
    },
    /// Train octree, global encoder and decoder on every training view.
    TrainGlobal,
    /// Train the residual encoder of one block, or of every block.
    TrainFocal {
        #[arg(long, conflicts_with = "all", required_unless_present = "all")]
        block: Option<usize>,
        #[arg(long)]
        all: bool,
    },
    /// Render one camera with its nearest block.
    Render {
        #[arg(long)]
        camera: usize,
        #[arg(long)]
        global_only: bool,
    },
    /// Score every test view and write metrics.json.
    Eval {
        #[arg(long)]
        global_only: bool,
    },
    /// Dump the per-pixel error maps that drive weighted sampling.
    ErrorMaps {
        /// Use this block's fused model instead of the global model.
        #[arg(long)]
        block: Option<usize>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn resolve_config(common: &Common) -> Result<TrainConfig> {
    let saved = RunPaths::new(&common.run_dir).config();
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None if saved.exists() => load_config(&saved)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.deterministic && cfg.grad_shards == 0 {
        cfg.grad_shards = 1;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_assignment(run: &RunPaths) -> Result<BlockAssignment> {
    BlockAssignment::load(&run.blocks()).with_context(|| "no blocks.json; run train-global first")
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let exec = if common.deterministic {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let dir = &common.run_dir;
    let run = RunPaths::new(dir);
    match cli.command {
        Command::GenScene { width, height } => {
            let mut scene = SceneConfig {
                width,
                height,
                ..SceneConfig::default()
            };
            if let Some(seed) = common.seed {
                scene.seed = seed;
            }
            let ds = Dataset::generate(&scene, exec)?;
            ds.save(dir)?;
            info!(
                "wrote {} cameras ({} train, {} test) to {}",
                ds.cameras.len(),
                ds.train.len(),
                ds.test.len(),
                dir.display()
            );
        }
        Command::TrainGlobal => {
            let cfg = resolve_config(common)?;
            let ds = Dataset::load(dir)?;
            save_config(&run.config(), &cfg)?;
            let (model, log) = train_global(&ds, &cfg, exec)?;
            model.save(dir)?;
            let blocks = partition_cameras(&ds, &cfg)?;
            blocks.save(&run.blocks())?;
            info!(
                "global stage done: final loss {:.5}, {} live leaves, {} blocks of sizes {:?}",
                log.losses.last().copied().unwrap_or(f64::NAN),
                model.octree.live_leaf_count(),
                blocks.k,
                blocks.sizes()
            );
        }
        Command::TrainFocal { block, all } => {
            let cfg = resolve_config(common)?;
            let ds = Dataset::load(dir)?;
            let global = GlobalModel::load(dir)?;
            let blocks = load_assignment(&run)?;
            let ids: Vec<usize> = if all { (0..blocks.k).collect() } else { block.into_iter().collect() };
            for b in ids {
                if b >= blocks.k {
                    bail!("block {b} out of range: assignment has {} blocks", blocks.k);
                }
                let (enc, log) = train_focal(&global, &ds, &blocks, b, &cfg, exec)?;
                enc.save(&run.focal_encoder(b))?;
                info!(
                    "block {b}: final loss {:.5}",
                    log.losses.last().copied().unwrap_or(f64::NAN)
                );
            }
        }
        Command::Render { camera, global_only } => {
            let cfg = resolve_config(common)?;
            let ds = Dataset::load(dir)?;
            let cam = ds
                .cameras
                .get(camera)
                .with_context(|| format!("camera {camera} not in dataset of {}", ds.cameras.len()))?;
            let global = GlobalModel::load(dir)?;
            let out = dir.join("renders");
            let (rgb, depth, used) = if global_only {
                render_view(&global, None, cam, &cfg, ds.scene.background, exec)?
            } else {
                let blocks = load_assignment(&run)?;
                let set = load_focal_set(dir, blocks.k)?;
                render_view(&global, Some((&set, &blocks)), cam, &cfg, ds.scene.background, exec)?
            };
            write_render(&out, camera, &rgb, &depth)?;
            match used {
                Some(b) => info!("rendered camera {camera} with block {b}"),
                None => info!("rendered camera {camera} with the global model"),
            }
        }
        Command::Eval { global_only } => {
            let cfg = resolve_config(common)?;
            let ds = Dataset::load(dir)?;
            let global = GlobalModel::load(dir)?;
            let out = dir.join("eval");
            let report = if global_only {
                evaluate(&global, None, &ds, &cfg, exec, Some(&out))?
            } else {
                let blocks = load_assignment(&run)?;
                let set = load_focal_set(dir, blocks.k)?;
                evaluate(&global, Some((&set, &blocks)), &ds, &cfg, exec, Some(&out))?
            };
            report.save(&run.metrics())?;
            info!(
                "{} test views: PSNR {:.3} dB, SSIM {:.4} (run {})",
                report.count, report.mean_psnr, report.mean_ssim, report.run_id
            );
        }
        Command::ErrorMaps { block } => {
            let cfg = resolve_config(common)?;
            let ds = Dataset::load(dir)?;
            let global = GlobalModel::load(dir)?;
            let out = dir.join("error_maps");
            std::fs::create_dir_all(&out)?;
            let (maps, ids) = match block {
                Some(b) => {
                    let blocks = load_assignment(&run)?;
                    let ids = focal_nerf::trainer::block_views(&blocks, b)?;
                    let enc = focal_nerf::encoder::HashEncoder::load(&run.focal_encoder(b))?;
                    let field = block_field(&global, &enc, cfg.focal_from_scratch)?;
                    (block_error_maps(&field, &ds, &ids, &cfg, exec)?, ids)
                }
                None => (block_error_maps(&global.field(None)?, &ds, &ds.train, &cfg, exec)?, ds.train.clone()),
            };
            for m in &maps.maps {
                let max = m.low.data.iter().cloned().fold(0.0f32, f32::max);
                let stem = format!("error_{:03}", m.image_id);
                m.low.write_sidecar(&out.join(format!("{stem}.f32")))?;
                m.low.heatmap(max).write_png(&out.join(format!("{stem}.png")))?;
            }
            info!("wrote {} error maps to {}", ids.len(), out.display());
        }
    }
    Ok(())
}

fn write_render(
    out: &Path,
    camera: usize,
    rgb: &focal_nerf::image::Image,
    depth: &focal_nerf::image::Image,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    rgb.save(out, &format!("camera_{camera:03}"))?;
    let max = depth.data.iter().cloned().fold(0.0f32, f32::max);
    depth.write_sidecar(&out.join(format!("depth_{camera:03}.f32")))?;
    depth.heatmap(max).write_png(&out.join(format!("depth_{camera:03}.png")))?;
    Ok(())
}
