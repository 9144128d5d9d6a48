//! `splatloc`: build Gaussian splat maps from posed images and localize
//! query images against them.

mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use splatloc::geom::{pose_error, Pose};
use splatloc::harness::{
    cloud_from_map, query_ring_views, run_benchmark, synth_scene, write_report, BenchmarkMode,
    BenchmarkQuery, PerturbationSpec, Thresholds,
};
use splatloc::img::{ImageGray, ImageRgb};
use splatloc::localize::{build_database, localize, refine_pose, RefineQuery};
use splatloc::mapping::dataset::{load_dataset, save_dataset, NamedView};
use splatloc::mapping::{train_map, write_train_log, OracleDepthEstimator};
use splatloc::splat::{init_from_points, load_map, save_map, ColoredPointCloud};

use config::FileConfig;

#[derive(Parser)]
#[command(name = "splatloc", version, about = "Gaussian splat mapping and visual localization")]
struct Cli {
    /// TOML configuration file (see configs/example.toml).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = automatic).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Zero out wall-clock fields in outputs, making reruns byte-identical.
    #[arg(long, global = true)]
    no_timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: ground-truth map, training dataset,
    /// held-out query dataset, and a seed point cloud.
    SynthScene(SynthSceneArgs),
    /// Train a Gaussian map from a dataset directory.
    BuildMap(BuildMapArgs),
    /// Render color, depth, and occupancy images from a map at a pose.
    Render(RenderArgs),
    /// Refine a pose estimate against a map by photometric alignment.
    RefinePose(RefinePoseArgs),
    /// Localize a query image: retrieval, PnP-RANSAC, then refinement.
    Localize(LocalizeArgs),
    /// Run a localization benchmark over a query dataset.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct SynthSceneArgs {
    /// Held-out query views to generate alongside the training views.
    #[arg(long, default_value_t = 16)]
    queries: usize,
}

#[derive(Args)]
struct BuildMapArgs {
    /// Dataset directory (images/, poses.json, intrinsics.json).
    #[arg(long)]
    dataset: PathBuf,
    /// Seed point cloud (ASCII PLY or 6-column text). Defaults to
    /// `<dataset>/cloud.txt`, then `<dataset>/../cloud.txt`.
    #[arg(long)]
    cloud: Option<PathBuf>,
    /// Training iterations (overrides the config value).
    #[arg(long)]
    iterations: Option<u32>,
    /// Map whose rendered depth serves as the pseudo-view depth estimator.
    #[arg(long)]
    oracle_estimator: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Map file (.ply).
    #[arg(long)]
    map: PathBuf,
    /// Pose file: JSON {"q": [w,x,y,z], "t": [x,y,z]} or a 4x4 row-major
    /// matrix text file.
    #[arg(long)]
    pose: PathBuf,
    /// Dataset directory providing the camera intrinsics.
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args)]
struct RefinePoseArgs {
    #[arg(long)]
    map: PathBuf,
    /// Query image (PNG).
    #[arg(long)]
    image: PathBuf,
    /// Optional query depth (.f32).
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Initial pose file.
    #[arg(long)]
    init: PathBuf,
    /// Dataset directory providing the camera intrinsics.
    #[arg(long)]
    dataset: PathBuf,
    /// Optional ground-truth pose; errors are reported when given.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Database dataset directory (posed images the map was built from).
    #[arg(long)]
    database: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum BenchmarkModeArg {
    RefineOnly,
    FullPipeline,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PerturbArg {
    /// Translation up to 0.1 x scene scale, rotation up to 20 degrees.
    Small,
    /// Translation 0.1-0.2 x scene scale, rotation 20-40 degrees.
    Middle,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    map: PathBuf,
    /// Query dataset directory (images + ground-truth poses).
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, value_enum, default_value_t = BenchmarkModeArg::RefineOnly)]
    mode: BenchmarkModeArg,
    /// Database dataset directory, required for full-pipeline mode.
    #[arg(long)]
    database: Option<PathBuf>,
    /// Perturbation protocol for refine-only mode.
    #[arg(long, value_enum, default_value_t = PerturbArg::Small)]
    perturb: PerturbArg,
    /// Translation success threshold in scene units
    /// (default 0.05 x scene scale).
    #[arg(long)]
    tau_t: Option<f64>,
    /// Rotation success threshold in degrees.
    #[arg(long, default_value_t = 5.0)]
    tau_r: f64,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let config = FileConfig::load(cli.config.as_deref())?;
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating output directory {}", cli.out.display()))?;

    match &cli.command {
        Command::SynthScene(args) => cmd_synth_scene(&cli, &config, args),
        Command::BuildMap(args) => cmd_build_map(&cli, &config, args),
        Command::Render(args) => cmd_render(&cli, args),
        Command::RefinePose(args) => cmd_refine_pose(&cli, &config, args),
        Command::Localize(args) => cmd_localize(&cli, &config, args),
        Command::Benchmark(args) => cmd_benchmark(&cli, &config, args),
    }
}

fn load_pose(path: &Path) -> anyhow::Result<Pose> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading pose {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{') {
        serde_json::from_str(&text).with_context(|| format!("parsing pose JSON {}", path.display()))
    } else {
        Ok(Pose::from_matrix_text(&text)?)
    }
}

fn cmd_synth_scene(cli: &Cli, config: &FileConfig, args: &SynthSceneArgs) -> anyhow::Result<()> {
    let mut spec = config.scene();
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let (map, views) = synth_scene(&spec)?;
    let k = spec.intrinsics();

    let named: Vec<NamedView> = views
        .into_iter()
        .enumerate()
        .map(|(i, view)| NamedView {
            name: format!("view_{i:03}"),
            view,
        })
        .collect();
    save_dataset(&cli.out.join("dataset"), &named, &k)?;

    // Held-out queries: a jittered ring offset from the training cameras.
    let query_views: Vec<NamedView> = query_ring_views(&map, &spec, args.queries)?
        .into_iter()
        .enumerate()
        .map(|(i, view)| NamedView {
            name: format!("query_{i:03}"),
            view,
        })
        .collect();
    if !query_views.is_empty() {
        save_dataset(&cli.out.join("queries"), &query_views, &k)?;
    }

    save_map(&map, &cli.out.join("map_gt.ply"))?;
    let cloud = cloud_from_map(&map);
    let mut cloud_text = String::new();
    for (p, c) in &cloud.points {
        cloud_text.push_str(&format!("{} {} {} {} {} {}\n", p.x, p.y, p.z, c[0], c[1], c[2]));
    }
    std::fs::write(cli.out.join("cloud.txt"), cloud_text)?;
    println!(
        "scene: {} primitives, {} training views, {} queries -> {}",
        map.len(),
        named.len(),
        query_views.len(),
        cli.out.display()
    );
    Ok(())
}

fn cmd_build_map(cli: &Cli, config: &FileConfig, args: &BuildMapArgs) -> anyhow::Result<()> {
    let (named, _) = load_dataset(&args.dataset)?;
    let views: Vec<_> = named.iter().map(|nv| nv.view.clone()).collect();

    let cloud_path = match &args.cloud {
        Some(p) => p.clone(),
        None => {
            let local = args.dataset.join("cloud.txt");
            let sibling = args.dataset.join("..").join("cloud.txt");
            if local.is_file() {
                local
            } else if sibling.is_file() {
                sibling
            } else {
                bail!(
                    "no seed cloud found; pass --cloud or place cloud.txt next to the dataset"
                );
            }
        }
    };
    let cloud = ColoredPointCloud::load(&cloud_path)?;
    let poses: Vec<Pose> = views.iter().map(|v| v.pose).collect();
    let initial = init_from_points(&cloud, &poses)?;

    let mut train = config.train();
    if let Some(seed) = cli.seed {
        train.seed = seed;
    }
    if let Some(iterations) = args.iterations {
        train.iterations = iterations;
    }

    let oracle = args
        .oracle_estimator
        .as_ref()
        .map(|p| -> anyhow::Result<OracleDepthEstimator> {
            Ok(OracleDepthEstimator {
                reference: load_map(p)?,
            })
        })
        .transpose()?;
    let estimator = oracle
        .as_ref()
        .map(|o| o as &dyn splatloc::mapping::DepthEstimator);

    let started = Instant::now();
    let (map, log) = train_map(&views, &initial, estimator, &train)?;
    let elapsed = started.elapsed().as_secs_f64();

    save_map(&map, &cli.out.join("map.ply"))?;
    write_train_log(&log, &cli.out.join("train_log.csv"))?;
    let final_loss = log.last().map_or(0.0, |r| r.total);
    println!(
        "trained {} iterations on {} views: {} primitives, final loss {:.5}{}",
        train.iterations,
        views.len(),
        map.len(),
        final_loss,
        if cli.no_timing {
            String::new()
        } else {
            format!(", {elapsed:.1}s")
        }
    );
    Ok(())
}

fn cmd_render(cli: &Cli, args: &RenderArgs) -> anyhow::Result<()> {
    let map = load_map(&args.map)?;
    let (_, k) = load_dataset(&args.dataset)?;
    let pose = load_pose(&args.pose)?;
    let out = splatloc::render::rasterize(&map, &pose, &k)?;
    out.color.save_png(&cli.out.join("render.png"))?;
    out.depth.save_f32(&cli.out.join("render_depth.f32"))?;
    out.occupancy.save_f32(&cli.out.join("render_occupancy.f32"))?;
    println!("rendered {}x{} -> {}", k.width, k.height, cli.out.display());
    Ok(())
}

#[derive(Serialize)]
struct RefineRecord {
    initial_pose: Pose,
    refined_pose: Pose,
    iterations: u32,
    final_objective: f64,
    masked_pixel_count: usize,
    timing_ms: f64,
    initial_error: Option<splatloc::geom::PoseError>,
    refined_error: Option<splatloc::geom::PoseError>,
}

fn cmd_refine_pose(cli: &Cli, config: &FileConfig, args: &RefinePoseArgs) -> anyhow::Result<()> {
    let map = load_map(&args.map)?;
    let (_, k) = load_dataset(&args.dataset)?;
    let image = ImageRgb::load_png(&args.image)?;
    let depth = args.depth.as_ref().map(|p| ImageGray::load_f32(p)).transpose()?;
    let initial = load_pose(&args.init)?;
    let gt = args.gt.as_ref().map(|p| load_pose(p)).transpose()?;

    let started = Instant::now();
    let (pose, diag) = refine_pose(
        &RefineQuery {
            image: &image,
            depth: depth.as_ref(),
        },
        &map,
        &initial,
        &k,
        &config.refine(),
    )?;
    let timing_ms = if cli.no_timing {
        0.0
    } else {
        started.elapsed().as_secs_f64() * 1e3
    };

    let record = RefineRecord {
        initial_pose: initial,
        refined_pose: pose,
        iterations: diag.iterations,
        final_objective: diag.final_objective,
        masked_pixel_count: diag.masked_pixels,
        timing_ms,
        initial_error: gt.map(|g| pose_error(&initial, &g)),
        refined_error: gt.map(|g| pose_error(&pose, &g)),
    };
    let path = cli.out.join("refine.json");
    std::fs::write(&path, serde_json::to_string_pretty(&record)?)?;
    println!(
        "refined in {} iterations, objective {:.6} -> {}",
        diag.iterations,
        diag.final_objective,
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct LocalizeRecord {
    coarse_pose: Pose,
    fine_pose: Pose,
    iterations: u32,
    final_objective: f64,
    masked_pixel_count: usize,
    timing_ms: f64,
}

fn cmd_localize(cli: &Cli, config: &FileConfig, args: &LocalizeArgs) -> anyhow::Result<()> {
    let map = load_map(&args.map)?;
    let (named, k) = load_dataset(&args.database)?;
    let mut localize_config = config.localize();
    if let Some(seed) = cli.seed {
        localize_config.pnp.seed = seed;
    }
    let db_views: Vec<(u32, ImageRgb, Pose)> = named
        .iter()
        .enumerate()
        .map(|(i, nv)| (i as u32, nv.view.image.clone(), nv.view.pose))
        .collect();
    let depths: Vec<Option<ImageGray>> = named.iter().map(|nv| nv.view.gt_depth.clone()).collect();
    let db = build_database(&db_views, &depths, &map, &k, &localize_config)?;

    let image = ImageRgb::load_png(&args.image)?;
    let depth = args.depth.as_ref().map(|p| ImageGray::load_f32(p)).transpose()?;

    let started = Instant::now();
    let (pose, diag) = localize(
        &RefineQuery {
            image: &image,
            depth: depth.as_ref(),
        },
        &map,
        &db,
        &localize_config,
        &config.refine(),
    )?;
    let timing_ms = if cli.no_timing {
        0.0
    } else {
        started.elapsed().as_secs_f64() * 1e3
    };

    let record = LocalizeRecord {
        coarse_pose: diag.coarse_pose,
        fine_pose: pose,
        iterations: diag.refine.iterations,
        final_objective: diag.refine.final_objective,
        masked_pixel_count: diag.refine.masked_pixels,
        timing_ms,
    };
    let path = cli.out.join("localize.json");
    std::fs::write(&path, serde_json::to_string_pretty(&record)?)?;
    println!(
        "localized via cluster {} with {} inliers -> {}",
        diag.winning_cluster,
        diag.pnp_inliers,
        path.display()
    );
    Ok(())
}

fn cmd_benchmark(cli: &Cli, config: &FileConfig, args: &BenchmarkArgs) -> anyhow::Result<()> {
    let map = load_map(&args.map)?;
    let (named, k) = load_dataset(&args.queries)?;
    let seed = cli.seed.unwrap_or(0);

    let queries: Vec<BenchmarkQuery> = named
        .iter()
        .enumerate()
        .map(|(i, nv)| BenchmarkQuery {
            id: i as u32,
            image: nv.view.image.clone(),
            depth: nv.view.gt_depth.clone(),
            gt_pose: nv.view.pose,
        })
        .collect();

    let thresholds = Thresholds {
        translation: args.tau_t.unwrap_or(0.05 * map.scene_scale),
        rotation_deg: args.tau_r,
    };

    let mut localize_config = config.localize();
    localize_config.pnp.seed = seed;

    let report = match args.mode {
        BenchmarkModeArg::RefineOnly => {
            let spec = match args.perturb {
                PerturbArg::Small => PerturbationSpec::small(map.scene_scale, seed),
                PerturbArg::Middle => PerturbationSpec::middle(map.scene_scale, seed),
            };
            run_benchmark(
                &map,
                &queries,
                &BenchmarkMode::RefineOnly {
                    translation_range: spec.translation_range,
                    rotation_range_deg: spec.rotation_range_deg,
                },
                &k,
                thresholds,
                &config.refine(),
                seed,
            )?
        }
        BenchmarkModeArg::FullPipeline => {
            let Some(database_dir) = &args.database else {
                bail!("--database is required for full-pipeline mode");
            };
            let (db_named, db_k) = load_dataset(database_dir)?;
            let db_views: Vec<(u32, ImageRgb, Pose)> = db_named
                .iter()
                .enumerate()
                .map(|(i, nv)| (i as u32, nv.view.image.clone(), nv.view.pose))
                .collect();
            let depths: Vec<Option<ImageGray>> =
                db_named.iter().map(|nv| nv.view.gt_depth.clone()).collect();
            let db = build_database(&db_views, &depths, &map, &db_k, &localize_config)?;
            run_benchmark(
                &map,
                &queries,
                &BenchmarkMode::FullPipeline {
                    db: &db,
                    config: &localize_config,
                },
                &k,
                thresholds,
                &config.refine(),
                seed,
            )?
        }
    };

    write_report(&report, &cli.out, !cli.no_timing)?;
    println!(
        "benchmark: {} queries, success {:.1}%, median error {}/{}° -> {}",
        report.queries,
        100.0 * report.success_rate,
        report
            .median_translation_err
            .map_or("n/a".to_string(), |v| format!("{v:.4}")),
        report
            .median_rotation_err
            .map_or("n/a".to_string(), |v| format!("{v:.3}")),
        cli.out.display()
    );
    Ok(())
}
