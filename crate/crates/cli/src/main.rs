//! `nsm`: train, mesh, evaluate and merge neural semantic maps.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use nsm_core::config::{ConfigFile, Overrides, RunConfig};
use nsm_core::eval::{reconstruction_metrics, sample_surface, semantic_metrics, LabeledPoints, MetricReport};
use nsm_core::io::{read_labels, read_points, write_labels, write_points, write_sequence};
use nsm_core::merge::{merge_submaps, transform_mesh, MergeConfig, RigidTransform, Submap};
use nsm_core::mesh::{read_ply, write_ply};
use nsm_core::model::Mode;
use nsm_core::palette::Palette;
use nsm_core::pipeline::{load_scans, mesh_map, train_map};
use nsm_core::snapshot::{load_map, save_map, SnapshotMeta};
use nsm_core::suite::{run_suite, SuiteContext, SUITES};
use nsm_core::synth::{sample_visible_surface, synth_scans, SceneSpec};
use nsm_core::train::write_loss_csv;
use nsm_core::Error;

use manifest::{MergeManifest, RunManifest};

/// Default data root for relative paths in configuration files.
const DATA_ROOT_ENV: &str = "NSM_DATA_ROOT";

#[derive(Parser, Debug)]
#[command(name = "nsm", version, about = "Implicit semantic and panoptic mapping from LiDAR scans")]
struct Cli {
    /// Worker threads; 1 makes every output bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed of every random stream (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Allocate and train a map; writes map.nsm, loss.csv and the resolved config.
    Train {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Mapping mode (overrides the config file).
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Extract and label the mesh of a trained map; writes mesh.ply.
    Mesh {
        /// Trained map snapshot (map.nsm).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Marching-cubes cube size in meters.
        #[arg(long)]
        s_cube: Option<f64>,
        /// Label with `*-semantic` to drop instance ids from a panoptic map.
        #[arg(long)]
        mode: Option<Mode>,
        /// Configuration supplying mesh settings and the palette.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Keep triangles of dynamic classes.
        #[arg(long)]
        keep_dynamic: bool,
    },
    /// Compare a mesh against ground-truth points; writes metrics.csv.
    Eval {
        /// Labeled PLY mesh to evaluate.
        #[arg(long)]
        mesh: PathBuf,
        /// Ground-truth points (x, y, z, intensity as little-endian f32).
        #[arg(long)]
        gt: PathBuf,
        /// Per-point labels of the ground truth; enables semantic metrics.
        #[arg(long)]
        gt_labels: Option<PathBuf>,
        /// Distance thresholds in meters.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2")]
        tau: Vec<f64>,
        /// Surface samples drawn from the mesh.
        #[arg(long, default_value_t = 50_000)]
        samples: usize,
        /// Palette for class names in scd.csv (SemanticKITTI names by default).
        #[arg(long)]
        palette: Option<PathBuf>,
    },
    /// Align and fuse submaps listed in a manifest; writes the fused PLY.
    Merge {
        /// Submap list: `output`, `s_cube` and `submap PATH scans A B` lines.
        #[arg(long)]
        manifest: PathBuf,
        /// Surface samples per submap used for alignment.
        #[arg(long, default_value_t = 30_000)]
        samples: usize,
    },
    /// Simulate a synthetic sequence in the KITTI layout plus ground truth.
    Synth {
        /// Scene description of primitives, sensor and trajectory.
        #[arg(long)]
        scene: PathBuf,
        /// Number of scans along the trajectory.
        #[arg(long, default_value_t = 10)]
        scans: usize,
        /// Rays cast per scan.
        #[arg(long, default_value_t = 4000)]
        rays: usize,
        /// Ground-truth surface points to write.
        #[arg(long, default_value_t = 50_000)]
        gt_points: usize,
    },
    /// Run verification suites; writes suite.csv and summary.txt.
    Suite {
        /// Suites to run; all when omitted.
        names: Vec<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Mesh { .. } => "mesh",
            Command::Eval { .. } => "eval",
            Command::Merge { .. } => "merge",
            Command::Synth { .. } => "synth",
            Command::Suite { .. } => "suite",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 configuration, 4 alignment, 3 everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::Alignment { .. }) => 4,
        _ => 3,
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::config("--threads must be positive").into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let mut m = RunManifest::new(cli.command.name(), cli.seed, cli.threads);
    match &cli.command {
        Command::Train { config, mode } => cmd_train(cli, &mut m, config, *mode)?,
        Command::Mesh {
            checkpoint,
            s_cube,
            mode,
            config,
            keep_dynamic,
        } => cmd_mesh(cli, &mut m, checkpoint, *s_cube, *mode, config.as_deref(), *keep_dynamic)?,
        Command::Eval {
            mesh,
            gt,
            gt_labels,
            tau,
            samples,
            palette,
        } => cmd_eval(cli, &mut m, mesh, gt, gt_labels.as_deref(), tau, *samples, palette.as_deref())?,
        Command::Merge { manifest, samples } => cmd_merge(cli, &mut m, manifest, *samples)?,
        Command::Synth {
            scene,
            scans,
            rays,
            gt_points,
        } => cmd_synth(cli, &mut m, scene, *scans, *rays, *gt_points)?,
        Command::Suite { names } => cmd_suite(cli, &mut m, names)?,
    }
    m.write(&cli.out)
}

fn data_root(config: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(r) if !r.is_empty() => PathBuf::from(r),
        _ => config.parent().map(Path::to_path_buf).unwrap_or_default(),
    }
}

fn load_config(path: &Path, mode: Option<Mode>, seed: Option<u64>) -> Result<RunConfig> {
    let file = ConfigFile::load(path).with_context(|| format!("reading config {}", path.display()))?;
    Ok(file.resolve(&data_root(path), &Overrides { mode, seed })?)
}

fn cmd_train(cli: &Cli, m: &mut RunManifest, config: &Path, mode: Option<Mode>) -> Result<()> {
    let cfg = load_config(config, mode, cli.seed)?;
    m.config(config, &cfg);
    let t = Instant::now();
    let set = load_scans(&cfg)?;
    m.time("load", t);
    let points: usize = set.scans.iter().map(|s| s.len()).sum();
    println!("{} scans ({points} points), mode {}", set.scans.len(), cfg.mode);

    let t = Instant::now();
    let (map, report) = train_map(&cfg, &set.scans)?;
    m.time("train", t);

    let t = Instant::now();
    let meta = SnapshotMeta {
        reference_pose: set.reference_pose,
        scans: Some(set.range),
        dynamic_classes: cfg.train.dynamic_classes.clone(),
        ..SnapshotMeta::for_map(&map, cfg.mode)
    };
    let ckpt = cli.out.join("map.nsm");
    save_map(&ckpt, &map, &meta)?;
    let loss = cli.out.join("loss.csv");
    write_loss_csv(&loss, &report.history)?;
    let resolved = cli.out.join("config.toml");
    std::fs::write(&resolved, cfg.to_toml())?;
    m.time("write", t);
    m.outputs([ckpt.clone(), loss, resolved]);

    let last = report.history.last().map_or(f64::NAN, |r| r.total);
    println!(
        "trained {} steps, {} corners, final loss {last:.6}; wrote {}",
        report.steps,
        map.grid.rows(),
        ckpt.display()
    );
    if report.absent_samples > 0 {
        log::info!("{} samples fell outside the allocated map", report.absent_samples);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_mesh(
    cli: &Cli,
    m: &mut RunManifest,
    checkpoint: &Path,
    s_cube: Option<f64>,
    mode: Option<Mode>,
    config: Option<&Path>,
    keep_dynamic: bool,
) -> Result<()> {
    let t = Instant::now();
    let (map, meta) = load_map(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    m.time("load", t);
    let (mut mesh_cfg, palette) = match config {
        Some(p) => {
            let cfg = load_config(p, Some(meta.mode), cli.seed)?;
            m.config(p, &cfg);
            (cfg.mesh.clone(), cfg.palette()?)
        }
        None => (Default::default(), Palette::semantic_kitti()),
    };
    if let Some(s) = s_cube {
        mesh_cfg.s_cube = s;
    }
    if !(mesh_cfg.s_cube > 0.0 && mesh_cfg.s_cube.is_finite()) {
        return Err(Error::config(format!("--s-cube must be positive, got {}", mesh_cfg.s_cube)).into());
    }
    if keep_dynamic {
        mesh_cfg.filter_dynamic = false;
    }
    if let Some(mode) = mode {
        if mode.is_panoptic() && !map.is_panoptic() {
            return Err(Error::config(format!("mode {mode} needs a panoptic checkpoint, {} is {}", checkpoint.display(), meta.mode)).into());
        }
    }

    let t = Instant::now();
    let mut mesh = mesh_map(&map, &palette, &mesh_cfg, &meta.dynamic_classes)?;
    if mode.is_some_and(|m| !m.is_panoptic()) {
        mesh.instances.iter_mut().for_each(|i| *i = 0);
    }
    m.time("extract", t);
    if let Some(pose) = &meta.reference_pose {
        mesh = transform_mesh(&mesh, &RigidTransform::from_pose(pose)?);
    }

    let counts = if map.grid.is_empty() { [0; 3] } else { map.grid.map_cube_counts(mesh_cfg.s_cube)? };
    let out = cli.out.join("mesh.ply");
    let t = Instant::now();
    write_ply(&out, &mesh)?;
    m.time("write", t);
    m.outputs([out.clone()]);
    println!(
        "{} vertices, {} triangles; cube counts {} x {} x {} at s_cube {} m; wrote {}",
        mesh.mesh.vertices.len(),
        mesh.mesh.triangles.len(),
        counts[0],
        counts[1],
        counts[2],
        mesh_cfg.s_cube,
        out.display()
    );
    Ok(())
}

fn read_gt(gt: &Path, labels: Option<&Path>) -> Result<LabeledPoints> {
    let pts = read_points(gt)?;
    let points = pts.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
    Ok(match labels {
        None => LabeledPoints::unlabeled(points),
        Some(l) => {
            let raw = read_labels(l)?;
            let classes = raw.iter().map(|v| (v & 0xFFFF) as u16).collect();
            LabeledPoints::new(points, classes)?
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cli: &Cli,
    m: &mut RunManifest,
    mesh: &Path,
    gt: &Path,
    gt_labels: Option<&Path>,
    taus: &[f64],
    samples: usize,
    palette: Option<&Path>,
) -> Result<()> {
    if taus.is_empty() {
        return Err(Error::config("--tau needs at least one threshold").into());
    }
    let t = Instant::now();
    let mesh = read_ply(mesh)?;
    let gt = read_gt(gt, gt_labels)?;
    let pred = sample_surface(&mesh, samples, cli.seed.unwrap_or(0))?;
    m.time("load", t);
    let t = Instant::now();
    let reports: Vec<MetricReport> = taus
        .iter()
        .map(|&tau| {
            if gt_labels.is_some() {
                semantic_metrics(&pred, &gt, tau)
            } else {
                reconstruction_metrics(&pred.points, &gt.points, tau)
            }
        })
        .collect::<nsm_core::Result<_>>()?;
    m.time("metrics", t);
    let csv = cli.out.join("metrics.csv");
    MetricReport::write_csv(&csv, &reports)?;
    m.outputs([csv]);
    if let Some(first) = reports.first().filter(|r| r.scd.is_some()) {
        let pal = match palette {
            Some(p) => Palette::load(p)?,
            None => Palette::semantic_kitti(),
        };
        let scd = cli.out.join("scd.csv");
        first.write_scd_csv(&scd, Some(&pal))?;
        m.outputs([scd]);
    }
    for r in &reports {
        println!("{r}");
    }
    Ok(())
}

fn cmd_merge(cli: &Cli, m: &mut RunManifest, manifest: &Path, samples: usize) -> Result<()> {
    let mm = MergeManifest::load(manifest)?;
    if mm.submaps.len() < 2 {
        return Err(Error::config(format!("{} lists {} submaps; merging needs at least 2", manifest.display(), mm.submaps.len())).into());
    }
    let t = Instant::now();
    let mut submaps = Vec::new();
    for s in &mm.submaps {
        let (map, meta) = load_map(&s.path).with_context(|| format!("loading submap {}", s.path.display()))?;
        let mesh_cfg = nsm_core::config::MeshConfig {
            s_cube: mm.s_cube,
            ..Default::default()
        };
        let mesh = mesh_map(&map, &Palette::semantic_kitti(), &mesh_cfg, &meta.dynamic_classes)?;
        let reference = match &meta.reference_pose {
            Some(p) => RigidTransform::from_pose(p)?,
            None => {
                log::warn!("{} has no reference pose; assuming identity", s.path.display());
                RigidTransform::identity()
            }
        };
        submaps.push(Submap {
            mesh,
            reference,
            scans: s.scans,
        });
    }
    m.time("extract", t);
    let t = Instant::now();
    let cfg = MergeConfig {
        samples,
        s_cube: mm.s_cube,
        seed: cli.seed.unwrap_or(0),
        ..Default::default()
    };
    let report = merge_submaps(&submaps, &cfg)?;
    m.time("align", t);
    for (i, p) in report.pairs.iter().enumerate() {
        let (angle, dist) = p.transform.difference(&submaps[i].reference.inverse().compose(&submaps[i + 1].reference));
        println!(
            "pair {}<-{}: rms {:.6} m, {} correspondences, {} iterations{}, correction {:.4} deg / {:.4} m",
            i,
            i + 1,
            p.rms,
            p.correspondences,
            p.iterations,
            if p.converged { "" } else { " (not converged)" },
            angle.to_degrees(),
            dist
        );
    }
    let fused = transform_mesh(&report.mesh, &submaps[0].reference);
    let out = if mm.output.is_absolute() { mm.output.clone() } else { cli.out.join(&mm.output) };
    write_ply(&out, &fused)?;
    m.outputs([out.clone()]);
    println!(
        "fused {} submaps: {} vertices, {} triangles; wrote {}",
        submaps.len(),
        fused.mesh.vertices.len(),
        fused.mesh.triangles.len(),
        out.display()
    );
    Ok(())
}

fn cmd_synth(cli: &Cli, m: &mut RunManifest, scene: &Path, n: usize, rays: usize, gt_points: usize) -> Result<()> {
    let spec = SceneSpec::load(scene).with_context(|| format!("reading scene {}", scene.display()))?;
    let seed = cli.seed.unwrap_or(0);
    let t = Instant::now();
    let scans = synth_scans(&spec, n, rays, seed)?;
    write_sequence(&cli.out, &scans)?;
    m.time("simulate", t);
    let t = Instant::now();
    let gt = sample_visible_surface(&spec, n, gt_points, seed);
    if gt.is_empty() && gt_points > 0 {
        bail!("the scene has no visible static surface");
    }
    let pts: Vec<[f32; 4]> = gt.iter().map(|p| [p.x[0] as f32, p.x[1] as f32, p.x[2] as f32, 0.0]).collect();
    let labels: Vec<u32> = gt.iter().map(|p| (p.instance_id << 16) | p.class_id as u32).collect();
    let gt_bin = cli.out.join("gt_points.bin");
    let gt_label = cli.out.join("gt_points.label");
    write_points(&gt_bin, &pts)?;
    write_labels(&gt_label, &labels)?;
    m.time("ground truth", t);
    m.outputs([cli.out.join("velodyne"), cli.out.join("labels"), cli.out.join("poses.txt"), gt_bin, gt_label]);
    println!(
        "{} scans, {} points, {} ground-truth points; wrote {}",
        scans.len(),
        scans.iter().map(|s| s.len()).sum::<usize>(),
        gt.len(),
        cli.out.display()
    );
    Ok(())
}

fn cmd_suite(cli: &Cli, m: &mut RunManifest, names: &[String]) -> Result<()> {
    let names: Vec<&str> = if names.is_empty() { SUITES.to_vec() } else { names.iter().map(String::as_str).collect() };
    if let Some(bad) = names.iter().find(|n| !SUITES.contains(n)) {
        return Err(Error::config(format!("unknown suite {bad:?}; choose from {}", SUITES.join(", "))).into());
    }
    let ctx = SuiteContext::new(cli.seed.unwrap_or(0));
    let mut reports = Vec::new();
    for name in names {
        let t = Instant::now();
        let r = run_suite(name, &ctx)?;
        m.time(name, t);
        print!("{r}");
        reports.push(r);
    }
    let csv = cli.out.join("suite.csv");
    let summary = cli.out.join("summary.txt");
    nsm_core::suite::write_csv(&csv, &reports)?;
    std::fs::write(&summary, reports.iter().map(|r| r.to_string()).collect::<String>())?;
    m.outputs([csv, summary]);
    let failed: Vec<String> = reports
        .iter()
        .flat_map(|r| r.checks.iter().filter(|c| !c.passed).map(move |c| format!("{}/{}", r.name, c.name)))
        .collect();
    if !failed.is_empty() {
        bail!("failed checks: {}", failed.join(", "));
    }
    Ok(())
}
