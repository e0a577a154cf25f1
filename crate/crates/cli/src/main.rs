use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use splatmap::config::RunConfig;
use splatmap::evaluation::{default_deltas, evaluate_reconstruction, rpe, rpe_table, ReconProtocol};
use splatmap::geometry::{SE3Pose, SphericalCamera, Vec3};
use splatmap::io::{self, PlyFormat, TrajectoryFormat};
use splatmap::pipeline::{run_sequence, SequenceSource, GROUND_TRUTH_FILE, REFERENCE_FILE, TIMES_FILE};
use splatmap::rasterizer::{RasterConfig, Rasterizer};
use splatmap::registration::RegistrationMode;
use splatmap::synth::{make_trajectory, parse_scene, raycast_scan, ScanSpec};

#[derive(Parser, Debug)]
#[command(name = "splatmap", version, about = "LiDAR odometry and mapping with 2D Gaussian splats")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run odometry and mapping over a directory of scans.
    Run {
        sequence: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Take poses from the sequence ground truth instead of registering.
        #[arg(long)]
        ground_truth_poses: bool,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        scan_fraction: Option<f64>,
        /// geometric, photometric, joint or sequential
        #[arg(long)]
        mode: Option<String>,
    },
    /// Simulate a scan sequence from a scene file.
    Synth { scene: PathBuf, out: PathBuf },
    /// Relative pose error of an estimated trajectory.
    EvalTraj {
        estimate: PathBuf,
        ground_truth: PathBuf,
        /// tum or kitti; guessed from the extension otherwise.
        #[arg(long)]
        format: Option<String>,
        /// Segment lengths in meters; a fraction of the path by default.
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
    },
    /// Reconstruction metrics between two point clouds.
    EvalMap {
        estimate: PathBuf,
        reference: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        voxel: f64,
        #[arg(long, default_value_t = 20.0)]
        threshold_cm: f64,
        #[arg(long, default_value_t = 200.0)]
        max_dist_cm: f64,
    },
    /// Render range, normal and opacity maps of a model.
    Render {
        model: PathBuf,
        /// Sensor pose as "tx ty tz qx qy qz qw".
        #[arg(long, allow_hyphen_values = true)]
        pose: Option<String>,
        /// Output prefix; writes PREFIX_range.pfm, PREFIX_normal.pfm and PREFIX_opacity.pfm.
        #[arg(long)]
        out: PathBuf,
    },
    /// Summary statistics of a model or scan file.
    Info { file: PathBuf },
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn parse_mode(s: &str) -> Result<RegistrationMode, Failure> {
    Ok(match s {
        "geometric" => RegistrationMode::Geometric,
        "photometric" => RegistrationMode::Photometric,
        "joint" => RegistrationMode::Joint,
        "sequential" => RegistrationMode::Sequential,
        _ => return Err(Failure::Usage(format!("unknown registration mode '{s}'"))),
    })
}

fn trajectory_format(path: &Path, explicit: Option<&str>) -> Result<TrajectoryFormat, Failure> {
    match explicit {
        Some(f) => f.parse().map_err(Failure::Usage),
        None => Ok(TrajectoryFormat::from_path(path)),
    }
}

fn parse_pose(text: &str) -> Result<SE3Pose, Failure> {
    let line = format!("0 {text}");
    let traj = io::parse_trajectory(&line, TrajectoryFormat::Tum)
        .map_err(|e| Failure::Usage(format!("bad pose: {e}")))?;
    Ok(traj.poses[0].clone())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Run {
            sequence,
            out,
            ground_truth_poses,
            iterations,
            scan_fraction,
            mode,
        } => {
            let mut cfg = cfg;
            if let Some(o) = out {
                cfg.output.dir = o;
            }
            if let Some(n) = iterations {
                cfg.mapping.iterations = n;
            }
            if let Some(f) = scan_fraction {
                cfg.scan_fraction = f;
            }
            if let Some(m) = mode {
                cfg.registration.mode = parse_mode(&m)?;
            }
            cfg.validate().map_err(Failure::Usage)?;
            let source = SequenceSource::from_dir(&sequence).map_err(data)?;
            let (state, outputs) = run_sequence(&source, cfg, ground_truth_poses).map_err(|e| {
                if e.is_numerical() {
                    Failure::Numerical(e.to_string())
                } else {
                    Failure::Data(e.to_string())
                }
            })?;
            println!("scans {}", state.trajectory.len());
            println!("fallbacks {}", state.report.fallbacks());
            println!("trajectory {}", outputs.trajectory.display());
            println!("points {}", outputs.points.display());
            println!("report {}", outputs.report.display());
            if let Some(m) = outputs.model {
                println!("model {}", m.display());
            }
            Ok(())
        }
        Command::Synth { scene, out } => {
            let text = std::fs::read_to_string(&scene).map_err(|e| data(format!("{}: {e}", scene.display())))?;
            let file = parse_scene(&text).map_err(data)?;
            let seed = cli.seed.or(file.seed).unwrap_or(cfg.seed);
            synth(&file, seed, &out)
        }
        Command::EvalTraj {
            estimate,
            ground_truth,
            format,
            deltas,
        } => {
            let est = io::load_trajectory(&estimate, trajectory_format(&estimate, format.as_deref())?)
                .map_err(data)?;
            let gt = io::load_trajectory(&ground_truth, trajectory_format(&ground_truth, format.as_deref())?)
                .map_err(data)?;
            let deltas = deltas.unwrap_or_else(|| default_deltas(&gt));
            let table = rpe(&est, &gt, &deltas).map_err(data)?;
            print!("{}", rpe_table(&table));
            Ok(())
        }
        Command::EvalMap {
            estimate,
            reference,
            voxel,
            threshold_cm,
            max_dist_cm,
        } => {
            let est = io::read_ply(&estimate).map_err(data)?;
            let reference = io::read_ply(&reference).map_err(data)?;
            let protocol = ReconProtocol {
                voxel,
                threshold_cm,
                max_dist_cm,
            };
            let m = evaluate_reconstruction(&est.points, &reference.points, &protocol).map_err(data)?;
            print!("{}", m.table());
            Ok(())
        }
        Command::Render { model, pose, out } => {
            let model = io::load_model(&model).map_err(data)?;
            let pose = match pose {
                Some(p) => parse_pose(&p)?,
                None => SE3Pose::identity(),
            };
            let cam = match cfg.image.fixed_camera().map_err(Failure::Usage)? {
                Some(c) => c,
                None => SphericalCamera::from_fov(
                    cfg.image.width,
                    cfg.image.height,
                    -std::f64::consts::PI,
                    std::f64::consts::PI,
                    -std::f64::consts::FRAC_PI_8,
                    std::f64::consts::FRAC_PI_8,
                )
                .map_err(|e| Failure::Usage(e.to_string()))?,
            };
            let raster = Rasterizer::new(RasterConfig::default());
            let (render, _) = raster.forward(&cam, &pose, &model);
            let suffixed = |s: &str| {
                let mut name = out.as_os_str().to_owned();
                name.push(format!("_{s}.pfm"));
                PathBuf::from(name)
            };
            io::write_pfm(&suffixed("range"), &render.range).map_err(data)?;
            io::write_pfm_rgb(&suffixed("normal"), &render.normal).map_err(data)?;
            io::write_pfm(&suffixed("opacity"), &render.opacity).map_err(data)?;
            let covered = render.opacity.data.iter().filter(|&&o| o >= 0.5).count();
            println!("pixels {}", render.opacity.len());
            println!("covered {covered}");
            Ok(())
        }
        Command::Info { file } => info(&file),
    }
}

fn synth(file: &splatmap::synth::SceneFile, seed: u64, out: &Path) -> Result<(), Failure> {
    let (kind, length, steps) = file
        .trajectory
        .ok_or_else(|| Failure::Data("scene file has no trajectory line".into()))?;
    let traj = make_trajectory(kind, length, steps).map_err(data)?;
    let traj = traj.transformed(&SE3Pose::from_translation(file.start));
    std::fs::create_dir_all(out).map_err(|e| data(format!("{}: {e}", out.display())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = ScanSpec {
        noise: 0.0,
        dropout: 0.0,
        ..file.spec.clone()
    };
    let mut reference: Vec<Vec3> = Vec::new();
    let mut times = String::new();
    for (k, pose) in traj.poses.iter().enumerate() {
        let scan = raycast_scan(&file.scene, pose, &file.spec, &mut rng);
        let path = out.join(format!("scan_{k:05}.ply"));
        io::write_ply(&path, &scan.cloud, None, PlyFormat::BinaryLittleEndian).map_err(data)?;
        let exact = raycast_scan(&file.scene, pose, &clean, &mut rng);
        reference.extend(exact.cloud.iter().map(|q| pose.apply(q)));
        times.push_str(&format!("{}\n", traj.timestamps[k]));
    }
    std::fs::write(out.join(TIMES_FILE), times).map_err(data)?;
    io::save_trajectory(&traj, &out.join(GROUND_TRUTH_FILE), TrajectoryFormat::Tum).map_err(data)?;
    let reference = splatmap::evaluation::voxel_downsample(&reference, 0.05);
    io::write_ply(&out.join(REFERENCE_FILE), &reference, None, PlyFormat::BinaryLittleEndian)
        .map_err(data)?;
    let c = file.spec.camera();
    println!("scans {}", traj.len());
    println!(
        "fov_deg [{}, {}, {}, {}]",
        c.azimuth_min.to_degrees(),
        c.azimuth_max.to_degrees(),
        c.elevation_min.to_degrees(),
        c.elevation_max.to_degrees()
    );
    println!("image {} x {}", c.width, c.height);
    Ok(())
}

fn info(file: &Path) -> Result<(), Failure> {
    let ext = file
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    if ext == "bin" || ext == "ply" {
        let scan = io::load_scan(file).map_err(data)?;
        let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
        let mut range_sum = 0.0;
        for p in &scan.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
            range_sum += p.norm();
        }
        println!("kind scan");
        println!("points {}", scan.points.len());
        println!("dropped {}", scan.dropped);
        println!("min {} {} {}", lo.x, lo.y, lo.z);
        println!("max {} {} {}", hi.x, hi.y, hi.z);
        println!("mean_range {}", range_sum / scan.points.len() as f64);
        return Ok(());
    }
    let model = io::load_model(file).map_err(data)?;
    let n = model.len().max(1) as f64;
    let opacity: f64 = model.splats.iter().map(|s| s.opacity()).sum::<f64>() / n;
    let scale: f64 = model.splats.iter().map(|s| s.scale().mean()).sum::<f64>() / n;
    let epochs = model.epoch.iter().max().map(|e| e + 1).unwrap_or(0);
    println!("kind model");
    println!("splats {}", model.len());
    println!("mean_opacity {opacity}");
    println!("mean_scale {scale}");
    println!("epochs {epochs}");
    Ok(())
}
