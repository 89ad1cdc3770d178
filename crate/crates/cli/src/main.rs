use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use grasp_pf::camera::{look_down_pose, render, write_depth_pgm, write_id_pgm};
use grasp_pf::geom::{EulerZXY, Pose3, Vec3};
use grasp_pf::quality::directional_quality_maps;
use grasp_pf::scene::{load_scene, Scene, SceneSnapshot};
use grasp_pf::sim::{run_benchmark, run_episode, EpisodeConfig, EpisodeParams, Mode, Outcome};
use serde_json::Value;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Label channel file names, in channel order.
const LABEL_NAMES: [&str; 6] = ["level1", "level2", "level3", "object", "free_narrow", "free_wide"];

#[derive(Parser)]
#[command(name = "grasp-pf", version, about = "Particle-filter grasp inference on synthetic depth scenes")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render depth and object-id images of a scene.
    Render(RenderArgs),
    /// Write the six directional quality label images for one grasp direction.
    Label(LabelArgs),
    /// Run one grasping episode.
    Run(RunArgs),
    /// Run seeded episodes per mode and summarize success rates.
    Bench(BenchArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Parameter override, e.g. `filter.m=256` or `cam_distance=[0.5,0.5]`.
    #[arg(long = "params", value_name = "KEY=VALUE")]
    params: Vec<String>,
}

#[derive(Args)]
struct CameraArgs {
    /// Camera eye position x,y,z; looks straight down. Defaults to 0.55 m
    /// above the scene centroid.
    #[arg(long, value_parser = parse_triple, allow_negative_numbers = true)]
    eye: Option<[f64; 3]>,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    camera: CameraArgs,
}

#[derive(Args)]
struct LabelArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    camera: CameraArgs,
    /// Grasp direction alpha,beta,gamma in radians.
    #[arg(long, value_parser = parse_triple, allow_negative_numbers = true, default_value = "0,0,0")]
    euler: [f64; 3],
    /// Grasp depth below the surface (m).
    #[arg(long, default_value_t = 0.02)]
    depth: f64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "closed_loop")]
    mode: Mode,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Modes to run; repeat or comma-separate. Defaults to all.
    #[arg(long, value_delimiter = ',')]
    mode: Vec<Mode>,
    /// Episodes per mode; episode k uses seed + k.
    #[arg(long, default_value_t = 20)]
    episodes: usize,
}

/// Bad input: reported with exit code 2.
#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config<T>(r: anyhow::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| ConfigError(e).into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRASP_PF_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) if e.is::<ConfigError>() => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(n) = cli.jobs {
        config(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| anyhow!("cannot set up {n} worker threads: {e}")),
        )?;
    }
    match cli.command {
        Command::Render(a) => cmd_render(a),
        Command::Label(a) => cmd_label(a),
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"))).collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected 3 comma-separated numbers, got {}", v.len()))
}

fn read_scene(path: &Path) -> anyhow::Result<Scene> {
    config((|| {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read scene {}", path.display()))?;
        load_scene(&text).with_context(|| format!("invalid scene {}", path.display()))
    })())
}

/// Applies `key=value` overrides through the serialized form, so every
/// field reachable by a dotted path can be set. Values parse as JSON and
/// fall back to plain strings.
fn episode_params(overrides: &[String]) -> anyhow::Result<EpisodeParams> {
    config((|| {
        let mut tree = serde_json::to_value(EpisodeParams::default())?;
        for item in overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| anyhow!("override {item:?} is not key=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut tree;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| anyhow!("unknown parameter {key:?}"))?;
            }
            *slot = value;
        }
        let params: EpisodeParams = serde_json::from_value(tree).context("parameter overrides do not type-check")?;
        params.validate().map_err(|e| anyhow!(e))?;
        Ok(params)
    })())
}

fn camera_pose(scene: &Scene, cam: &CameraArgs) -> Pose3 {
    let eye = match &cam.eye {
        Some(v) => Vec3::new(v[0], v[1], v[2]),
        None => scene.centroid() + Vec3::new(0.0, 0.0, 0.55),
    };
    look_down_pose(eye)
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn out_dir(dir: &Path) -> anyhow::Result<()> {
    config(fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display())))
}

fn cmd_render(a: RenderArgs) -> anyhow::Result<ExitCode> {
    let scene = read_scene(&a.common.scene)?;
    let params = episode_params(&a.common.params)?;
    out_dir(&a.common.out)?;
    let pose = camera_pose(&scene, &a.camera);
    let obs = render(&SceneSnapshot::new(scene, 0), &pose, &params.intrinsics);
    write_depth_pgm(create(&a.common.out, "depth.pgm")?, &obs.depth)?;
    write_id_pgm(create(&a.common.out, "object_id.pgm")?, &obs.object_id)?;
    let hits = obs.object_id.data.iter().filter(|&&id| id > 0).count();
    println!("rendered {}x{}, {hits} object pixels -> {}", obs.depth.width, obs.depth.height, a.common.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_label(a: LabelArgs) -> anyhow::Result<ExitCode> {
    let scene = read_scene(&a.common.scene)?;
    let params = episode_params(&a.common.params)?;
    let e = EulerZXY::new(a.euler[0], a.euler[1], a.euler[2]);
    let [lo, hi] = params.gripper.depth_range;
    if !e.in_domain() || e.beta.abs() > params.filter.beta_bound || e.gamma.abs() > params.filter.gamma_bound {
        return config(Err(anyhow!(
            "euler angles ({}, {}, {}) outside alpha in [-pi, pi), |beta| <= {}, |gamma| <= {}",
            e.alpha,
            e.beta,
            e.gamma,
            params.filter.beta_bound,
            params.filter.gamma_bound
        )));
    }
    if !(lo..=hi).contains(&a.depth) {
        return config(Err(anyhow!("depth {} outside [{lo}, {hi}]", a.depth)));
    }
    out_dir(&a.common.out)?;
    let snapshot = SceneSnapshot::new(scene, 0);
    let obs = render(&snapshot, &camera_pose(&snapshot.scene, &a.camera), &params.intrinsics);
    let maps = directional_quality_maps(&obs, &snapshot, &e, a.depth, &params.gripper)?;
    let dir = &a.common.out;
    maps.write_label_pgms(|ch| create(dir, &format!("label_{}.pgm", LABEL_NAMES[ch])).map_err(std::io::Error::other))?;
    println!("wrote {} label images -> {}", LABEL_NAMES.len(), dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(a: RunArgs) -> anyhow::Result<ExitCode> {
    let scene = read_scene(&a.common.scene)?;
    let params = episode_params(&a.common.params)?;
    out_dir(&a.common.out)?;
    let cfg = EpisodeConfig { scene: Arc::new(scene), mode: a.mode, seed: a.common.seed, params };
    let result = run_episode(&cfg);
    let mut trace = create(&a.common.out, "trace.jsonl")?;
    for rec in &result.trace {
        serde_json::to_writer(&mut trace, rec)?;
        trace.write_all(b"\n")?;
    }
    trace.flush()?;
    let record = serde_json::json!({
        "mode": result.mode,
        "seed": result.seed,
        "outcome": result.outcome,
        "success": result.success,
        "steps": result.steps,
        "execution": result.execution,
    });
    let mut out = create(&a.common.out, "result.json")?;
    serde_json::to_writer_pretty(&mut out, &record)?;
    out.write_all(b"\n")?;
    out.flush()?;
    match result.outcome {
        Outcome::Executed => {
            println!("{} seed {}: {} after {} steps", result.mode, result.seed, if result.success { "success" } else { "failure" }, result.steps);
            Ok(ExitCode::SUCCESS)
        }
        Outcome::Cleared => {
            println!("{} seed {}: cleared (no graspable candidates) after {} steps", result.mode, result.seed, result.steps);
            Ok(ExitCode::SUCCESS)
        }
        Outcome::Timeout => bail!("{} seed {}: timed out after {} steps", result.mode, result.seed, result.steps),
    }
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<ExitCode> {
    let scene = Arc::new(read_scene(&a.common.scene)?);
    let params = episode_params(&a.common.params)?;
    out_dir(&a.common.out)?;
    let modes = if a.mode.is_empty() { Mode::ALL.to_vec() } else { a.mode.clone() };
    // Zero episodes is an empty suite: header-only summaries.
    let suite: Vec<EpisodeConfig> = modes
        .iter()
        .filter(|_| a.episodes > 0)
        .map(|&mode| EpisodeConfig { scene: scene.clone(), mode, seed: a.common.seed, params: params.clone() })
        .collect();
    let report = run_benchmark(&suite, a.episodes);
    let mut csv = create(&a.common.out, "summary.csv")?;
    csv.write_all(report.to_csv().as_bytes())?;
    csv.flush()?;
    let mut eps = create(&a.common.out, "episodes.csv")?;
    writeln!(eps, "index,mode,seed,outcome,success,steps,object_id")?;
    for e in &report.episodes {
        let object = e.object_id.map_or(String::new(), |id| id.to_string());
        writeln!(eps, "{},{},{},{},{},{},{}", e.index, e.mode, e.seed, e.outcome.name(), e.success, e.steps, object)?;
    }
    eps.flush()?;
    let table = report.to_table();
    fs::write(a.common.out.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}
