//! Command-line entry point wiring the pipeline: simulate, gen-data, train,
//! rollout, assimilate, evaluate, bench. Every subcommand is deterministic
//! from (config, seed) and writes a reproducibility record into the output
//! directory.

use std::fmt::Write as FmtWrite;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use floodcast::assim::{estimate_covariance, Covariance, SpotObservation};
use floodcast::config::{ConfigError, FlatConfig};
use floodcast::eval::{
    classify_zones, curves_to_csv, one_step_table, rollout_curves, speed_benchmark, write_pgm,
    Zone,
};
use floodcast::field::{
    read_terrain_file, write_state_file, write_terrain_file, FieldError, FlowState, ForcingPlan,
    GridSpec, Terrain,
};
use floodcast::nn::rollout::{predict, rollout, Surrogate};
use floodcast::nn::tensor::{NnError, Tensor};
use floodcast::nn::train::{
    load_dataset, train_cgan, train_l1, LoadedDataset, TrainConfig, TrainMode,
};
use floodcast::nn::{
    default_discriminator_specs, default_generator_specs, layer_specs_to_text, parse_layer_specs,
    Network,
};
use floodcast::scenario::{
    sample_scenario, scenario_solver_params, synth_terrain, DatasetManifest, RainPattern,
    ScenarioConfig, ScenarioError, IN_CHANNELS, MANIFEST_FILE, OUT_CHANNELS,
};
use floodcast::solver::{
    apply_dirichlet_boundary, lake_state, run, run_audited, SolverError, SolverParams,
};

// Distinct exit codes per error category (clap uses 2 for usage errors).
const EXIT_CONFIG: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_SOLVER: u8 = 5;
const EXIT_DATA: u8 = 6;
const EXIT_TRAIN: u8 = 7;
const EXIT_ASSIM: u8 = 8;
const EXIT_EVAL: u8 = 9;
const EXIT_OVERWRITE: u8 = 10;

struct CliError {
    category: &'static str,
    code: u8,
    message: String,
}

impl CliError {
    fn new(category: &'static str, code: u8, message: impl Into<String>) -> Self {
        Self {
            category,
            code,
            message: message.into(),
        }
    }

    fn overwrite(path: &Path) -> Self {
        Self::new(
            "overwrite",
            EXIT_OVERWRITE,
            format!(
                "refusing to overwrite existing {} (pass --force to allow)",
                path.display()
            ),
        )
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::new("config", EXIT_CONFIG, e.to_string())
    }
}
impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", EXIT_IO, e.to_string())
    }
}
impl From<FieldError> for CliError {
    fn from(e: FieldError) -> Self {
        Self::new("io", EXIT_IO, e.to_string())
    }
}
impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        Self::new("solver", EXIT_SOLVER, e.to_string())
    }
}
impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        Self::new("data", EXIT_DATA, e.to_string())
    }
}
impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        Self::new("train", EXIT_TRAIN, e.to_string())
    }
}
impl From<floodcast::assim::AssimError> for CliError {
    fn from(e: floodcast::assim::AssimError) -> Self {
        Self::new("assimilate", EXIT_ASSIM, e.to_string())
    }
}
impl From<floodcast::eval::EvalError> for CliError {
    fn from(e: floodcast::eval::EvalError) -> Self {
        Self::new("evaluate", EXIT_EVAL, e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "floodcast",
    version,
    about = "Shallow-water flood simulation, surrogate training, and assimilation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker cap; 1 (the default) guarantees bit-reproducible output.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Allow overwriting existing manifests/artifacts.
    #[arg(long)]
    force: bool,
    /// Print extra progress information.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the shallow-water solver on one scenario and write snapshots.
    Simulate(Common),
    /// Generate a training dataset of solver scenarios.
    #[command(name = "gen-data")]
    GenData(Common),
    /// Train a surrogate network on a generated dataset.
    Train(Common),
    /// Roll a trained surrogate forward and compare against the solver.
    Rollout(Common),
    /// Rollout with Kalman-style spot corrections from reference observations.
    Assimilate(Common),
    /// One-step error tables and zone maps over the validation set.
    Evaluate(Common),
    /// Wall-clock solver-vs-surrogate speed benchmark.
    Bench(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Simulate(c) => ("simulate", c),
        Command::GenData(c) => ("gen-data", c),
        Command::Train(c) => ("train", c),
        Command::Rollout(c) => ("rollout", c),
        Command::Assimilate(c) => ("assimilate", c),
        Command::Evaluate(c) => ("evaluate", c),
        Command::Bench(c) => ("bench", c),
    };
    match run_command(name, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "error category={} message={:?}",
                e.category,
                e.message.replace('\n', " ")
            );
            ExitCode::from(e.code)
        }
    }
}

fn run_command(name: &str, common: &Common) -> Result<(), CliError> {
    if common.threads == 0 {
        return Err(CliError::new(
            "config",
            EXIT_CONFIG,
            "--threads must be at least 1",
        ));
    }
    // All computation in this crate is single-threaded by construction;
    // --threads caps (never raises) worker counts and 1 is always exact.
    let cfg = FlatConfig::load(&common.config)?;
    std::fs::create_dir_all(&common.out)?;
    let artifacts = match name {
        "simulate" => cmd_simulate(&cfg, common)?,
        "gen-data" => cmd_gen_data(&cfg, common)?,
        "train" => cmd_train(&cfg, common)?,
        "rollout" => cmd_rollout(&cfg, common)?,
        "assimilate" => cmd_assimilate(&cfg, common)?,
        "evaluate" => cmd_evaluate(&cfg, common)?,
        "bench" => cmd_bench(&cfg, common)?,
        _ => unreachable!("clap validates subcommands"),
    };
    write_run_record(name, common, &cfg, &artifacts)
}

/// Reproducibility record: full config, effective seed/threads, and SHA-256
/// hashes of every artifact written. Contains no timings or timestamps so a
/// rerun with identical inputs produces a byte-identical record.
fn write_run_record(
    name: &str,
    common: &Common,
    cfg: &FlatConfig,
    artifacts: &[PathBuf],
) -> Result<(), CliError> {
    let mut rec = String::new();
    let _ = writeln!(rec, "floodcast run record");
    let _ = writeln!(rec, "subcommand = {name}");
    let _ = writeln!(
        rec,
        "seed_override = {}",
        common.seed.map_or("none".to_string(), |s| s.to_string())
    );
    let _ = writeln!(rec, "threads = {}", common.threads);
    let _ = writeln!(
        rec,
        "config_sha256 = {}",
        hex(&Sha256::digest(cfg.text().as_bytes()))
    );
    let _ = writeln!(rec, "config:");
    for line in cfg.text().lines() {
        let _ = writeln!(rec, "  {line}");
    }
    let _ = writeln!(rec, "artifacts:");
    let mut sorted: Vec<&PathBuf> = artifacts.iter().collect();
    sorted.sort();
    for path in sorted {
        let bytes = std::fs::read(path)?;
        let rel = path.strip_prefix(&common.out).unwrap_or(path);
        let _ = writeln!(rec, "  {} sha256 {}", rel.display(), hex(&Sha256::digest(&bytes)));
    }
    std::fs::write(common.out.join("run_record.txt"), rec)?;
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn grid_from(cfg: &FlatConfig) -> Result<GridSpec, CliError> {
    Ok(GridSpec::new(
        cfg.get_or("nx", 64usize)?,
        cfg.get_or("ny", 64usize)?,
        cfg.get_or("dx", 10.0f64)?,
        cfg.get_or("dy", 10.0f64)?,
    )?)
}

fn solver_params_from(cfg: &FlatConfig) -> Result<SolverParams, CliError> {
    let d = SolverParams::default();
    Ok(SolverParams {
        g: cfg.get_or("gravity", d.g)?,
        cfl: cfg.get_or("cfl", d.cfl)?,
        h_eps: cfg.get_or("dry_threshold", d.h_eps)?,
        theta: cfg.get_or("limiter_theta", d.theta)?,
        max_dt: cfg.get_or("max_dt", d.max_dt)?,
    })
}

/// Scenario-generation keys shared by gen-data, rollout, assimilate, bench.
fn scenario_config_from(cfg: &FlatConfig, seed_override: Option<u64>) -> Result<ScenarioConfig, CliError> {
    let d = ScenarioConfig::default();
    let rain_pattern: RainPattern = match cfg.get_str("rain_pattern") {
        Some(s) => s.parse().map_err(|m: String| {
            CliError::new("config", EXIT_CONFIG, format!("rain_pattern: {m}"))
        })?,
        None => d.rain_pattern,
    };
    let sc = ScenarioConfig {
        seed: seed_override.unwrap_or(cfg.get_or("seed", d.seed)?),
        grid: grid_from(cfg)?,
        n_subareas: cfg.get_or("n_subareas", d.n_subareas)?,
        horizon: cfg.get_or("horizon", d.horizon)?,
        snapshot_every: cfg.get_or("snapshot_every", d.snapshot_every)?,
        lead_time: cfg.get_or("lead_time", d.lead_time)?,
        rain_pattern,
        rain_scale: cfg.get_or("rain_scale_mm_per_hr", d.rain_scale * 3.6e6)? / 3.6e6,
        inflow_count: cfg.get_or("inflow_count", d.inflow_count)?,
        inflow_scale: cfg.get_or("inflow_scale", d.inflow_scale)?,
        boundary_level_range: (
            cfg.get_or("boundary_level_min", d.boundary_level_range.0)?,
            cfg.get_or("boundary_level_max", d.boundary_level_range.1)?,
        ),
    };
    sc.validate()?;
    Ok(sc)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(cfg: &FlatConfig, common: &Common) -> Result<Vec<PathBuf>, CliError> {
    let grid = grid_from(cfg)?;
    let params = solver_params_from(cfg)?;
    let terrain: Terrain = match cfg.get_str("terrain_file") {
        Some(path) => read_terrain_file(Path::new(&path))?,
        None => {
            let seed = common.seed.unwrap_or(cfg.get_or("terrain_seed", 0u64)?);
            synth_terrain(seed, grid)
        }
    };
    if terrain.grid != grid {
        return Err(CliError::new(
            "config",
            EXIT_CONFIG,
            "terrain grid does not match nx/ny/dx/dy",
        ));
    }
    let boundary_level = cfg.get_or("boundary_level", 0.0f64)?;
    let lake_level = cfg.get::<f64>("lake_level")?;
    let rain_rate = cfg.get_or("rain_mm_per_hr", 0.0f64)? / 3.6e6; // m/s
    let duration = cfg.get_or("duration", 3600.0f64)?;
    let snapshot_every = cfg.get_or("snapshot_every", 600.0f64)?;
    cfg.finish()?;

    let mut forcing = ForcingPlan::none(grid, boundary_level, duration);
    forcing.rain = vec![vec![rain_rate]];
    let mut state0 = lake_state(&terrain, lake_level.unwrap_or(boundary_level));
    apply_dirichlet_boundary(&mut state0, &terrain, boundary_level);

    let (snapshots, audit) = run_audited(&state0, &terrain, &forcing, &params, duration, snapshot_every)?;

    let mut artifacts = Vec::new();
    let terrain_path = common.out.join("terrain.fld");
    write_terrain_file(&terrain_path, &terrain)?;
    artifacts.push(terrain_path);
    for (i, s) in snapshots.iter().enumerate() {
        let path = common.out.join(format!("snap_{i:04}.fld"));
        write_state_file(&path, s)?;
        artifacts.push(path);
    }

    let last = snapshots.last().expect("at least the initial snapshot");
    let max_q = last
        .qx
        .iter()
        .chain(&last.qy)
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let max_dh = last
        .h
        .iter()
        .zip(&state0.h)
        .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs()));
    println!(
        "simulate: {} snapshots over {duration} s, max|q| = {max_q:.3e}, max|dh| = {max_dh:.3e}",
        snapshots.len()
    );
    println!(
        "simulate: volume {:.6} -> {:.6} m^3 (rain {:.6}, inflow {:.6}, boundary {:.6})",
        state0.volume(),
        last.volume(),
        audit.rain_volume,
        audit.inflow_volume,
        audit.boundary_volume
    );
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn cmd_gen_data(cfg: &FlatConfig, common: &Common) -> Result<Vec<PathBuf>, CliError> {
    let sc = scenario_config_from(cfg, common.seed)?;
    let n_scenarios = cfg.get_or("n_scenarios", 12usize)?;
    cfg.finish()?;
    let manifest_path = common.out.join(MANIFEST_FILE);
    if manifest_path.exists() && !common.force {
        return Err(CliError::overwrite(&manifest_path));
    }
    let manifest = floodcast::scenario::build_dataset(&sc, n_scenarios, &common.out)?;
    println!(
        "gen-data: {} train + {} val samples from {} scenarios ({} failed)",
        manifest.train.len(),
        manifest.val.len(),
        n_scenarios,
        manifest.failed.len()
    );
    let mut artifacts = vec![manifest_path];
    for e in manifest.train.iter().chain(&manifest.val) {
        artifacts.push(common.out.join(&e.file));
    }
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn train_config_from(cfg: &FlatConfig, seed_override: Option<u64>) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let mode = match cfg.get_str("mode").as_deref() {
        None | Some("l1_cnn") => TrainMode::L1Cnn,
        Some("cgan") => TrainMode::Cgan,
        Some(other) => {
            return Err(CliError::new(
                "config",
                EXIT_CONFIG,
                format!("unknown mode `{other}` (expected l1_cnn or cgan)"),
            ))
        }
    };
    let optimizer = match cfg.get_str("optimizer") {
        Some(s) => s.parse().map_err(|m: String| {
            CliError::new("config", EXIT_CONFIG, format!("optimizer: {m}"))
        })?,
        None => d.optimizer,
    };
    let lr_schedule = match cfg.get_str("lr_schedule") {
        Some(s) => s.parse().map_err(|m: String| {
            CliError::new("config", EXIT_CONFIG, format!("lr_schedule: {m}"))
        })?,
        None => d.lr_schedule,
    };
    let tc = TrainConfig {
        mode,
        epochs: cfg.get_or("epochs", d.epochs)?,
        batch_size: cfg.get_or("batch_size", d.batch_size)?,
        optimizer,
        lr: cfg.get_or("lr", d.lr)?,
        lr_schedule,
        lr_period: cfg.get_or("lr_period", d.lr_period)?,
        input_noise_sigma: cfg.get_or("input_noise_sigma", d.input_noise_sigma)?,
        l1_weight: cfg.get_or("l1_weight", d.l1_weight)?,
        adversarial_weight: cfg.get_or("adversarial_weight", d.adversarial_weight)?,
        real_labels: (
            cfg.get_or("real_label_min", d.real_labels.0)?,
            cfg.get_or("real_label_max", d.real_labels.1)?,
        ),
        fake_labels: (
            cfg.get_or("fake_label_min", d.fake_labels.0)?,
            cfg.get_or("fake_label_max", d.fake_labels.1)?,
        ),
        seed: seed_override.unwrap_or(cfg.get_or("seed", d.seed)?),
    };
    tc.validate()?;
    Ok(tc)
}

fn specs_from(cfg: &FlatConfig, key: &str, default: Vec<floodcast::nn::LayerSpec>) -> Result<Vec<floodcast::nn::LayerSpec>, CliError> {
    match cfg.get_str(key) {
        Some(path) => Ok(parse_layer_specs(&std::fs::read_to_string(path)?)?),
        None => Ok(default),
    }
}

fn cmd_train(cfg: &FlatConfig, common: &Common) -> Result<Vec<PathBuf>, CliError> {
    let data_dir: PathBuf = cfg.require::<String>("data_dir")?.into();
    let tc = train_config_from(cfg, common.seed)?;
    let g_specs = specs_from(cfg, "generator_arch", default_generator_specs())?;
    let d_specs = specs_from(cfg, "discriminator_arch", default_discriminator_specs())?;
    cfg.finish()?;

    let data = load_dataset(&data_dir)?;
    let mut g_net = Network::build(&g_specs, tc.seed)?;
    let history = match tc.mode {
        TrainMode::L1Cnn => train_l1(&mut g_net, &data, &tc)?,
        TrainMode::Cgan => {
            let mut d_net = Network::build(&d_specs, tc.seed.wrapping_add(1))?;
            let h = train_cgan(&mut g_net, &mut d_net, &data, &tc)?;
            let d_path = common.out.join("discriminator.fld");
            d_net.save_params(&d_path)?;
            std::fs::write(
                common.out.join("discriminator.arch"),
                layer_specs_to_text(&d_specs),
            )?;
            h
        }
    };

    let mut artifacts = Vec::new();
    let g_path = common.out.join("generator.fld");
    g_net.save_params(&g_path)?;
    artifacts.push(g_path);
    let arch_path = common.out.join("generator.arch");
    std::fs::write(&arch_path, layer_specs_to_text(&g_specs))?;
    artifacts.push(arch_path);
    if tc.mode == TrainMode::Cgan {
        artifacts.push(common.out.join("discriminator.fld"));
        artifacts.push(common.out.join("discriminator.arch"));
    }

    let mut csv = String::from("epoch,train_l1,val_l1,d_loss,g_adv_loss\n");
    for (i, (tl, vl)) in history.train_loss.iter().zip(&history.val_loss).enumerate() {
        let dl = history.d_loss.get(i).map_or(String::new(), |v| format!("{v:.12e}"));
        let ga = history
            .g_adv_loss
            .get(i)
            .map_or(String::new(), |v| format!("{v:.12e}"));
        let _ = writeln!(csv, "{},{tl:.12e},{vl:.12e},{dl},{ga}", i + 1);
    }
    let hist_path = common.out.join("history.csv");
    std::fs::write(&hist_path, csv)?;
    artifacts.push(hist_path);
    println!(
        "train: {} epochs, final train L1 {:.6e}, val L1 {:.6e}",
        history.train_loss.len(),
        history.train_loss.last().copied().unwrap_or(f64::NAN),
        history.val_loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// rollout / assimilate shared setup
// ---------------------------------------------------------------------------

struct RolloutSetup {
    surrogate: Surrogate,
    terrain: Terrain,
    state0: FlowState,
    forcing: ForcingPlan,
    reference: Vec<FlowState>,
    n_steps: usize,
    lead_time: f64,
    manifest: DatasetManifest,
}

fn load_surrogate(cfg: &FlatConfig, manifest: &DatasetManifest) -> Result<Surrogate, CliError> {
    let model_path: PathBuf = cfg.require::<String>("model")?.into();
    let arch_path: PathBuf = cfg
        .get_str("arch")
        .map(PathBuf::from)
        .unwrap_or_else(|| model_path.with_extension("arch"));
    let specs = parse_layer_specs(&std::fs::read_to_string(&arch_path)?)?;
    let mut net = Network::build(&specs, 0)?;
    net.load_params(&model_path)?;
    Ok(Surrogate::new(
        net,
        manifest.grid,
        manifest.lead_time,
        &manifest.channel_stats,
    )?)
}

fn rollout_setup(cfg: &FlatConfig, common: &Common) -> Result<RolloutSetup, CliError> {
    let data_dir: PathBuf = cfg.require::<String>("data_dir")?.into();
    let manifest = DatasetManifest::read(&data_dir)?;
    let sc = scenario_config_from(cfg, common.seed)?;
    if sc.grid != manifest.grid || sc.lead_time != manifest.lead_time {
        return Err(CliError::new(
            "config",
            EXIT_CONFIG,
            "scenario grid/lead_time must match the dataset manifest",
        ));
    }
    let surrogate = load_surrogate(cfg, &manifest)?;
    let scenario_index = cfg.get_or("scenario_index", 1_000_000u64)?;
    let n_steps = cfg.get_or("n_steps", (sc.horizon / sc.lead_time).floor() as usize)?;
    if n_steps == 0 {
        return Err(CliError::new("config", EXIT_CONFIG, "n_steps must be >= 1"));
    }
    let (terrain, state0, forcing) = sample_scenario(&sc, scenario_index)?;
    let horizon = n_steps as f64 * sc.lead_time;
    if horizon > forcing.duration + 1e-9 {
        return Err(CliError::new(
            "config",
            EXIT_CONFIG,
            "n_steps x lead_time exceeds the scenario horizon",
        ));
    }
    let reference = run(
        &state0,
        &terrain,
        &forcing,
        &scenario_solver_params(),
        horizon,
        sc.lead_time,
    )?;
    Ok(RolloutSetup {
        surrogate,
        terrain,
        state0,
        forcing,
        reference,
        n_steps,
        lead_time: sc.lead_time,
        manifest,
    })
}

fn write_depth_heatmaps(
    out: &Path,
    tag: &str,
    pred: &FlowState,
    reference: &FlowState,
    artifacts: &mut Vec<PathBuf>,
) -> Result<(), CliError> {
    let grid = reference.grid;
    let hi = reference
        .h
        .iter()
        .chain(&pred.h)
        .fold(0.0f64, |m, &v| m.max(v));
    let err: Vec<f64> = pred
        .h
        .iter()
        .zip(&reference.h)
        .map(|(a, b)| (a - b).abs())
        .collect();
    let err_hi = err.iter().fold(0.0f64, |m, &v| m.max(v));
    for (name, values, top) in [
        ("pred", &pred.h, hi),
        ("ref", &reference.h, hi),
        ("err", &err, err_hi),
    ] {
        let path = out.join(format!("{tag}_{name}.pgm"));
        write_pgm(&path, grid, values, 0.0, top.max(1e-12))?;
        artifacts.push(path);
    }
    Ok(())
}

fn cmd_rollout(cfg: &FlatConfig, common: &Common) -> Result<Vec<PathBuf>, CliError> {
    let mut setup = rollout_setup(cfg, common)?;
    cfg.finish()?;
    let snaps = rollout(
        &mut setup.surrogate,
        &setup.state0,
        &setup.forcing,
        setup.n_steps,
    )?;
    let curve = rollout_curves("surrogate", &snaps, &setup.reference, None)?;
    let mut artifacts = Vec::new();
    for (i, s) in snaps.iter().enumerate() {
        let path = common.out.join(format!("surrogate_{i:04}.fld"));
        write_state_file(&path, s)?;
        artifacts.push(path);
        let path = common.out.join(format!("reference_{i:04}.fld"));
        write_state_file(&path, &setup.reference[i])?;
        artifacts.push(path);
    }
    write_depth_heatmaps(
        &common.out,
        "final",
        snaps.last().expect("n_steps >= 1"),
        setup.reference.last().expect("n_steps >= 1"),
        &mut artifacts,
    )?;
    let csv_path = common.out.join("rollout_curves.csv");
    std::fs::write(&csv_path, curves_to_csv(&[curve.clone()]))?;
    artifacts.push(csv_path);
    let terrain_path = common.out.join("terrain.fld");
    write_terrain_file(&terrain_path, &setup.terrain)?;
    artifacts.push(terrain_path);
    let last = curve.points.last().expect("nonempty curve");
    println!(
        "rollout: {} steps of {} s, final MSE {:.6e} (depth {:.6e})",
        setup.n_steps, setup.lead_time, last.mse_all, last.mse_depth
    );
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// assimilate
// ---------------------------------------------------------------------------

/// One-step prediction errors (physical units, flattened [h|qx|qy]) of the
/// surrogate over validation samples, for covariance estimation.
fn prediction_errors(
    surrogate: &mut Surrogate,
    data: &LoadedDataset,
    max_samples: usize,
) -> Result<Vec<Vec<f64>>, CliError> {
    let grid = data.grid;
    let n = grid.ncells();
    let mut errors = Vec::new();
    for (input, target) in data
        .val_inputs
        .iter()
        .zip(&data.val_targets)
        .take(max_samples)
    {
        let mut x = Tensor::zeros(&[1, IN_CHANNELS, grid.ny, grid.nx]);
        for ch in 0..IN_CHANNELS {
            let (mean, std) = (surrogate.means[ch], surrogate.stds[ch]);
            for c in 0..n {
                x.data[ch * n + c] = (input[ch * n + c] as f64 - mean) / std;
            }
        }
        let pred = surrogate.net.forward(&x, false)?;
        let mut err = vec![0.0; OUT_CHANNELS * n];
        for ch in 0..OUT_CHANNELS {
            let (mean, std) = (
                surrogate.means[IN_CHANNELS + ch],
                surrogate.stds[IN_CHANNELS + ch],
            );
            for c in 0..n {
                let p = pred.data[ch * n + c] * std + mean;
                err[ch * n + c] = p - target[ch * n + c] as f64;
            }
        }
        errors.push(err);
    }
    Ok(errors)
}

fn cmd_assimilate(cfg: &FlatConfig, common: &Common) -> Result<Vec<PathBuf>, CliError> {
    let data_dir: PathBuf = cfg.require::<String>("data_dir")?.into();
    let mut setup = rollout_setup(cfg, common)?;
    let observe_fraction = cfg.get_or("observe_fraction", 0.1f64)?;
    let obs_noise_frac = cfg.get_or("obs_noise_frac", 0.05f64)?;
    let localization_radius = cfg.get_or("localization_radius", 8.0f64)?;
    let cov_samples = cfg.get_or("cov_samples", 24usize)?;
    let obs_seed = cfg.get_or("obs_seed", 1u64)?;
    cfg.finish()?;
    if !(0.0..=1.0).contains(&observe_fraction) {
        return Err(CliError::new(
            "config",
            EXIT_CONFIG,
            "observe_fraction must be in [0, 1]",
        ));
    }

    let data = load_dataset(&data_dir)?;
    let grid = setup.manifest.grid;
    let ncells = grid.ncells();

    // Empirical covariance of one-step surrogate errors over the validation
    // split (localized; sparse on large grids).
    let errors = prediction_errors(&mut setup.surrogate, &data, cov_samples)?;
    let p: Covariance = estimate_covariance(&errors, localization_radius, grid)?;

    // Observation variance per channel: (obs_noise_frac x channel std)^2.
    let channel_var: Vec<f64> = (0..OUT_CHANNELS)
        .map(|ch| {
            let s = setup.manifest.channel_stats[IN_CHANNELS + ch].std.max(1e-8);
            (obs_noise_frac * s).powi(2)
        })
        .collect();

    let n_obs_cells = ((ncells as f64) * observe_fraction).round() as usize;
    let mut rng = ChaCha12Rng::seed_from_u64(obs_seed);

    // Uncorrected rollout.
    let free = rollout(
        &mut setup.surrogate,
        &setup.state0,
        &setup.forcing,
        setup.n_steps,
    )?;
    // Corrected rollout: after each prediction, observe a random subset of
    // reference pixels (all 3 channels) and apply the measurement update.
    let mut corrected = vec![setup.state0.clone()];
    for step in 1..=setup.n_steps {
        let pred = predict(
            &mut setup.surrogate,
            corrected.last().expect("nonempty"),
            &setup.forcing,
        )?;
        let reference = &setup.reference[step];
        let mut cells: Vec<usize> = (0..ncells).collect();
        // Partial Fisher-Yates: the first n_obs_cells entries are the sample.
        for i in 0..n_obs_cells.min(ncells) {
            let j = rng.gen_range(i..ncells);
            cells.swap(i, j);
        }
        let mut spots = Vec::with_capacity(3 * n_obs_cells);
        let mut vars = Vec::with_capacity(3 * n_obs_cells);
        for &cell in &cells[..n_obs_cells.min(ncells)] {
            for (channel, src) in [&reference.h, &reference.qx, &reference.qy]
                .into_iter()
                .enumerate()
            {
                spots.push(SpotObservation {
                    cell,
                    channel,
                    value: src[cell],
                });
                vars.push(channel_var[channel]);
            }
        }
        let post = floodcast::assim::spot_correct(&pred, &spots, &p, &vars)?;
        corrected.push(post);
    }

    let free_curve = rollout_curves("surrogate", &free, &setup.reference, None)?;
    let corr_curve = rollout_curves("assimilated", &corrected, &setup.reference, None)?;
    let mean_mse = |c: &floodcast::eval::RolloutCurve| -> f64 {
        let pts = &c.points[1..];
        pts.iter().map(|p| p.mse_all).sum::<f64>() / pts.len() as f64
    };
    let (m_free, m_corr) = (mean_mse(&free_curve), mean_mse(&corr_curve));
    let mut artifacts = Vec::new();
    let csv_path = common.out.join("assimilation_curves.csv");
    std::fs::write(&csv_path, curves_to_csv(&[free_curve, corr_curve]))?;
    artifacts.push(csv_path);
    for (i, s) in corrected.iter().enumerate() {
        let path = common.out.join(format!("assimilated_{i:04}.fld"));
        write_state_file(&path, s)?;
        artifacts.push(path);
    }
    write_depth_heatmaps(
        &common.out,
        "final",
        corrected.last().expect("n_steps >= 1"),
        setup.reference.last().expect("n_steps >= 1"),
        &mut artifacts,
    )?;
    println!(
        "assimilate: mean rollout MSE {:.6e} -> {:.6e} ({:.1}% reduction, {:.0}% pixels observed)",
        m_free,
        m_corr,
        100.0 * (1.0 - m_corr / m_free.max(1e-300)),
        100.0 * observe_fraction
    );
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn cmd_evaluate(cfg: &FlatConfig, common: &Common) -> Result<Vec<PathBuf>, CliError> {
    let data_dir: PathBuf = cfg.require::<String>("data_dir")?.into();
    let zone_seed = common.seed.unwrap_or(cfg.get_or("zone_seed", 0u64)?);
    let manifest = DatasetManifest::read(&data_dir)?;
    let mut surrogate = load_surrogate(cfg, &manifest)?;
    cfg.finish()?;

    let data = load_dataset(&data_dir)?;
    if data.val_inputs.is_empty() {
        return Err(CliError::new(
            "evaluate",
            EXIT_EVAL,
            "dataset has no validation samples",
        ));
    }
    let grid = data.grid;
    let n = grid.ncells();

    // Predictions and targets in physical units.
    let errors = prediction_errors(&mut surrogate, &data, usize::MAX)?;
    let targets: Vec<Vec<f64>> = data
        .val_targets
        .iter()
        .map(|t| t.iter().map(|&v| v as f64).collect())
        .collect();
    let predictions: Vec<Vec<f64>> = errors
        .iter()
        .zip(&targets)
        .map(|(e, t)| e.iter().zip(t).map(|(a, b)| a + b).collect())
        .collect();

    // Zones from the validation targets' depth fields.
    let snapshots: Vec<FlowState> = targets
        .iter()
        .map(|t| {
            let mut s = FlowState::dry(grid);
            s.h.copy_from_slice(&t[..n]);
            s
        })
        .collect();
    let zones = classify_zones(&snapshots, zone_seed)?;
    let table = one_step_table(&predictions, &targets, &zones)?;

    let mut artifacts = Vec::new();
    let table_path = common.out.join("one_step.csv");
    std::fs::write(&table_path, table.to_csv())?;
    artifacts.push(table_path);

    // Zone map raster: river bright, channel mid, dry dark.
    let zone_values: Vec<f64> = zones
        .label
        .iter()
        .map(|z| match z {
            Zone::River => 2.0,
            Zone::Channel => 1.0,
            Zone::Dry => 0.0,
        })
        .collect();
    let zone_path = common.out.join("zones.pgm");
    write_pgm(&zone_path, grid, &zone_values, 0.0, 2.0)?;
    artifacts.push(zone_path);

    // Example prediction/target/error heatmaps for the first validation
    // sample (depth channel).
    let mut pred_state = FlowState::dry(grid);
    pred_state
        .h
        .copy_from_slice(&predictions[0][..n]);
    pred_state.h.iter_mut().for_each(|v| *v = v.max(0.0));
    write_depth_heatmaps(&common.out, "sample0", &pred_state, &snapshots[0], &mut artifacts)?;

    println!("evaluate: {} validation samples", table.n_samples);
    for row in &table.rows {
        println!(
            "evaluate: zone {:>7} pixels {:>6} mse_all {:.6e} mse_depth {:.6e}",
            row.zone.name(),
            row.pixels,
            row.mse_all,
            row.mse_depth
        );
    }
    println!(
        "evaluate: global mse_all {:.6e} mse_depth {:.6e}",
        table.global_all, table.global_depth
    );
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn cmd_bench(cfg: &FlatConfig, common: &Common) -> Result<Vec<PathBuf>, CliError> {
    let mut setup = rollout_setup(cfg, common)?;
    let repetitions = cfg.get_or("repetitions", 5usize)?;
    cfg.finish()?;
    let horizon = setup.n_steps as f64 * setup.lead_time;
    let params = scenario_solver_params();
    let (terrain, state0, forcing) = (&setup.terrain, &setup.state0, &setup.forcing);
    let surrogate = &mut setup.surrogate;
    let n_steps = setup.n_steps;
    let bench = speed_benchmark::<CliError, _, _>(
        || {
            let snaps = run(state0, terrain, forcing, &params, horizon, horizon)?;
            std::hint::black_box(&snaps);
            Ok(())
        },
        || {
            let snaps = rollout(surrogate, state0, forcing, n_steps)?;
            std::hint::black_box(&snaps);
            Ok(())
        },
        repetitions,
    )?;
    let mut csv = String::from("quantity,seconds\n");
    let _ = writeln!(csv, "solver_median,{:.9}", bench.solver_seconds);
    let _ = writeln!(csv, "surrogate_median,{:.9}", bench.surrogate_seconds);
    let _ = writeln!(csv, "ratio,{:.3}", bench.ratio);
    for (i, s) in bench.solver_samples.iter().enumerate() {
        let _ = writeln!(csv, "solver_rep{i},{s:.9}");
    }
    for (i, s) in bench.surrogate_samples.iter().enumerate() {
        let _ = writeln!(csv, "surrogate_rep{i},{s:.9}");
    }
    let path = common.out.join("bench.csv");
    std::fs::write(&path, csv)?;
    println!(
        "bench: solver {:.4} s vs surrogate {:.6} s over {horizon} s horizon -> {:.0}x",
        bench.solver_seconds, bench.surrogate_seconds, bench.ratio
    );
    Ok(vec![path])
}
