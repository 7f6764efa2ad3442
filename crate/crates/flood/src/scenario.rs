//! Synthetic terrain and forcing scenarios, solver-driven dataset generation,
//! and extraction of supervised training pairs in the 5-channel input /
//! 3-channel target layout.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::field::{
    write_field_file, FieldError, FlowState, ForcingPlan, GridSpec, Inflow, NamedField, Terrain,
};
use crate::solver::{lake_state, run, SolverError, SolverParams};

/// Number of input channels: h, qx, qy, mean inflow, mean rain.
pub const IN_CHANNELS: usize = 5;
/// Number of target channels: h, qx, qy at `t + lead_time`.
pub const OUT_CHANNELS: usize = 3;

/// Channel names in manifest order: the five input channels followed by the
/// three target channels.
pub const CHANNEL_NAMES: [&str; 8] = [
    "in_h", "in_qx", "in_qy", "in_inflow", "in_rain", "out_h", "out_qx", "out_qy",
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("lead time {lead} is not a multiple of snapshot spacing {spacing}")]
    LeadNotMultiple { lead: f64, spacing: f64 },
    #[error("manifest parse error: {0}")]
    ManifestParse(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RainPattern {
    Constant,
    Pulse,
    Ramp,
}

impl std::str::FromStr for RainPattern {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "constant" => Ok(Self::Constant),
            "pulse" => Ok(Self::Pulse),
            "ramp" => Ok(Self::Ramp),
            other => Err(format!("unknown rain pattern `{other}`")),
        }
    }
}

impl std::fmt::Display for RainPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Pulse => "pulse",
            Self::Ramp => "ramp",
        })
    }
}

/// Knobs of scenario and dataset generation. All randomness derives from
/// `seed`, so generation is a pure function of the config.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub grid: GridSpec,
    pub n_subareas: usize,
    /// Simulated horizon per scenario (s).
    pub horizon: f64,
    /// Snapshot spacing (s); also the sampling interval of forcing series.
    pub snapshot_every: f64,
    /// Prediction lead time (s); must be a multiple of `snapshot_every`.
    pub lead_time: f64,
    pub rain_pattern: RainPattern,
    /// Peak rain rate (m/s).
    pub rain_scale: f64,
    pub inflow_count: usize,
    /// Peak inflow discharge (m^3/s).
    pub inflow_scale: f64,
    /// Dirichlet boundary level drawn uniformly from this range (m).
    pub boundary_level_range: (f64, f64),
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: GridSpec::new(64, 64, 10.0, 10.0).expect("valid default grid"),
            n_subareas: 9,
            horizon: 7200.0,
            snapshot_every: 60.0,
            lead_time: 1800.0,
            rain_pattern: RainPattern::Pulse,
            rain_scale: 20.0e-3 / 3600.0,
            inflow_count: 2,
            inflow_scale: 2.0,
            boundary_level_range: (0.1, 0.6),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::InvalidConfig(m));
        if self.n_subareas == 0 {
            return bad("n_subareas must be positive".into());
        }
        if !(self.horizon > 0.0) || !(self.snapshot_every > 0.0) || !(self.lead_time > 0.0) {
            return bad("horizon, snapshot_every and lead_time must be positive".into());
        }
        let ratio = self.lead_time / self.snapshot_every;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 - 1e-9 {
            return bad(format!(
                "lead_time {} must be a positive multiple of snapshot_every {}",
                self.lead_time, self.snapshot_every
            ));
        }
        if self.horizon < self.lead_time {
            return bad("horizon must be at least lead_time".into());
        }
        if !(self.rain_scale >= 0.0) || !(self.inflow_scale >= 0.0) {
            return bad("rain_scale and inflow_scale must be nonnegative".into());
        }
        let (lo, hi) = self.boundary_level_range;
        if !(hi >= lo) {
            return bad("boundary_level_range must satisfy lo <= hi".into());
        }
        Ok(())
    }
}

/// Side facts about a synthesized terrain used by tests and forcing placement.
#[derive(Debug, Clone)]
pub struct TerrainInfo {
    /// Elevation of the valley bank: cells below it count as the carved
    /// river/channel system plus naturally low ground.
    pub bank_elevation: f64,
    /// Main-valley centerline row per column.
    pub centerline: Vec<f64>,
}

/// Deterministic synthetic terrain: a gently sloping plain with smooth bumps,
/// one meandering main valley, and a few tributary channels joining it.
/// Manning roughness is assigned by landform class (river bed, tributary
/// channel, land).
pub fn synth_terrain(seed: u64, grid: GridSpec) -> Terrain {
    synth_terrain_detailed(seed, grid).0
}

pub fn synth_terrain_detailed(seed: u64, grid: GridSpec) -> (Terrain, TerrainInfo) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (nx, ny) = (grid.nx, grid.ny);
    let n = nx * ny;
    let tau = std::f64::consts::TAU;

    // Base landscape: eastward down-slope plus a few smooth sinusoidal bumps.
    let base0: f64 = rng.gen_range(2.8..3.4);
    let slope: f64 = rng.gen_range(0.5..1.0);
    let mut modes = Vec::with_capacity(4);
    for _ in 0..4 {
        let amp: f64 = rng.gen_range(0.10..0.30);
        let fx: f64 = rng.gen_range(-2.5..2.5);
        let fy: f64 = rng.gen_range(-2.5..2.5);
        let phase: f64 = rng.gen_range(0.0..tau);
        modes.push((amp, fx, fy, phase));
    }
    let mut base = vec![0.0; n];
    let mut base_sum = 0.0;
    for j in 0..ny {
        for i in 0..nx {
            let xf = i as f64 / (nx - 1) as f64;
            let yf = j as f64 / (ny - 1) as f64;
            let mut v = base0 - slope * xf;
            for &(amp, fx, fy, phase) in &modes {
                v += amp * (tau * (fx * xf + fy * yf) + phase).sin();
            }
            base[j * nx + i] = v;
            base_sum += v;
        }
    }
    let bank_elevation = base_sum / n as f64 - 1.0;

    // Main valley: a meandering west-east channel carved as a Gaussian
    // cross-section of fixed depth.
    let amp_v: f64 = rng.gen_range(ny as f64 / 10.0..ny as f64 / 6.0);
    let freq_v: f64 = rng.gen_range(0.6..1.4);
    let phase_v: f64 = rng.gen_range(0.0..tau);
    let sigma_v: f64 = rng.gen_range(2.0..2.8);
    const VALLEY_DEPTH: f64 = 2.4;
    let mut centerline = vec![0.0; nx];
    let mut carve_main = vec![0.0; n];
    for i in 0..nx {
        let xf = i as f64 / (nx - 1) as f64;
        let c = ny as f64 / 2.0 + amp_v * (tau * freq_v * xf + phase_v).sin();
        centerline[i] = c;
        for j in 0..ny {
            let d = j as f64 - c;
            carve_main[j * nx + i] = VALLEY_DEPTH * (-d * d / (2.0 * sigma_v * sigma_v)).exp();
        }
    }

    // Tributaries: channels running from the north/south edge down to the
    // main valley.
    const TRIB_DEPTH: f64 = 1.3;
    const TRIB_SIGMA: f64 = 1.3;
    let n_tribs = rng.gen_range(2..=3);
    let mut carve_trib = vec![0.0; n];
    for _ in 0..n_tribs {
        let from_north: bool = rng.gen();
        let x0: f64 = rng.gen_range(0.15..0.85) * nx as f64;
        let drift: f64 = rng.gen_range(-0.4..0.4);
        let rows: Vec<usize> = if from_north {
            (0..ny).collect()
        } else {
            (0..ny).rev().collect()
        };
        for (step, &j) in rows.iter().enumerate() {
            let x = x0 + drift * step as f64;
            // Stop once the tributary reaches the main valley.
            let near_i = (x.round().max(0.0) as usize).min(nx - 1);
            if (j as f64 - centerline[near_i]).abs() < sigma_v {
                break;
            }
            for i in 0..nx {
                let d = i as f64 - x;
                let c = TRIB_DEPTH * (-d * d / (2.0 * TRIB_SIGMA * TRIB_SIGMA)).exp();
                let cell = j * nx + i;
                if c > carve_trib[cell] {
                    carve_trib[cell] = c;
                }
            }
        }
    }

    let mut elevation = vec![0.0; n];
    let mut manning = vec![0.0; n];
    for c in 0..n {
        let carve = carve_main[c].max(carve_trib[c]);
        elevation[c] = base[c] - carve;
        manning[c] = if carve_main[c] > 1.2 {
            0.030 // river bed
        } else if carve_trib[c] > 0.65 {
            0.040 // tributary channel
        } else {
            0.080 // vegetated land
        };
    }

    let terrain = Terrain::new(grid, elevation, manning).expect("synthesized terrain is valid");
    (
        terrain,
        TerrainInfo {
            bank_elevation,
            centerline,
        },
    )
}

/// Partition the grid into `k` rectangular rain sub-areas (as close to a
/// square tiling as `k` allows).
pub fn subarea_tiling(grid: GridSpec, k: usize) -> Vec<u16> {
    assert!(k >= 1 && k <= u16::MAX as usize);
    let cols = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(cols);
    let mut map = vec![0u16; grid.ncells()];
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let r = (j * rows / grid.ny).min(rows - 1);
            let c = (i * cols / grid.nx).min(cols - 1);
            map[j * grid.nx + i] = ((r * cols + c).min(k - 1)) as u16;
        }
    }
    map
}

/// Deterministic forcing plan for scenario `index`: boundary level drawn
/// uniformly from the configured range, per-sub-area rain series following
/// the configured pattern, and point inflows placed on upstream river cells.
pub fn sample_forcing(
    config: &ScenarioConfig,
    terrain: &Terrain,
    index: u64,
) -> Result<ForcingPlan, ScenarioError> {
    config.validate()?;
    let grid = config.grid;
    if terrain.grid != grid {
        return Err(ScenarioError::Field(FieldError::GridMismatch(
            "terrain grid differs from config grid".into(),
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    rng.set_stream(index.wrapping_add(1));

    let (lo, hi) = config.boundary_level_range;
    let boundary_level = if hi > lo { rng.gen_range(lo..hi) } else { lo };

    let dt = config.snapshot_every;
    let n_steps = (config.horizon / dt).ceil() as usize;
    let k = config.n_subareas;
    let mut rain = vec![vec![0.0; k]; n_steps];
    match config.rain_pattern {
        RainPattern::Constant => {
            for row in &mut rain {
                for v in row.iter_mut() {
                    *v = config.rain_scale;
                }
            }
        }
        RainPattern::Pulse => {
            for sub in 0..k {
                let start: f64 = rng.gen_range(0.0..0.5) * config.horizon;
                let len: f64 = rng.gen_range(0.2..0.5) * config.horizon;
                let amp: f64 = rng.gen_range(0.5..1.0) * config.rain_scale;
                for (t, row) in rain.iter_mut().enumerate() {
                    let time = t as f64 * dt;
                    if time >= start && time < start + len {
                        row[sub] = amp;
                    }
                }
            }
        }
        RainPattern::Ramp => {
            for sub in 0..k {
                let amp: f64 = rng.gen_range(0.5..1.0) * config.rain_scale;
                for (t, row) in rain.iter_mut().enumerate() {
                    row[sub] = amp * (t as f64 * dt / config.horizon).min(1.0);
                }
            }
        }
    }

    // Inflows enter on upstream (western third) river-bed cells.
    let mut river_cells = Vec::new();
    for j in 1..grid.ny - 1 {
        for i in 1..grid.nx / 3 {
            let c = j * grid.nx + i;
            if terrain.manning[c] == 0.030 {
                river_cells.push(c);
            }
        }
    }
    let mut inflows = Vec::new();
    for _ in 0..config.inflow_count {
        if river_cells.is_empty() {
            break;
        }
        let pick = rng.gen_range(0..river_cells.len());
        let cell = river_cells.swap_remove(pick);
        let q: f64 = rng.gen_range(0.5..1.0) * config.inflow_scale;
        inflows.push(Inflow {
            cell,
            series: vec![q],
        });
    }

    let plan = ForcingPlan {
        grid,
        n_subareas: k,
        subarea_map: subarea_tiling(grid, k),
        rain,
        inflows,
        boundary_level,
        duration: config.horizon,
        dt,
    };
    plan.validate()?;
    Ok(plan)
}

/// Seconds of pre-simulation used to produce the drained initial state.
pub const SPINUP_SECONDS: f64 = 1800.0;

/// Solver parameters used throughout the scenario pipeline. Flood depths are
/// meter-scale, so the dry threshold is raised to 1 mm: the micrometer
/// library default is meant for idealized benchmarks and lets sub-millimeter
/// films on steep synthetic terrain accumulate spurious momentum, collapsing
/// the CFL step.
pub fn scenario_solver_params() -> SolverParams {
    SolverParams {
        h_eps: 1e-3,
        ..SolverParams::default()
    }
}

/// Deterministic scenario `index` under `config`: the shared terrain, a
/// drained steady initial state (30 simulated minutes from boundary-level
/// flooding with no rain), and the forcing plan.
pub fn sample_scenario(
    config: &ScenarioConfig,
    index: u64,
) -> Result<(Terrain, FlowState, ForcingPlan), ScenarioError> {
    config.validate()?;
    let terrain = synth_terrain(config.seed, config.grid);
    let forcing = sample_forcing(config, &terrain, index)?;
    let spinup_plan = ForcingPlan::none(config.grid, forcing.boundary_level, SPINUP_SECONDS);
    let flooded = lake_state(&terrain, forcing.boundary_level);
    let params = scenario_solver_params();
    let snaps = run(
        &flooded,
        &terrain,
        &spinup_plan,
        &params,
        SPINUP_SECONDS,
        SPINUP_SECONDS,
    )?;
    let mut state0 = snaps.into_iter().last().expect("at least one snapshot");
    state0.time = 0.0;
    Ok((terrain, state0, forcing))
}

/// One supervised pair: 5-channel input image and 3-channel target image,
/// stored row-major as channel-contiguous f32 planes.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// 5 x ny x nx: h, qx, qy, mean inflow (m/s), mean rain (m/s) at time t.
    pub input: Vec<f32>,
    /// 3 x ny x nx: h, qx, qy at t + lead_time.
    pub target: Vec<f32>,
    pub scenario: u64,
    pub t: f64,
}

/// Extract one training pair per valid snapshot time: input state channels
/// are the snapshot at `t` exactly; forcing channels are the time-average of
/// rain and inflow over `[t, t + lead_time]`; the target is the snapshot at
/// `t + lead_time`.
pub fn extract_pairs(
    snapshots: &[FlowState],
    forcing: &ForcingPlan,
    lead_time: f64,
    scenario: u64,
) -> Result<Vec<TrainingSample>, ScenarioError> {
    if snapshots.len() < 2 {
        return Ok(Vec::new());
    }
    let spacing = snapshots[1].time - snapshots[0].time;
    if !(spacing > 0.0) {
        return Err(ScenarioError::InvalidConfig(
            "snapshots must have increasing times".into(),
        ));
    }
    let ratio = lead_time / spacing;
    let steps = ratio.round() as usize;
    if (ratio - ratio.round()).abs() > 1e-9 || steps == 0 {
        return Err(ScenarioError::LeadNotMultiple {
            lead: lead_time,
            spacing,
        });
    }
    let grid = snapshots[0].grid;
    let n = grid.ncells();
    let area = grid.cell_area();
    let mut out = Vec::new();
    for s in 0..snapshots.len().saturating_sub(steps) {
        let snap = &snapshots[s];
        let target = &snapshots[s + steps];
        let t = snap.time;
        let mut input = vec![0.0f32; IN_CHANNELS * n];
        for c in 0..n {
            input[c] = snap.h[c] as f32;
            input[n + c] = snap.qx[c] as f32;
            input[2 * n + c] = snap.qy[c] as f32;
        }
        // Mean inflow over the lead window, rasterized as discharge per cell
        // area (m/s).
        for (i, inf) in forcing.inflows.iter().enumerate() {
            let mean_q = forcing.inflow_integral(t, t + lead_time, i) / lead_time;
            input[3 * n + inf.cell] += (mean_q / area) as f32;
        }
        // Mean rain over the lead window per sub-area, rasterized (m/s).
        let mut mean_rain = vec![0.0f64; forcing.n_subareas];
        for (k, m) in mean_rain.iter_mut().enumerate() {
            *m = forcing.rain_integral(t, t + lead_time, k) / lead_time;
        }
        for c in 0..n {
            input[4 * n + c] = mean_rain[forcing.subarea_map[c] as usize] as f32;
        }
        let mut tgt = vec![0.0f32; OUT_CHANNELS * n];
        for c in 0..n {
            tgt[c] = target.h[c] as f32;
            tgt[n + c] = target.qx[c] as f32;
            tgt[2 * n + c] = target.qy[c] as f32;
        }
        out.push(TrainingSample {
            input,
            target: tgt,
            scenario,
            t,
        });
    }
    Ok(out)
}

/// One sample reference in a dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEntry {
    /// Path relative to the manifest's directory.
    pub file: String,
    pub scenario: u64,
    pub t: f64,
}

/// Per-channel statistics over the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStat {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// Deterministic description of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub grid: GridSpec,
    pub seed: u64,
    pub n_scenarios: usize,
    pub lead_time: f64,
    pub snapshot_every: f64,
    pub channel_stats: Vec<ChannelStat>,
    pub train: Vec<SampleEntry>,
    pub val: Vec<SampleEntry>,
    /// Scenario indices that failed, with the error text; failures are
    /// logged, not fatal.
    pub failed: Vec<(u64, String)>,
}

pub const MANIFEST_MAGIC: &str = "FCDS1";
pub const MANIFEST_FILE: &str = "manifest.txt";

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MANIFEST_MAGIC}");
        let _ = writeln!(
            s,
            "grid {} {} {} {}",
            self.grid.nx, self.grid.ny, self.grid.dx, self.grid.dy
        );
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "scenarios {}", self.n_scenarios);
        let _ = writeln!(s, "lead_time {}", self.lead_time);
        let _ = writeln!(s, "snapshot_every {}", self.snapshot_every);
        for st in &self.channel_stats {
            let _ = writeln!(s, "channel {} {} {}", st.name, st.mean, st.std);
        }
        let _ = writeln!(s, "train {}", self.train.len());
        for e in &self.train {
            let _ = writeln!(s, "sample train {} {} {}", e.file, e.scenario, e.t);
        }
        let _ = writeln!(s, "val {}", self.val.len());
        for e in &self.val {
            let _ = writeln!(s, "sample val {} {} {}", e.file, e.scenario, e.t);
        }
        for (idx, err) in &self.failed {
            let _ = writeln!(s, "failed {} {}", idx, err.replace('\n', " "));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let bad = |m: &str| ScenarioError::ManifestParse(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_MAGIC) {
            return Err(bad("bad magic"));
        }
        let mut grid = None;
        let mut seed = 0u64;
        let mut n_scenarios = 0usize;
        let mut lead_time = 0.0;
        let mut snapshot_every = 0.0;
        let mut channel_stats = Vec::new();
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut failed = Vec::new();
        let mut expect_train = 0usize;
        let mut expect_val = 0usize;
        for line in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.is_empty() {
                continue;
            }
            match toks[0] {
                "grid" if toks.len() == 5 => {
                    let nx = toks[1].parse().map_err(|_| bad("bad nx"))?;
                    let ny = toks[2].parse().map_err(|_| bad("bad ny"))?;
                    let dx = toks[3].parse().map_err(|_| bad("bad dx"))?;
                    let dy = toks[4].parse().map_err(|_| bad("bad dy"))?;
                    grid = Some(
                        GridSpec::new(nx, ny, dx, dy)
                            .map_err(|e| ScenarioError::ManifestParse(e.to_string()))?,
                    );
                }
                "seed" if toks.len() == 2 => {
                    seed = toks[1].parse().map_err(|_| bad("bad seed"))?;
                }
                "scenarios" if toks.len() == 2 => {
                    n_scenarios = toks[1].parse().map_err(|_| bad("bad scenarios"))?;
                }
                "lead_time" if toks.len() == 2 => {
                    lead_time = toks[1].parse().map_err(|_| bad("bad lead_time"))?;
                }
                "snapshot_every" if toks.len() == 2 => {
                    snapshot_every = toks[1].parse().map_err(|_| bad("bad snapshot_every"))?;
                }
                "channel" if toks.len() == 4 => {
                    channel_stats.push(ChannelStat {
                        name: toks[1].to_string(),
                        mean: toks[2].parse().map_err(|_| bad("bad mean"))?,
                        std: toks[3].parse().map_err(|_| bad("bad std"))?,
                    });
                }
                "train" if toks.len() == 2 => {
                    expect_train = toks[1].parse().map_err(|_| bad("bad train count"))?;
                }
                "val" if toks.len() == 2 => {
                    expect_val = toks[1].parse().map_err(|_| bad("bad val count"))?;
                }
                "sample" if toks.len() == 5 => {
                    let entry = SampleEntry {
                        file: toks[2].to_string(),
                        scenario: toks[3].parse().map_err(|_| bad("bad scenario id"))?,
                        t: toks[4].parse().map_err(|_| bad("bad sample time"))?,
                    };
                    match toks[1] {
                        "train" => train.push(entry),
                        "val" => val.push(entry),
                        _ => return Err(bad("bad sample split")),
                    }
                }
                "failed" if toks.len() >= 2 => {
                    failed.push((
                        toks[1].parse().map_err(|_| bad("bad failed index"))?,
                        toks[2..].join(" "),
                    ));
                }
                _ => return Err(ScenarioError::ManifestParse(format!("bad line `{line}`"))),
            }
        }
        let grid = grid.ok_or_else(|| bad("missing grid"))?;
        if train.len() != expect_train || val.len() != expect_val {
            return Err(bad("sample counts disagree with header"));
        }
        Ok(Self {
            grid,
            seed,
            n_scenarios,
            lead_time,
            snapshot_every,
            channel_stats,
            train,
            val,
            failed,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), ScenarioError> {
        std::fs::write(dir.join(MANIFEST_FILE), self.to_text()).map_err(FieldError::Io)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(FieldError::Io)?;
        Self::parse(&text)
    }
}

/// Write one training sample as a field file with `input` and `target`
/// tensors carrying shape metadata.
pub fn write_sample(path: &Path, grid: GridSpec, sample: &TrainingSample) -> Result<(), FieldError> {
    write_field_file(
        path,
        grid,
        &[
            NamedField {
                name: "input".into(),
                values: sample.input.clone(),
                shape: Some(vec![IN_CHANNELS, grid.ny, grid.nx]),
            },
            NamedField {
                name: "target".into(),
                values: sample.target.clone(),
                shape: Some(vec![OUT_CHANNELS, grid.ny, grid.nx]),
            },
        ],
    )
}

/// Read back a training sample written by [`write_sample`].
pub fn read_sample(path: &Path) -> Result<(GridSpec, Vec<f32>, Vec<f32>), FieldError> {
    let (grid, fields) = crate::field::read_field_file(path)?;
    let get = |name: &str| -> Result<Vec<f32>, FieldError> {
        fields
            .iter()
            .find(|f| f.name == name)
            .map(|f| f.values.clone())
            .ok_or_else(|| FieldError::MalformedHeader(format!("missing field `{name}`")))
    };
    let input = get("input")?;
    let target = get("target")?;
    let n = grid.ncells();
    if input.len() != IN_CHANNELS * n || target.len() != OUT_CHANNELS * n {
        return Err(FieldError::SizeMismatch {
            name: "input/target".into(),
            got: input.len() + target.len(),
            want: (IN_CHANNELS + OUT_CHANNELS) * n,
        });
    }
    Ok((grid, input, target))
}

/// Simulate `n_scenarios` scenarios, extract training pairs, shuffle
/// deterministically, split train/validation 5:1, write samples as field
/// files under `out_dir/samples/` and the manifest at
/// `out_dir/manifest.txt`. A failed scenario is recorded and skipped.
pub fn build_dataset(
    config: &ScenarioConfig,
    n_scenarios: usize,
    out_dir: &Path,
) -> Result<DatasetManifest, ScenarioError> {
    config.validate()?;
    let samples_dir = out_dir.join("samples");
    std::fs::create_dir_all(&samples_dir).map_err(FieldError::Io)?;
    let grid = config.grid;
    let params = scenario_solver_params();
    let terrain = synth_terrain(config.seed, grid);

    let mut all: Vec<TrainingSample> = Vec::new();
    let mut failed = Vec::new();
    for index in 0..n_scenarios as u64 {
        let result = (|| -> Result<Vec<TrainingSample>, ScenarioError> {
            let forcing = sample_forcing(config, &terrain, index)?;
            let spinup_plan =
                ForcingPlan::none(grid, forcing.boundary_level, SPINUP_SECONDS);
            let flooded = lake_state(&terrain, forcing.boundary_level);
            let snaps = run(
                &flooded,
                &terrain,
                &spinup_plan,
                &params,
                SPINUP_SECONDS,
                SPINUP_SECONDS,
            )?;
            let mut state0 = snaps.into_iter().last().expect("snapshot");
            state0.time = 0.0;
            let snapshots = run(
                &state0,
                &terrain,
                &forcing,
                &params,
                config.horizon,
                config.snapshot_every,
            )?;
            extract_pairs(&snapshots, &forcing, config.lead_time, index)
        })();
        match result {
            Ok(mut pairs) => all.append(&mut pairs),
            Err(e) => failed.push((index, e.to_string())),
        }
    }

    // Deterministic shuffle, then a 5:1 train/validation split.
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX); // distinct from all scenario streams
    for i in (1..all.len()).rev() {
        let j = rng.gen_range(0..=i);
        all.swap(i, j);
    }
    let n_val = all.len() / 6;
    let n_train = all.len() - n_val;

    let n = grid.ncells();
    let n_channels = IN_CHANNELS + OUT_CHANNELS;
    let mut sums = vec![0.0f64; n_channels];
    let mut sq_sums = vec![0.0f64; n_channels];
    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n_val);
    for (i, sample) in all.iter().enumerate() {
        let file = format!("samples/{:06}.fld", i);
        write_sample(&out_dir.join(&file), grid, sample)?;
        let entry = SampleEntry {
            file,
            scenario: sample.scenario,
            t: sample.t,
        };
        if i < n_train {
            for ch in 0..IN_CHANNELS {
                for c in 0..n {
                    let v = sample.input[ch * n + c] as f64;
                    sums[ch] += v;
                    sq_sums[ch] += v * v;
                }
            }
            for ch in 0..OUT_CHANNELS {
                for c in 0..n {
                    let v = sample.target[ch * n + c] as f64;
                    sums[IN_CHANNELS + ch] += v;
                    sq_sums[IN_CHANNELS + ch] += v * v;
                }
            }
            train.push(entry);
        } else {
            val.push(entry);
        }
    }
    let count = (n_train * n) as f64;
    let channel_stats = (0..n_channels)
        .map(|ch| {
            let (mean, std) = if count > 0.0 {
                let mean = sums[ch] / count;
                (mean, (sq_sums[ch] / count - mean * mean).max(0.0).sqrt())
            } else {
                (0.0, 0.0)
            };
            ChannelStat {
                name: CHANNEL_NAMES[ch].to_string(),
                mean,
                std,
            }
        })
        .collect();

    let manifest = DatasetManifest {
        grid,
        seed: config.seed,
        n_scenarios,
        lead_time: config.lead_time,
        snapshot_every: config.snapshot_every,
        channel_stats,
        train,
        val,
        failed,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Forcing-plan text format
//
//   FPLN1
//   grid <nx> <ny> <dx> <dy>
//   subareas <k>
//   dt <s>
//   duration <s>
//   boundary_level <m>
//   map
//   <ny rows of nx sub-area ids>
//   rain <n_rows>
//   <n_rows rows of k rates, m/s>
//   inflows <n>
//   inflow <cell> <len> <len values, m^3/s>
// ---------------------------------------------------------------------------

pub const FORCING_MAGIC: &str = "FPLN1";

pub fn forcing_to_text(plan: &ForcingPlan) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{FORCING_MAGIC}");
    let _ = writeln!(
        s,
        "grid {} {} {} {}",
        plan.grid.nx, plan.grid.ny, plan.grid.dx, plan.grid.dy
    );
    let _ = writeln!(s, "subareas {}", plan.n_subareas);
    let _ = writeln!(s, "dt {}", plan.dt);
    let _ = writeln!(s, "duration {}", plan.duration);
    let _ = writeln!(s, "boundary_level {}", plan.boundary_level);
    let _ = writeln!(s, "map");
    for j in 0..plan.grid.ny {
        let row: Vec<String> = (0..plan.grid.nx)
            .map(|i| plan.subarea_map[j * plan.grid.nx + i].to_string())
            .collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    let _ = writeln!(s, "rain {}", plan.rain.len());
    for row in &plan.rain {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", vals.join(" "));
    }
    let _ = writeln!(s, "inflows {}", plan.inflows.len());
    for inf in &plan.inflows {
        let vals: Vec<String> = inf.series.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "inflow {} {} {}", inf.cell, inf.series.len(), vals.join(" "));
    }
    s
}

/// Parse a forcing plan from its text form. Untrusted-input entry point: all
/// structural problems are reported as `ManifestParse`, value problems as the
/// plan's own validation errors.
pub fn forcing_from_text(text: &str) -> Result<ForcingPlan, ScenarioError> {
    const MAX_SERIES: usize = 1 << 22;
    let bad = |m: &str| ScenarioError::ManifestParse(m.to_string());
    let mut lines = text.lines();
    let mut next =
        |what: &str| -> Result<&str, ScenarioError> { lines.next().ok_or_else(|| bad(what)) };
    if next("missing magic")?.trim_end() != FORCING_MAGIC {
        return Err(bad("bad magic"));
    }
    let grid_line = next("missing grid")?;
    let toks: Vec<&str> = grid_line.split_whitespace().collect();
    if toks.len() != 5 || toks[0] != "grid" {
        return Err(bad("expected `grid nx ny dx dy`"));
    }
    let grid = GridSpec::new(
        toks[1].parse().map_err(|_| bad("bad nx"))?,
        toks[2].parse().map_err(|_| bad("bad ny"))?,
        toks[3].parse().map_err(|_| bad("bad dx"))?,
        toks[4].parse().map_err(|_| bad("bad dy"))?,
    )
    .map_err(|e| ScenarioError::ManifestParse(e.to_string()))?;
    if grid.ncells() > MAX_SERIES {
        return Err(bad("grid too large"));
    }
    let mut scalar = |key: &str| -> Result<f64, ScenarioError> {
        let line = lines.next().ok_or_else(|| bad("unexpected end"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 || toks[0] != key {
            return Err(ScenarioError::ManifestParse(format!("expected `{key} v`")));
        }
        toks[1]
            .parse()
            .map_err(|_| ScenarioError::ManifestParse(format!("bad {key}")))
    };
    let k = scalar("subareas")? as usize;
    if k == 0 || k > u16::MAX as usize {
        return Err(bad("subareas out of range"));
    }
    let dt = scalar("dt")?;
    let duration = scalar("duration")?;
    let boundary_level = scalar("boundary_level")?;
    if lines.next().map(str::trim_end) != Some("map") {
        return Err(bad("expected `map`"));
    }
    let mut subarea_map = Vec::with_capacity(grid.ncells());
    for _ in 0..grid.ny {
        let row = lines.next().ok_or_else(|| bad("truncated map"))?;
        for tok in row.split_whitespace() {
            subarea_map.push(tok.parse::<u16>().map_err(|_| bad("bad map id"))?);
        }
    }
    if subarea_map.len() != grid.ncells() {
        return Err(bad("map size mismatch"));
    }
    let line = lines.next().ok_or_else(|| bad("missing rain"))?;
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 2 || toks[0] != "rain" {
        return Err(bad("expected `rain n`"));
    }
    let n_rows: usize = toks[1].parse().map_err(|_| bad("bad rain count"))?;
    if n_rows.saturating_mul(k) > MAX_SERIES {
        return Err(bad("rain series too large"));
    }
    let mut rain = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let row = lines.next().ok_or_else(|| bad("truncated rain"))?;
        let vals: Result<Vec<f64>, _> = row.split_whitespace().map(|t| t.parse()).collect();
        let vals = vals.map_err(|_| bad("bad rain value"))?;
        if vals.len() != k {
            return Err(bad("rain row width mismatch"));
        }
        rain.push(vals);
    }
    let line = lines.next().ok_or_else(|| bad("missing inflows"))?;
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 2 || toks[0] != "inflows" {
        return Err(bad("expected `inflows n`"));
    }
    let n_inflows: usize = toks[1].parse().map_err(|_| bad("bad inflow count"))?;
    if n_inflows > MAX_SERIES {
        return Err(bad("too many inflows"));
    }
    let mut inflows = Vec::with_capacity(n_inflows);
    for _ in 0..n_inflows {
        let line = lines.next().ok_or_else(|| bad("truncated inflows"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 || toks[0] != "inflow" {
            return Err(bad("expected `inflow cell len values...`"));
        }
        let cell: usize = toks[1].parse().map_err(|_| bad("bad inflow cell"))?;
        let len: usize = toks[2].parse().map_err(|_| bad("bad inflow len"))?;
        if len > MAX_SERIES || toks.len() != 3 + len {
            return Err(bad("inflow series length mismatch"));
        }
        let series: Result<Vec<f64>, _> = toks[3..].iter().map(|t| t.parse()).collect();
        inflows.push(Inflow {
            cell,
            series: series.map_err(|_| bad("bad inflow value"))?,
        });
    }
    let plan = ForcingPlan {
        grid,
        n_subareas: k,
        subarea_map,
        rain,
        inflows,
        boundary_level,
        duration,
        dt,
    };
    plan.validate()?;
    Ok(plan)
}
