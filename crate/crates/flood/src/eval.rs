//! Evaluation harness: MSE/PSNR metrics, k-means zone classification,
//! per-zone one-step error tables, rollout-divergence curves (CSV), a
//! solver-vs-surrogate speed benchmark, and grayscale PGM heatmaps.

use std::io::Write as IoWrite;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::field::{FlowState, GridSpec};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mean squared difference over all entries.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(EvalError::ShapeMismatch(format!(
            "pred has {} entries, target {}",
            pred.len(),
            target.len()
        )));
    }
    let mut acc = 0.0;
    for (a, b) in pred.iter().zip(target) {
        let d = a - b;
        acc += d * d;
    }
    Ok(acc / pred.len() as f64)
}

/// PSNR in decibels: 10 log10(peak^2 / MSE). A perfect match (MSE = 0) is
/// reported as the distinguished value `f64::INFINITY`.
pub fn psnr(pred: &[f64], target: &[f64], peak: f64) -> Result<f64, EvalError> {
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Largest absolute value over a set of reference vectors — the default PSNR
/// peak.
pub fn peak_value<'a, I: IntoIterator<Item = &'a [f64]>>(targets: I) -> f64 {
    let mut peak: f64 = 0.0;
    for t in targets {
        for &v in t {
            peak = peak.max(v.abs());
        }
    }
    peak
}

// ---------------------------------------------------------------------------
// Zone classification
// ---------------------------------------------------------------------------

/// Depth above which a cell counts as wet for the zone features (1 mm).
pub const WET_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Zone {
    River,
    Channel,
    Dry,
}

impl Zone {
    pub const ALL: [Zone; 3] = [Zone::River, Zone::Channel, Zone::Dry];

    pub fn name(self) -> &'static str {
        match self {
            Zone::River => "river",
            Zone::Channel => "channel",
            Zone::Dry => "dry",
        }
    }
}

/// Per-cell zone labels over a grid.
#[derive(Debug, Clone)]
pub struct ZoneMap {
    pub grid: GridSpec,
    pub label: Vec<Zone>,
}

impl ZoneMap {
    pub fn count(&self, zone: Zone) -> usize {
        self.label.iter().filter(|&&z| z == zone).count()
    }
}

const KMEANS_RESTARTS: usize = 50;
const KMEANS_TOL: f64 = 1e-6;
const KMEANS_MAX_ITERS: usize = 200;

/// Cluster cells into river / channel / dry zones from simulation snapshots.
///
/// Features per cell: mean depth, depth standard deviation, and wet fraction
/// across snapshots, standardized, clustered by k-means (k = 3, k-means++
/// seeding from `seed`, 50 restarts, tolerance 1e-6). Clusters are named by
/// mean-depth order: highest is river, lowest is dry. With fewer than 3
/// distinct feature vectors a threshold rule is used instead.
pub fn classify_zones(snapshots: &[FlowState], seed: u64) -> Result<ZoneMap, EvalError> {
    let Some(first) = snapshots.first() else {
        return Err(EvalError::Empty("classify_zones needs >= 1 snapshot".into()));
    };
    let grid = first.grid;
    let n = grid.ncells();
    if snapshots.iter().any(|s| s.grid != grid) {
        return Err(EvalError::ShapeMismatch("snapshots on different grids".into()));
    }
    let ns = snapshots.len() as f64;
    // Raw features: (mean depth, std depth, wet fraction).
    let mut feats = vec![[0.0f64; 3]; n];
    for c in 0..n {
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut wet = 0.0;
        for s in snapshots {
            let h = s.h[c];
            sum += h;
            sq += h * h;
            if h > WET_THRESHOLD {
                wet += 1.0;
            }
        }
        let mean = sum / ns;
        feats[c] = [mean, (sq / ns - mean * mean).max(0.0).sqrt(), wet / ns];
    }
    let mean_depth: Vec<f64> = feats.iter().map(|f| f[0]).collect();

    // Standardize each feature dimension.
    let mut std_feats = feats.clone();
    for d in 0..3 {
        let mean = feats.iter().map(|f| f[d]).sum::<f64>() / n as f64;
        let var = feats.iter().map(|f| (f[d] - mean).powi(2)).sum::<f64>() / n as f64;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        for (sf, f) in std_feats.iter_mut().zip(&feats) {
            sf[d] = (f[d] - mean) / std;
        }
    }

    // Degenerate data: fall back to a threshold rule.
    let mut distinct: Vec<[f64; 3]> = Vec::new();
    for f in &std_feats {
        if !distinct.iter().any(|g| g == f) {
            distinct.push(*f);
            if distinct.len() >= 3 {
                break;
            }
        }
    }
    if distinct.len() < 3 {
        return Ok(threshold_zones(grid, &feats));
    }

    let assign = kmeans3(&std_feats, seed);

    // Name clusters by mean depth: highest -> river, lowest -> dry.
    let mut depth_sum = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for (c, &k) in assign.iter().enumerate() {
        depth_sum[k] += mean_depth[c];
        counts[k] += 1;
    }
    let avg: Vec<f64> = (0..3)
        .map(|k| {
            if counts[k] > 0 {
                depth_sum[k] / counts[k] as f64
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| avg[b].partial_cmp(&avg[a]).expect("finite depth means"));
    let mut zone_of = [Zone::Dry; 3];
    zone_of[order[0]] = Zone::River;
    zone_of[order[1]] = Zone::Channel;
    zone_of[order[2]] = Zone::Dry;
    Ok(ZoneMap {
        grid,
        label: assign.iter().map(|&k| zone_of[k]).collect(),
    })
}

fn threshold_zones(grid: GridSpec, feats: &[[f64; 3]]) -> ZoneMap {
    let wet_depths: Vec<f64> = feats
        .iter()
        .filter(|f| f[2] > 0.0)
        .map(|f| f[0])
        .collect();
    let split = if wet_depths.is_empty() {
        f64::INFINITY
    } else {
        let lo = wet_depths.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = wet_depths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    };
    let label = feats
        .iter()
        .map(|f| {
            if f[2] == 0.0 {
                Zone::Dry
            } else if f[0] > split {
                Zone::River
            } else {
                Zone::Channel
            }
        })
        .collect();
    ZoneMap { grid, label }
}

/// Plain Lloyd k-means with k-means++ seeding, 50 restarts; returns the
/// assignment of the restart with the lowest inertia.
fn kmeans3(feats: &[[f64; 3]], seed: u64) -> Vec<usize> {
    let n = feats.len();
    let dist2 = |a: &[f64; 3], b: &[f64; 3]| -> f64 {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut best_assign = vec![0usize; n];
    let mut best_inertia = f64::INFINITY;
    for _restart in 0..KMEANS_RESTARTS {
        // k-means++ seeding.
        let mut centers = [[0.0f64; 3]; 3];
        centers[0] = feats[rng.gen_range(0..n)];
        let mut d2: Vec<f64> = feats.iter().map(|f| dist2(f, &centers[0])).collect();
        for k in 1..3 {
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let mut target = rng.gen::<f64>() * total;
                let mut chosen = n - 1;
                for (i, &w) in d2.iter().enumerate() {
                    target -= w;
                    if target <= 0.0 {
                        chosen = i;
                        break;
                    }
                }
                chosen
            } else {
                rng.gen_range(0..n)
            };
            centers[k] = feats[pick];
            for (i, f) in feats.iter().enumerate() {
                d2[i] = d2[i].min(dist2(f, &centers[k]));
            }
        }
        // Lloyd iterations.
        let mut assign = vec![0usize; n];
        for _it in 0..KMEANS_MAX_ITERS {
            for (i, f) in feats.iter().enumerate() {
                let mut bk = 0;
                let mut bd = dist2(f, &centers[0]);
                for k in 1..3 {
                    let d = dist2(f, &centers[k]);
                    if d < bd {
                        bd = d;
                        bk = k;
                    }
                }
                assign[i] = bk;
            }
            let mut sums = [[0.0f64; 3]; 3];
            let mut counts = [0usize; 3];
            for (i, &k) in assign.iter().enumerate() {
                for d in 0..3 {
                    sums[k][d] += feats[i][d];
                }
                counts[k] += 1;
            }
            let mut movement: f64 = 0.0;
            for k in 0..3 {
                if counts[k] == 0 {
                    continue; // keep an empty cluster's center in place
                }
                let mut nc = [0.0f64; 3];
                for d in 0..3 {
                    nc[d] = sums[k][d] / counts[k] as f64;
                }
                movement = movement.max(dist2(&nc, &centers[k]).sqrt());
                centers[k] = nc;
            }
            if movement < KMEANS_TOL {
                break;
            }
        }
        let inertia: f64 = feats
            .iter()
            .zip(&assign)
            .map(|(f, &k)| dist2(f, &centers[k]))
            .sum();
        if inertia < best_inertia {
            best_inertia = inertia;
            best_assign = assign;
        }
    }
    best_assign
}

// ---------------------------------------------------------------------------
// One-step tables
// ---------------------------------------------------------------------------

/// Per-zone error row of the one-step table.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneRow {
    pub zone: Zone,
    pub pixels: usize,
    /// MSE over all 3 state channels restricted to the zone (physical units).
    pub mse_all: f64,
    /// MSE over the depth channel only.
    pub mse_depth: f64,
}

#[derive(Debug, Clone)]
pub struct OneStepTable {
    pub rows: Vec<ZoneRow>,
    pub global_all: f64,
    pub global_depth: f64,
    pub n_samples: usize,
}

impl OneStepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("zone,pixels,mse_all_channels,mse_depth\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.12e},{:.12e}\n",
                r.zone.name(),
                r.pixels,
                r.mse_all,
                r.mse_depth
            ));
        }
        s.push_str(&format!(
            "all,{},{:.12e},{:.12e}\n",
            self.rows.iter().map(|r| r.pixels).sum::<usize>(),
            self.global_all,
            self.global_depth
        ));
        s
    }
}

/// Per-zone MSE over all channels and over depth only, averaged across a
/// validation set of (prediction, target) pairs flattened channel-major
/// [h | qx | qy] in physical units.
pub fn one_step_table(
    predictions: &[Vec<f64>],
    targets: &[Vec<f64>],
    zones: &ZoneMap,
) -> Result<OneStepTable, EvalError> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(EvalError::Empty(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let n = zones.grid.ncells();
    if zones.label.len() != n {
        return Err(EvalError::ShapeMismatch("zone map incomplete".into()));
    }
    for (p, t) in predictions.iter().zip(targets) {
        if p.len() != 3 * n || t.len() != 3 * n {
            return Err(EvalError::ShapeMismatch(format!(
                "sample length {} != 3x{n}",
                p.len()
            )));
        }
    }
    let mut sq_all = [0.0f64; 3];
    let mut sq_depth = [0.0f64; 3];
    let mut pixels = [0usize; 3];
    let zidx = |z: Zone| Zone::ALL.iter().position(|&w| w == z).expect("zone");
    for (_c, &z) in zones.label.iter().enumerate() {
        pixels[zidx(z)] += 1;
    }
    for (p, t) in predictions.iter().zip(targets) {
        for (c, &z) in zones.label.iter().enumerate() {
            let k = zidx(z);
            for ch in 0..3 {
                let d = p[ch * n + c] - t[ch * n + c];
                sq_all[k] += d * d;
                if ch == 0 {
                    sq_depth[k] += d * d;
                }
            }
        }
    }
    let ns = predictions.len() as f64;
    let rows: Vec<ZoneRow> = Zone::ALL
        .iter()
        .map(|&z| {
            let k = zidx(z);
            let denom_all = ns * 3.0 * pixels[k] as f64;
            let denom_depth = ns * pixels[k] as f64;
            ZoneRow {
                zone: z,
                pixels: pixels[k],
                mse_all: if pixels[k] > 0 { sq_all[k] / denom_all } else { 0.0 },
                mse_depth: if pixels[k] > 0 {
                    sq_depth[k] / denom_depth
                } else {
                    0.0
                },
            }
        })
        .collect();
    let total_sq_all: f64 = sq_all.iter().sum();
    let total_sq_depth: f64 = sq_depth.iter().sum();
    Ok(OneStepTable {
        rows,
        global_all: total_sq_all / (ns * 3.0 * n as f64),
        global_depth: total_sq_depth / (ns * n as f64),
        n_samples: predictions.len(),
    })
}

// ---------------------------------------------------------------------------
// Rollout curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub time: f64,
    /// MSE over all 3 channels against the reference.
    pub mse_all: f64,
    pub mse_depth: f64,
    /// PSNR of the depth channel (infinite for a perfect match).
    pub psnr_depth: f64,
}

#[derive(Debug, Clone)]
pub struct RolloutCurve {
    pub model: String,
    pub points: Vec<CurvePoint>,
}

/// Per-step divergence of a model rollout from the reference solver run.
/// Both must contain the same number of states at matching times. `peak`
/// defaults to the maximum absolute reference depth.
pub fn rollout_curves(
    model: &str,
    rollout: &[FlowState],
    reference: &[FlowState],
    peak: Option<f64>,
) -> Result<RolloutCurve, EvalError> {
    if rollout.is_empty() || rollout.len() != reference.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "rollout has {} states, reference {}",
            rollout.len(),
            reference.len()
        )));
    }
    let grid = reference[0].grid;
    if rollout.iter().chain(reference).any(|s| s.grid != grid) {
        return Err(EvalError::ShapeMismatch("states on different grids".into()));
    }
    for (a, b) in rollout.iter().zip(reference) {
        if (a.time - b.time).abs() > 1e-6 * b.time.abs().max(1.0) {
            return Err(EvalError::ShapeMismatch(format!(
                "time mismatch: rollout {} vs reference {}",
                a.time, b.time
            )));
        }
    }
    let peak = peak.unwrap_or_else(|| peak_value(reference.iter().map(|s| s.h.as_slice())));
    let mut points = Vec::with_capacity(rollout.len());
    for (step, (a, b)) in rollout.iter().zip(reference).enumerate() {
        let pa = crate::assim::flatten_state(a);
        let pb = crate::assim::flatten_state(b);
        points.push(CurvePoint {
            step,
            time: b.time,
            mse_all: mse(&pa, &pb)?,
            mse_depth: mse(&a.h, &b.h)?,
            psnr_depth: psnr(&a.h, &b.h, peak)?,
        });
    }
    Ok(RolloutCurve {
        model: model.to_string(),
        points,
    })
}

/// CSV emission of one or more rollout curves. Infinite PSNR is written as
/// the literal `inf`.
pub fn curves_to_csv(curves: &[RolloutCurve]) -> String {
    let mut s = String::from("model,step,time,mse_all_channels,mse_depth,psnr_depth\n");
    for c in curves {
        for p in &c.points {
            let psnr = if p.psnr_depth.is_infinite() {
                "inf".to_string()
            } else {
                format!("{:.6}", p.psnr_depth)
            };
            s.push_str(&format!(
                "{},{},{},{:.12e},{:.12e},{}\n",
                c.model, p.step, p.time, p.mse_all, p.mse_depth, psnr
            ));
        }
    }
    s
}

// ---------------------------------------------------------------------------
// Speed benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SpeedBenchmark {
    /// Median wall-clock seconds per solver run.
    pub solver_seconds: f64,
    /// Median wall-clock seconds per surrogate run.
    pub surrogate_seconds: f64,
    /// solver_seconds / surrogate_seconds.
    pub ratio: f64,
    pub solver_samples: Vec<f64>,
    pub surrogate_samples: Vec<f64>,
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Median wall-clock comparison of two runnables over at least 5 repetitions
/// each (single-threaded; the closures must not spawn workers).
pub fn speed_benchmark<E, F, G>(
    mut solver: F,
    mut surrogate: G,
    repetitions: usize,
) -> Result<SpeedBenchmark, E>
where
    F: FnMut() -> Result<(), E>,
    G: FnMut() -> Result<(), E>,
{
    let reps = repetitions.max(5);
    let time = |f: &mut dyn FnMut() -> Result<(), E>| -> Result<Vec<f64>, E> {
        let mut out = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            f()?;
            out.push(t0.elapsed().as_secs_f64());
        }
        Ok(out)
    };
    let solver_samples = time(&mut solver)?;
    let surrogate_samples = time(&mut surrogate)?;
    let solver_seconds = median(&mut solver_samples.clone());
    let surrogate_seconds = median(&mut surrogate_samples.clone());
    Ok(SpeedBenchmark {
        solver_seconds,
        surrogate_seconds,
        ratio: solver_seconds / surrogate_seconds.max(1e-12),
        solver_samples,
        surrogate_samples,
    })
}

// ---------------------------------------------------------------------------
// PGM heatmaps
// ---------------------------------------------------------------------------

/// Write a grayscale P5 (binary PGM) heatmap of per-cell values linearly
/// mapped from [lo, hi] to [0, 255].
pub fn write_pgm(
    path: &Path,
    grid: GridSpec,
    values: &[f64],
    lo: f64,
    hi: f64,
) -> Result<(), EvalError> {
    if values.len() != grid.ncells() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} values for a {}-cell grid",
            values.len(),
            grid.ncells()
        )));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(grid.ncells() + 32);
    out.extend_from_slice(format!("P5\n{} {}\n255\n", grid.nx, grid.ny).as_bytes());
    for &v in values {
        let g = ((v - lo) / span * 255.0).clamp(0.0, 255.0).round() as u8;
        out.push(g);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}
