//! Autoregressive surrogate rollout: repeatedly apply a trained network to
//! its own output, advancing the flow state one lead-time per step.

use super::tensor::{NnError, Tensor};
use super::train::std_guard;
use super::Network;
use crate::field::{FlowState, ForcingPlan, GridSpec};
use crate::scenario::{ChannelStat, IN_CHANNELS, OUT_CHANNELS};

/// A trained generator bundled with the standardization statistics and lead
/// time it was trained for.
pub struct Surrogate {
    pub net: Network,
    pub grid: GridSpec,
    pub lead_time: f64,
    /// 8 per-channel means in dataset channel order.
    pub means: Vec<f64>,
    /// 8 per-channel guarded standard deviations.
    pub stds: Vec<f64>,
}

impl Surrogate {
    pub fn new(
        net: Network,
        grid: GridSpec,
        lead_time: f64,
        stats: &[ChannelStat],
    ) -> Result<Self, NnError> {
        if stats.len() != IN_CHANNELS + OUT_CHANNELS {
            return Err(NnError::BadConfig(format!(
                "expected {} channel stats, got {}",
                IN_CHANNELS + OUT_CHANNELS,
                stats.len()
            )));
        }
        if !(lead_time > 0.0) {
            return Err(NnError::BadConfig("lead_time must be positive".into()));
        }
        net.check_geometry(grid.ny, grid.nx)
            .map_err(|e| NnError::BadConfig(format!("network does not fit grid: {e}")))?;
        Ok(Self {
            net,
            grid,
            lead_time,
            means: stats.iter().map(|s| s.mean).collect(),
            stds: stats.iter().map(|s| std_guard(s.std)).collect(),
        })
    }
}

/// Build the raw (unstandardized) 5-channel input plane for a state, using
/// the same construction (and f32 precision) as dataset extraction: state
/// h/qx/qy plus mean inflow and rain over `[time, time + lead_time)`.
pub fn build_input_channels(
    state: &FlowState,
    forcing: &ForcingPlan,
    lead_time: f64,
) -> Vec<f32> {
    let grid = state.grid;
    let n = grid.ncells();
    let area = grid.cell_area();
    let t = state.time;
    let mut input = vec![0.0f32; IN_CHANNELS * n];
    for c in 0..n {
        input[c] = state.h[c] as f32;
        input[n + c] = state.qx[c] as f32;
        input[2 * n + c] = state.qy[c] as f32;
    }
    for (i, inf) in forcing.inflows.iter().enumerate() {
        let mean_q = forcing.inflow_integral(t, t + lead_time, i) / lead_time;
        input[3 * n + inf.cell] += (mean_q / area) as f32;
    }
    let mut mean_rain = vec![0.0f64; forcing.n_subareas];
    for (k, m) in mean_rain.iter_mut().enumerate() {
        *m = forcing.rain_integral(t, t + lead_time, k) / lead_time;
    }
    for c in 0..n {
        input[4 * n + c] = mean_rain[forcing.subarea_map[c] as usize] as f32;
    }
    input
}

/// Predict the state one lead-time ahead of `state`. The prediction is
/// de-standardized, depth is clamped nonnegative, and momentum on dry cells
/// is zeroed.
pub fn predict(
    surrogate: &mut Surrogate,
    state: &FlowState,
    forcing: &ForcingPlan,
) -> Result<FlowState, NnError> {
    let grid = surrogate.grid;
    if state.grid != grid || forcing.grid != grid {
        return Err(NnError::ShapeMismatch(
            "state/forcing grid differs from surrogate grid".into(),
        ));
    }
    let n = grid.ncells();
    let raw = build_input_channels(state, forcing, surrogate.lead_time);
    let mut x = Tensor::zeros(&[1, IN_CHANNELS, grid.ny, grid.nx]);
    for ch in 0..IN_CHANNELS {
        let (mean, std) = (surrogate.means[ch], surrogate.stds[ch]);
        for c in 0..n {
            x.data[ch * n + c] = (raw[ch * n + c] as f64 - mean) / std;
        }
    }
    let pred = surrogate.net.forward(&x, false)?;
    let mut next = FlowState::dry(grid);
    next.time = state.time + surrogate.lead_time;
    for c in 0..n {
        let de = |ch: usize, v: f64| v * surrogate.stds[IN_CHANNELS + ch] + surrogate.means[IN_CHANNELS + ch];
        let h = de(0, pred.data[c]).max(0.0);
        next.h[c] = h;
        if h > 0.0 {
            next.qx[c] = de(1, pred.data[n + c]);
            next.qy[c] = de(2, pred.data[2 * n + c]);
        }
    }
    Ok(next)
}

/// Roll the surrogate forward `n_steps` lead-times from `state0`, feeding
/// each prediction back as the next input. Returns `n_steps + 1` states
/// starting with `state0` itself.
pub fn rollout(
    surrogate: &mut Surrogate,
    state0: &FlowState,
    forcing: &ForcingPlan,
    n_steps: usize,
) -> Result<Vec<FlowState>, NnError> {
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(state0.clone());
    for _ in 0..n_steps {
        let next = predict(surrogate, out.last().expect("nonempty"), forcing)?;
        out.push(next);
    }
    Ok(out)
}
