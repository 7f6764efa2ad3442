//! Kalman-style measurement update for correcting surrogate predictions,
//! empirical prediction-error covariance estimation with Gaspari–Cohn
//! localization, and spot-observation correction of flow states.
//!
//! State vectors are the channel-major flattening [h | qx | qy] of a
//! [`FlowState`]. The innovation system (H P Hᵀ + R) y = z − H x is solved by
//! Cholesky factorization; the explicit inverse is never formed.

use thiserror::Error;

use crate::field::{FlowState, GridSpec};

#[derive(Debug, Error)]
pub enum AssimError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("singular innovation matrix (condition estimate {cond:.3e} exceeds 1e12)")]
    SingularInnovation { cond: f64 },
    #[error("covariance estimation needs at least 2 samples, got {0}")]
    NotEnoughSamples(usize),
    #[error("bad assimilation config: {0}")]
    BadConfig(String),
}

/// Sparse observation matrix H (m x n), stored by rows. Most observation
/// operators select or combine a handful of state entries per row.
#[derive(Debug, Clone)]
pub struct ObservationMatrix {
    pub m: usize,
    pub n: usize,
    /// rows[i] = [(column, coefficient), ...] sorted by column.
    pub rows: Vec<Vec<(u32, f64)>>,
}

impl ObservationMatrix {
    pub fn identity(n: usize) -> Self {
        Self {
            m: n,
            n,
            rows: (0..n).map(|i| vec![(i as u32, 1.0)]).collect(),
        }
    }

    /// Selector of the listed state-vector entries, one per row.
    pub fn selector(n: usize, indices: &[usize]) -> Result<Self, AssimError> {
        let mut rows = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= n {
                return Err(AssimError::Dimension(format!(
                    "observation index {i} out of range for state length {n}"
                )));
            }
            rows.push(vec![(i as u32, 1.0)]);
        }
        Ok(Self {
            m: indices.len(),
            n,
            rows,
        })
    }

    /// y = H x.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, v)| v * x[j as usize]).sum())
            .collect()
    }
}

/// Prediction-error covariance P: dense for toy problems, or the sparse
/// localized form (only entries within the localization radius) for large
/// grids where n x n storage is intractable.
#[derive(Debug, Clone)]
pub enum Covariance {
    /// Row-major n x n symmetric matrix.
    Dense { n: usize, data: Vec<f64> },
    /// Symmetric sparse rows: rows[i] = [(column, value), ...].
    Localized { n: usize, rows: Vec<Vec<(u32, f64)>> },
}

impl Covariance {
    pub fn n(&self) -> usize {
        match self {
            Covariance::Dense { n, .. } | Covariance::Localized { n, .. } => *n,
        }
    }

    pub fn diagonal_scaled_identity(n: usize, var: f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = var;
        }
        Covariance::Dense { n, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            Covariance::Dense { n, data } => data[i * n + j],
            Covariance::Localized { rows, .. } => rows[i]
                .iter()
                .find(|&&(c, _)| c as usize == j)
                .map_or(0.0, |&(_, v)| v),
        }
    }

    /// Row i as a dense accumulation into `out` (out += scale * P[i, :]).
    fn add_scaled_row(&self, i: usize, scale: f64, out: &mut [f64]) {
        match self {
            Covariance::Dense { n, data } => {
                for (o, v) in out.iter_mut().zip(&data[i * n..(i + 1) * n]) {
                    *o += scale * v;
                }
            }
            Covariance::Localized { rows, .. } => {
                for &(j, v) in &rows[i] {
                    out[j as usize] += scale * v;
                }
            }
        }
    }
}

/// The (H, P, R) triple of the measurement update. R is a dense m x m
/// symmetric positive-definite observation-error covariance.
#[derive(Debug, Clone)]
pub struct GaussianUpdateSpec {
    pub h: ObservationMatrix,
    pub p: Covariance,
    /// Row-major m x m.
    pub r: Vec<f64>,
}

/// Diagonal R from per-observation variances.
pub fn r_diagonal(variances: &[f64]) -> Vec<f64> {
    let m = variances.len();
    let mut r = vec![0.0; m * m];
    for (i, &v) in variances.iter().enumerate() {
        r[i * m + i] = v;
    }
    r
}

impl GaussianUpdateSpec {
    pub fn validate(&self) -> Result<(), AssimError> {
        let (m, n) = (self.h.m, self.h.n);
        if self.p.n() != n {
            return Err(AssimError::Dimension(format!(
                "P is {}x{} but H has {n} columns",
                self.p.n(),
                self.p.n()
            )));
        }
        if self.r.len() != m * m {
            return Err(AssimError::Dimension(format!(
                "R has {} entries, expected {m}x{m}",
                self.r.len()
            )));
        }
        for i in 0..m {
            for j in 0..i {
                if (self.r[i * m + j] - self.r[j * m + i]).abs() > 1e-9 {
                    return Err(AssimError::BadConfig("R is not symmetric".into()));
                }
            }
        }
        Ok(())
    }
}

/// In-place Cholesky factorization S = L Lᵀ (lower triangle of `s`), then
/// solve for each right-hand side. Reports a distinct error when the
/// estimated condition number exceeds 1e12.
fn cholesky_solve(s: &mut [f64], m: usize, rhs: &mut [f64], nrhs: usize) -> Result<(), AssimError> {
    let mut min_d = f64::INFINITY;
    let mut max_d: f64 = 0.0;
    for j in 0..m {
        let mut d = s[j * m + j];
        for k in 0..j {
            d -= s[j * m + k] * s[j * m + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(AssimError::SingularInnovation { cond: f64::INFINITY });
        }
        let l = d.sqrt();
        s[j * m + j] = l;
        min_d = min_d.min(l);
        max_d = max_d.max(l);
        for i in j + 1..m {
            let mut v = s[i * m + j];
            for k in 0..j {
                v -= s[i * m + k] * s[j * m + k];
            }
            s[i * m + j] = v / l;
        }
    }
    // kappa(S) ~= (max L_jj / min L_jj)^2 is a cheap lower-bound estimate.
    let cond = (max_d / min_d).powi(2);
    if cond > 1e12 {
        return Err(AssimError::SingularInnovation { cond });
    }
    for r in 0..nrhs {
        let b = &mut rhs[r * m..(r + 1) * m];
        for i in 0..m {
            let mut v = b[i];
            for k in 0..i {
                v -= s[i * m + k] * b[k];
            }
            b[i] = v / s[i * m + i];
        }
        for i in (0..m).rev() {
            let mut v = b[i];
            for k in i + 1..m {
                v -= s[k * m + i] * b[k];
            }
            b[i] = v / s[i * m + i];
        }
    }
    Ok(())
}

/// Kalman measurement update X^ = X + P Hᵀ (H P Hᵀ + R)⁻¹ (z − H X).
pub fn measurement_update(
    x: &[f64],
    z: &[f64],
    spec: &GaussianUpdateSpec,
) -> Result<Vec<f64>, AssimError> {
    spec.validate()?;
    let (m, n) = (spec.h.m, spec.h.n);
    if x.len() != n {
        return Err(AssimError::Dimension(format!(
            "state length {} != {n}",
            x.len()
        )));
    }
    if z.len() != m {
        return Err(AssimError::Dimension(format!(
            "observation length {} != {m}",
            z.len()
        )));
    }
    if m == 0 {
        return Ok(x.to_vec());
    }
    // PHᵀ, one column per observation (stored column-major: pht[j] is col j).
    let mut pht: Vec<Vec<f64>> = vec![vec![0.0; n]; m];
    for (j, row) in spec.h.rows.iter().enumerate() {
        for &(k, v) in row {
            spec.p.add_scaled_row(k as usize, v, &mut pht[j]);
        }
    }
    // S = H (P Hᵀ) + R.
    let mut s = spec.r.clone();
    for i in 0..m {
        for (j, col) in pht.iter().enumerate() {
            let mut acc = 0.0;
            for &(k, v) in &spec.h.rows[i] {
                acc += v * col[k as usize];
            }
            s[i * m + j] += acc;
        }
    }
    // Innovation and solve.
    let hx = spec.h.apply(x);
    let mut y: Vec<f64> = z.iter().zip(&hx).map(|(a, b)| a - b).collect();
    cholesky_solve(&mut s, m, &mut y, 1)?;
    let mut out = x.to_vec();
    for (col, &w) in pht.iter().zip(&y) {
        for (o, v) in out.iter_mut().zip(col) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Gaspari–Cohn fifth-order compactly supported correlation factor of cell
/// distance `d`; identically zero for d >= radius.
pub fn gaspari_cohn(d: f64, radius: f64) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    if radius <= 0.0 || d >= radius {
        return 0.0;
    }
    let c = radius / 2.0;
    let r = d / c;
    if r < 1.0 {
        ((((-0.25 * r + 0.5) * r + 0.625) * r - 5.0 / 3.0) * r * r + 1.0).max(0.0)
    } else {
        (((((r / 12.0 - 0.5) * r + 0.625) * r + 5.0 / 3.0) * r - 5.0) * r + 4.0 - 2.0 / (3.0 * r))
            .max(0.0)
    }
}

/// Dense grids stay dense up to this many cells; larger grids use the sparse
/// localized representation.
const DENSE_CELL_LIMIT: usize = 4096;
/// Eigenvalue clipping (PSD floor) is performed only up to this dimension;
/// beyond it the Schur-product construction already guarantees PSD up to
/// roundoff.
const EIGEN_CLIP_LIMIT: usize = 512;

/// Empirical covariance of prediction-error samples, tapered by a
/// Gaspari–Cohn localization factor of inter-cell distance (in cell units)
/// and floored to positive semidefinite.
///
/// Sample vectors must have length `channels * grid.ncells()` for some
/// integer channel count, flattened channel-major; the taper depends only on
/// the spatial cell of each entry.
pub fn estimate_covariance(
    samples: &[Vec<f64>],
    localization_radius: f64,
    grid: GridSpec,
) -> Result<Covariance, AssimError> {
    if samples.len() < 2 {
        return Err(AssimError::NotEnoughSamples(samples.len()));
    }
    if !(localization_radius >= 0.0) {
        return Err(AssimError::BadConfig(
            "localization radius must be nonnegative".into(),
        ));
    }
    let n = samples[0].len();
    let ncells = grid.ncells();
    if n == 0 || n % ncells != 0 {
        return Err(AssimError::Dimension(format!(
            "sample length {n} is not a multiple of the {ncells}-cell grid"
        )));
    }
    if samples.iter().any(|s| s.len() != n) {
        return Err(AssimError::Dimension("samples differ in length".into()));
    }
    let ns = samples.len() as f64;
    let mut mean = vec![0.0; n];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= ns);

    let cell_of = |i: usize| i % ncells;
    let dist = |a: usize, b: usize| -> f64 {
        let (ax, ay) = ((a % grid.nx) as f64, (a / grid.nx) as f64);
        let (bx, by) = ((b % grid.nx) as f64, (b / grid.nx) as f64);
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    };
    let cov_entry = |i: usize, j: usize| -> f64 {
        let mut acc = 0.0;
        for s in samples {
            acc += (s[i] - mean[i]) * (s[j] - mean[j]);
        }
        acc / (ns - 1.0)
    };

    if ncells < DENSE_CELL_LIMIT && n < DENSE_CELL_LIMIT {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let taper = gaspari_cohn(dist(cell_of(i), cell_of(j)), localization_radius);
                let v = if taper > 0.0 { taper * cov_entry(i, j) } else { 0.0 };
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        if n <= EIGEN_CLIP_LIMIT {
            psd_clip(&mut data, n);
        }
        Ok(Covariance::Dense { n, data })
    } else {
        // Sparse rows: for each cell, only neighbor cells within the radius
        // contribute (for every channel pair).
        let channels = n / ncells;
        let rad = localization_radius.ceil() as isize;
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for ci in 0..ncells {
            let (xi, yi) = ((ci % grid.nx) as isize, (ci / grid.nx) as isize);
            let mut neigh: Vec<(usize, f64)> = Vec::new();
            for dy in -rad..=rad {
                let yj = yi + dy;
                if yj < 0 || yj >= grid.ny as isize {
                    continue;
                }
                for dx in -rad..=rad {
                    let xj = xi + dx;
                    if xj < 0 || xj >= grid.nx as isize {
                        continue;
                    }
                    let d = ((dx * dx + dy * dy) as f64).sqrt();
                    let taper = gaspari_cohn(d, localization_radius);
                    if taper > 0.0 {
                        neigh.push(((yj as usize) * grid.nx + xj as usize, taper));
                    }
                }
            }
            for chi in 0..channels {
                let i = chi * ncells + ci;
                let row = &mut rows[i];
                for chj in 0..channels {
                    for &(cj, taper) in &neigh {
                        let j = chj * ncells + cj;
                        let v = taper * cov_entry(i, j);
                        if v != 0.0 {
                            row.push((j as u32, v));
                        }
                    }
                }
                row.sort_unstable_by_key(|&(j, _)| j);
            }
        }
        Ok(Covariance::Localized { n, rows })
    }
}

/// Clip negative eigenvalues of a symmetric matrix at zero (cyclic Jacobi).
fn psd_clip(a: &mut [f64], n: usize) {
    // Eigen-decompose a copy, rebuild with eigenvalues floored at 0.
    let mut d = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * norm.max(1.0);
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += d[p * n + q].abs();
            }
        }
        if off < tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = d[p * n + q];
                if apq.abs() < tol / (n * n) as f64 {
                    continue;
                }
                let theta = (d[q * n + q] - d[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let dkp = d[k * n + p];
                    let dkq = d[k * n + q];
                    d[k * n + p] = c * dkp - s * dkq;
                    d[k * n + q] = s * dkp + c * dkq;
                }
                for k in 0..n {
                    let dpk = d[p * n + k];
                    let dqk = d[q * n + k];
                    d[p * n + k] = c * dpk - s * dqk;
                    d[q * n + k] = s * dpk + c * dqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    // A = V max(Lambda, 0) Vᵀ.
    for x in a.iter_mut() {
        *x = 0.0;
    }
    for e in 0..n {
        let lam = d[e * n + e].max(0.0);
        if lam == 0.0 {
            continue;
        }
        for i in 0..n {
            let vie = v[i * n + e] * lam;
            if vie == 0.0 {
                continue;
            }
            for j in 0..n {
                a[i * n + j] += vie * v[j * n + e];
            }
        }
    }
}

/// One pointwise observation of a state channel (0 = h, 1 = qx, 2 = qy).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpotObservation {
    pub cell: usize,
    pub channel: usize,
    pub value: f64,
}

/// Flatten a state channel-major as [h | qx | qy].
pub fn flatten_state(state: &FlowState) -> Vec<f64> {
    let mut v = Vec::with_capacity(3 * state.grid.ncells());
    v.extend_from_slice(&state.h);
    v.extend_from_slice(&state.qx);
    v.extend_from_slice(&state.qy);
    v
}

/// Rebuild a state from a flattened vector, re-imposing h >= 0 and zero
/// momentum on dry cells.
pub fn unflatten_state(grid: GridSpec, v: &[f64], time: f64) -> Result<FlowState, AssimError> {
    let n = grid.ncells();
    if v.len() != 3 * n {
        return Err(AssimError::Dimension(format!(
            "flattened state length {} != 3x{n}",
            v.len()
        )));
    }
    let mut s = FlowState::dry(grid);
    s.time = time;
    for c in 0..n {
        let h = v[c].max(0.0);
        s.h[c] = h;
        if h > 0.0 {
            s.qx[c] = v[n + c];
            s.qy[c] = v[2 * n + c];
        }
    }
    Ok(s)
}

/// Correct a predicted state from pointwise spot observations: H selects the
/// observed (cell, channel) entries, the measurement update runs on the
/// flattened state, and flow-state invariants are re-imposed.
pub fn spot_correct(
    prediction: &FlowState,
    spots: &[SpotObservation],
    p: &Covariance,
    observation_variances: &[f64],
) -> Result<FlowState, AssimError> {
    if spots.is_empty() {
        return Ok(prediction.clone());
    }
    if observation_variances.len() != spots.len() {
        return Err(AssimError::Dimension(format!(
            "{} spot observations but {} variances",
            spots.len(),
            observation_variances.len()
        )));
    }
    let ncells = prediction.grid.ncells();
    let n = 3 * ncells;
    let mut indices = Vec::with_capacity(spots.len());
    let mut z = Vec::with_capacity(spots.len());
    for s in spots {
        if s.cell >= ncells || s.channel >= 3 {
            return Err(AssimError::Dimension(format!(
                "spot (cell {}, channel {}) outside the {ncells}-cell grid",
                s.cell, s.channel
            )));
        }
        indices.push(s.channel * ncells + s.cell);
        z.push(s.value);
    }
    let spec = GaussianUpdateSpec {
        h: ObservationMatrix::selector(n, &indices)?,
        p: p.clone(),
        r: r_diagonal(observation_variances),
    };
    let x = flatten_state(prediction);
    let corrected = measurement_update(&x, &z, &spec)?;
    unflatten_state(prediction.grid, &corrected, prediction.time)
}
