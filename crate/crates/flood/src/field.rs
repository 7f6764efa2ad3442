//! Raster grid geometry, flow state / terrain / forcing containers, and the
//! portable binary field-file format shared by every other module.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("size mismatch: field `{name}` has {got} values, grid wants {want}")]
    SizeMismatch {
        name: String,
        got: usize,
        want: usize,
    },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

/// Regular raster grid. Cells are indexed row-major, `idx = y * nx + x`.
/// The outermost ring of cells is the boundary ring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64) -> Result<Self, FieldError> {
        if nx < 3 || ny < 3 {
            return Err(FieldError::InvalidGrid(format!(
                "grid must be at least 3x3, got {nx}x{ny}"
            )));
        }
        if !(dx > 0.0) || !(dy > 0.0) {
            return Err(FieldError::InvalidGrid(format!(
                "cell sizes must be positive, got dx={dx} dy={dy}"
            )));
        }
        Ok(Self { nx, ny, dx, dy })
    }

    #[inline]
    pub fn ncells(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.nx + x
    }

    #[inline]
    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    #[inline]
    pub fn is_boundary(&self, x: usize, y: usize) -> bool {
        x == 0 || y == 0 || x == self.nx - 1 || y == self.ny - 1
    }
}

/// Bed elevation and Manning roughness per cell.
#[derive(Debug, Clone)]
pub struct Terrain {
    pub grid: GridSpec,
    pub elevation: Vec<f64>,
    pub manning: Vec<f64>,
}

impl Terrain {
    pub fn new(grid: GridSpec, elevation: Vec<f64>, manning: Vec<f64>) -> Result<Self, FieldError> {
        let n = grid.ncells();
        if elevation.len() != n {
            return Err(FieldError::SizeMismatch {
                name: "elevation".into(),
                got: elevation.len(),
                want: n,
            });
        }
        if manning.len() != n {
            return Err(FieldError::SizeMismatch {
                name: "manning".into(),
                got: manning.len(),
                want: n,
            });
        }
        if manning.iter().any(|&m| !(m >= 0.0)) {
            return Err(FieldError::InvalidState(
                "manning coefficients must be nonnegative".into(),
            ));
        }
        Ok(Self {
            grid,
            elevation,
            manning,
        })
    }
}

/// Conserved shallow-water variables on a grid: depth `h` and the two
/// momentum components `qx = u*h`, `qy = v*h`.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub grid: GridSpec,
    pub h: Vec<f64>,
    pub qx: Vec<f64>,
    pub qy: Vec<f64>,
    pub time: f64,
}

impl FlowState {
    pub fn new(
        grid: GridSpec,
        h: Vec<f64>,
        qx: Vec<f64>,
        qy: Vec<f64>,
        time: f64,
    ) -> Result<Self, FieldError> {
        let n = grid.ncells();
        for (name, v) in [("h", &h), ("qx", &qx), ("qy", &qy)] {
            if v.len() != n {
                return Err(FieldError::SizeMismatch {
                    name: name.into(),
                    got: v.len(),
                    want: n,
                });
            }
        }
        if !(time >= 0.0) {
            return Err(FieldError::InvalidState("time must be nonnegative".into()));
        }
        let mut s = Self {
            grid,
            h,
            qx,
            qy,
            time,
        };
        s.validate()?;
        Ok(s)
    }

    /// All-dry state at time zero.
    pub fn dry(grid: GridSpec) -> Self {
        let n = grid.ncells();
        Self {
            grid,
            h: vec![0.0; n],
            qx: vec![0.0; n],
            qy: vec![0.0; n],
            time: 0.0,
        }
    }

    /// Single validation pass over the state invariants.
    pub fn validate(&mut self) -> Result<(), FieldError> {
        for i in 0..self.h.len() {
            if !(self.h[i] >= 0.0) {
                return Err(FieldError::InvalidState(format!(
                    "negative or NaN depth {} at cell {i}",
                    self.h[i]
                )));
            }
            if self.h[i] == 0.0 && (self.qx[i] != 0.0 || self.qy[i] != 0.0) {
                return Err(FieldError::InvalidState(format!(
                    "momentum in dry cell {i}"
                )));
            }
        }
        Ok(())
    }

    /// Clamp depth to nonnegative and zero momentum in dry cells. Used to
    /// re-impose invariants on externally produced states (surrogate output,
    /// assimilation updates).
    pub fn enforce_invariants(&mut self) {
        for i in 0..self.h.len() {
            if !(self.h[i] > 0.0) {
                self.h[i] = 0.0;
                self.qx[i] = 0.0;
                self.qy[i] = 0.0;
            }
        }
    }

    /// Total water volume (m^3).
    pub fn volume(&self) -> f64 {
        self.h.iter().sum::<f64>() * self.grid.cell_area()
    }
}

/// Desingularized velocity recovery `u = 2 h qx / (h^2 + max(h, h_eps)^2)`.
/// Bounded by `|qx| / h_eps` and exactly zero in dry cells.
#[inline]
pub fn desingularized_velocity(h: f64, q: f64, h_eps: f64) -> f64 {
    if h <= 0.0 {
        return 0.0;
    }
    let hm = h.max(h_eps);
    2.0 * h * q / (h * h + hm * hm)
}

/// Per-cell velocity fields recovered from a flow state.
pub fn velocity(state: &FlowState, h_eps: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(h_eps > 0.0, "h_eps must be positive");
    let u = state
        .h
        .iter()
        .zip(&state.qx)
        .map(|(&h, &q)| desingularized_velocity(h, q, h_eps))
        .collect();
    let v = state
        .h
        .iter()
        .zip(&state.qy)
        .map(|(&h, &q)| desingularized_velocity(h, q, h_eps))
        .collect();
    (u, v)
}

/// A point discharge source.
#[derive(Debug, Clone, PartialEq)]
pub struct Inflow {
    pub cell: usize,
    /// Discharge series (m^3/s), piecewise constant with the plan's `dt`.
    pub series: Vec<f64>,
}

/// Time-dependent forcing: per-sub-area rain, point inflows and the Dirichlet
/// boundary water level.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingPlan {
    pub grid: GridSpec,
    pub n_subareas: usize,
    /// Sub-area id per cell, values in `[0, n_subareas)`.
    pub subarea_map: Vec<u16>,
    /// Rain rate series (m/s); `rain[t][k]` is the rate in sub-area `k` over
    /// the window `[t*dt, (t+1)*dt)`. Piecewise constant, last value held.
    pub rain: Vec<Vec<f64>>,
    pub inflows: Vec<Inflow>,
    pub boundary_level: f64,
    pub duration: f64,
    /// Sampling interval of the rain/inflow series (s).
    pub dt: f64,
}

impl ForcingPlan {
    pub fn validate(&self) -> Result<(), FieldError> {
        if self.subarea_map.len() != self.grid.ncells() {
            return Err(FieldError::SizeMismatch {
                name: "subarea_map".into(),
                got: self.subarea_map.len(),
                want: self.grid.ncells(),
            });
        }
        if self
            .subarea_map
            .iter()
            .any(|&k| (k as usize) >= self.n_subareas)
        {
            return Err(FieldError::InvalidState("sub-area id out of range".into()));
        }
        for row in &self.rain {
            if row.len() != self.n_subareas {
                return Err(FieldError::InvalidState(
                    "rain row length != n_subareas".into(),
                ));
            }
            if row.iter().any(|&r| !(r >= 0.0)) {
                return Err(FieldError::InvalidState("negative rain rate".into()));
            }
        }
        for inf in &self.inflows {
            if inf.cell >= self.grid.ncells() {
                return Err(FieldError::InvalidState("inflow cell out of range".into()));
            }
            if inf.series.iter().any(|&q| !(q >= 0.0)) {
                return Err(FieldError::InvalidState("negative inflow".into()));
            }
        }
        if !(self.duration > 0.0) || !(self.dt > 0.0) {
            return Err(FieldError::InvalidState(
                "duration and dt must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Quiescent plan with a single sub-area and no rain or inflows.
    pub fn none(grid: GridSpec, boundary_level: f64, duration: f64) -> Self {
        Self {
            grid,
            n_subareas: 1,
            subarea_map: vec![0; grid.ncells()],
            rain: vec![vec![0.0]],
            inflows: Vec::new(),
            boundary_level,
            duration,
            dt: duration,
        }
    }

    #[inline]
    fn series_index(&self, t: f64, len: usize) -> usize {
        if len == 0 {
            return 0;
        }
        ((t / self.dt).floor() as usize).min(len - 1)
    }

    /// Rain rate (m/s) in sub-area `k` at time `t`.
    #[inline]
    pub fn rain_at(&self, t: f64, k: usize) -> f64 {
        if self.rain.is_empty() {
            return 0.0;
        }
        self.rain[self.series_index(t, self.rain.len())][k]
    }

    /// Discharge (m^3/s) of inflow `i` at time `t`.
    #[inline]
    pub fn inflow_at(&self, t: f64, i: usize) -> f64 {
        let s = &self.inflows[i].series;
        if s.is_empty() {
            return 0.0;
        }
        s[self.series_index(t, s.len())]
    }

    /// Exact integral of the rain rate of sub-area `k` over `[t0, t1]` (m).
    pub fn rain_integral(&self, t0: f64, t1: f64, k: usize) -> f64 {
        integrate_piecewise(&self.rain, self.dt, t0, t1, |row| row[k])
    }

    /// Exact integral of inflow `i` over `[t0, t1]` (m^3).
    pub fn inflow_integral(&self, t0: f64, t1: f64, i: usize) -> f64 {
        integrate_piecewise(&self.inflows[i].series, self.dt, t0, t1, |&q| q)
    }
}

fn integrate_piecewise<T>(series: &[T], dt: f64, t0: f64, t1: f64, value: impl Fn(&T) -> f64) -> f64 {
    if series.is_empty() || t1 <= t0 {
        return 0.0;
    }
    let mut acc = 0.0;
    let mut t = t0;
    while t < t1 {
        let i = ((t / dt).floor() as usize).min(series.len() - 1);
        let seg_end = if i + 1 == series.len() {
            t1
        } else {
            (((i + 1) as f64) * dt).min(t1)
        };
        acc += value(&series[i]) * (seg_end - t);
        t = seg_end;
    }
    acc
}

// ---------------------------------------------------------------------------
// Field file format
//
// ASCII header followed by a little-endian f32 payload:
//
//   FLDF1
//   grid <nx> <ny> <dx> <dy>
//   fields <count>
//   field <name> <len> [<d0> <d1> ...]
//   ...
//   data
//   <len0 + len1 + ... f32 values, little endian>
//
// `dx`/`dy` use Rust's shortest round-trip float formatting, so the header
// itself is bit-exact. Optional trailing dims on a `field` line carry tensor
// shape metadata (used for network parameters).
// ---------------------------------------------------------------------------

pub const FIELD_MAGIC: &str = "FLDF1";

/// One named payload in a field file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedField {
    pub name: String,
    pub values: Vec<f32>,
    /// Optional tensor shape; product must equal `values.len()`.
    pub shape: Option<Vec<usize>>,
}

impl NamedField {
    pub fn grid_field(name: &str, values: Vec<f32>) -> Self {
        Self {
            name: name.to_string(),
            values,
            shape: None,
        }
    }
}

pub fn write_field_file(
    path: &Path,
    grid: GridSpec,
    fields: &[NamedField],
) -> Result<(), FieldError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_fields(&mut w, grid, fields)
}

pub fn write_fields<W: Write>(
    w: &mut W,
    grid: GridSpec,
    fields: &[NamedField],
) -> Result<(), FieldError> {
    for f in fields {
        if f.name.is_empty() || f.name.contains(char::is_whitespace) {
            return Err(FieldError::InvalidState(format!(
                "field name `{}` must be non-empty and whitespace-free",
                f.name
            )));
        }
        if let Some(shape) = &f.shape {
            let prod: usize = shape.iter().product();
            if prod != f.values.len() {
                return Err(FieldError::SizeMismatch {
                    name: f.name.clone(),
                    got: f.values.len(),
                    want: prod,
                });
            }
        } else if f.values.len() != grid.ncells() {
            return Err(FieldError::SizeMismatch {
                name: f.name.clone(),
                got: f.values.len(),
                want: grid.ncells(),
            });
        }
    }
    writeln!(w, "{FIELD_MAGIC}")?;
    writeln!(w, "grid {} {} {} {}", grid.nx, grid.ny, grid.dx, grid.dy)?;
    writeln!(w, "fields {}", fields.len())?;
    for f in fields {
        write!(w, "field {} {}", f.name, f.values.len())?;
        if let Some(shape) = &f.shape {
            for d in shape {
                write!(w, " {d}")?;
            }
        }
        writeln!(w)?;
    }
    writeln!(w, "data")?;
    for f in fields {
        for v in &f.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_field_file(path: &Path) -> Result<(GridSpec, Vec<NamedField>), FieldError> {
    let mut r = BufReader::new(File::open(path)?);
    read_fields(&mut r)
}

/// Parse a field file from arbitrary bytes. This is the untrusted-input entry
/// point; all header errors are reported as `MalformedHeader`.
pub fn read_fields_from_bytes(bytes: &[u8]) -> Result<(GridSpec, Vec<NamedField>), FieldError> {
    let mut r = BufReader::new(bytes);
    read_fields(&mut r)
}

const MAX_HEADER_FIELDS: usize = 1 << 20;
const MAX_FIELD_LEN: usize = 1 << 28;

pub fn read_fields<R: BufRead>(r: &mut R) -> Result<(GridSpec, Vec<NamedField>), FieldError> {
    let bad = |m: &str| FieldError::MalformedHeader(m.to_string());

    let mut line = String::new();
    let read_line = |r: &mut R, line: &mut String| -> Result<(), FieldError> {
        line.clear();
        let n = r.read_line(line)?;
        if n == 0 {
            return Err(FieldError::MalformedHeader("unexpected end of header".into()));
        }
        while line.ends_with('\n') || line.ends_with('\r') {
            line.pop();
        }
        Ok(())
    };

    read_line(r, &mut line)?;
    if line != FIELD_MAGIC {
        return Err(bad("bad magic"));
    }

    read_line(r, &mut line)?;
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 5 || toks[0] != "grid" {
        return Err(bad("expected `grid nx ny dx dy`"));
    }
    let nx: usize = toks[1].parse().map_err(|_| bad("bad nx"))?;
    let ny: usize = toks[2].parse().map_err(|_| bad("bad ny"))?;
    let dx: f64 = toks[3].parse().map_err(|_| bad("bad dx"))?;
    let dy: f64 = toks[4].parse().map_err(|_| bad("bad dy"))?;
    let grid = GridSpec::new(nx, ny, dx, dy)
        .map_err(|e| FieldError::MalformedHeader(format!("bad grid line: {e}")))?;
    if grid.ncells() > MAX_FIELD_LEN {
        return Err(bad("grid too large"));
    }

    read_line(r, &mut line)?;
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 2 || toks[0] != "fields" {
        return Err(bad("expected `fields n`"));
    }
    let nfields: usize = toks[1].parse().map_err(|_| bad("bad field count"))?;
    if nfields > MAX_HEADER_FIELDS {
        return Err(bad("too many fields"));
    }

    let mut specs: Vec<(String, usize, Option<Vec<usize>>)> = Vec::with_capacity(nfields);
    let mut total: usize = 0;
    for _ in 0..nfields {
        read_line(r, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 || toks[0] != "field" {
            return Err(bad("expected `field name len [shape...]`"));
        }
        let name = toks[1].to_string();
        let len: usize = toks[2].parse().map_err(|_| bad("bad field length"))?;
        if len > MAX_FIELD_LEN {
            return Err(bad("field too large"));
        }
        let shape = if toks.len() > 3 {
            let dims: Result<Vec<usize>, _> = toks[3..].iter().map(|t| t.parse()).collect();
            let dims = dims.map_err(|_| bad("bad shape dim"))?;
            let prod: usize = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("shape overflow"))?;
            if prod != len {
                return Err(FieldError::SizeMismatch {
                    name: name.clone(),
                    got: len,
                    want: prod,
                });
            }
            Some(dims)
        } else {
            if len != grid.ncells() {
                return Err(FieldError::SizeMismatch {
                    name: name.clone(),
                    got: len,
                    want: grid.ncells(),
                });
            }
            None
        };
        total = total
            .checked_add(len)
            .ok_or_else(|| bad("payload overflow"))?;
        specs.push((name, len, shape));
    }

    read_line(r, &mut line)?;
    if line != "data" {
        return Err(bad("expected `data`"));
    }

    let mut payload = vec![0u8; total.checked_mul(4).ok_or_else(|| bad("payload overflow"))?];
    r.read_exact(&mut payload)
        .map_err(|_| bad("payload truncated"))?;

    let mut fields = Vec::with_capacity(nfields);
    let mut off = 0usize;
    for (name, len, shape) in specs {
        let mut values = Vec::with_capacity(len);
        for i in 0..len {
            let b = &payload[(off + i) * 4..(off + i) * 4 + 4];
            values.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        off += len;
        fields.push(NamedField {
            name,
            values,
            shape,
        });
    }
    Ok((grid, fields))
}

/// Write a flow state snapshot as a field file with fields `h`, `qx`, `qy`.
pub fn write_state_file(path: &Path, state: &FlowState) -> Result<(), FieldError> {
    let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect();
    write_field_file(
        path,
        state.grid,
        &[
            NamedField::grid_field("h", to32(&state.h)),
            NamedField::grid_field("qx", to32(&state.qx)),
            NamedField::grid_field("qy", to32(&state.qy)),
        ],
    )
}

pub fn read_state_file(path: &Path) -> Result<FlowState, FieldError> {
    let (grid, fields) = read_field_file(path)?;
    let get = |name: &str| -> Result<Vec<f64>, FieldError> {
        fields
            .iter()
            .find(|f| f.name == name)
            .map(|f| f.values.iter().map(|&v| v as f64).collect())
            .ok_or_else(|| FieldError::MalformedHeader(format!("missing field `{name}`")))
    };
    FlowState::new(grid, get("h")?, get("qx")?, get("qy")?, 0.0)
}

/// Write terrain as a field file with fields `elevation`, `manning`.
pub fn write_terrain_file(path: &Path, terrain: &Terrain) -> Result<(), FieldError> {
    let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect();
    write_field_file(
        path,
        terrain.grid,
        &[
            NamedField::grid_field("elevation", to32(&terrain.elevation)),
            NamedField::grid_field("manning", to32(&terrain.manning)),
        ],
    )
}

pub fn read_terrain_file(path: &Path) -> Result<Terrain, FieldError> {
    let (grid, fields) = read_field_file(path)?;
    let get = |name: &str| -> Result<Vec<f64>, FieldError> {
        fields
            .iter()
            .find(|f| f.name == name)
            .map(|f| f.values.iter().map(|&v| v as f64).collect())
            .ok_or_else(|| FieldError::MalformedHeader(format!("missing field `{name}`")))
    };
    Terrain::new(grid, get("elevation")?, get("manning")?)
}
