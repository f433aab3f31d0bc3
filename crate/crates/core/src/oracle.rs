//! Deterministic physics stand-in for separator CFD runs.
//!
//! The tank is a well-mixed reactor per particle class (settling removes mass
//! at rate `w_s / H`), overlaid with an inlet jet that carries influent
//! straight across the tank and a settling-driven vertical profile. Fields are
//! evaluated on the (case, class, time, point) grid and stored in the SWDS1
//! binary layout.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loading::{
    hydrograph_unchecked, lhs_sample, pollutograph_c, sample_cylinder, settling_classes,
    LoadingError, ParamRanges, StormParams, TankGeometry,
};
use crate::seed::derive_seed;

pub const SWDS_MAGIC: &[u8; 6] = b"SWDS1\0";

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("point ({0}, {1}, {2}) lies outside the tank")]
    OutsideTank(f64, f64, f64),
    #[error("time {0} s lies outside the solved interval")]
    OutsideEvent(f64),
    #[error("invalid oracle configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Loading(#[from] LoadingError),
    #[error("not an SWDS1 file")]
    BadMagic,
    #[error("dataset file truncated or inconsistent: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Settings for dataset generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub geometry: TankGeometry,
    pub ranges: ParamRanges,
    /// Runge–Kutta step (s).
    pub ode_step: f64,
    /// Cap on the stratification exponent.
    pub kappa_max: f64,
    /// Event duration (s).
    pub duration: f64,
    pub cases: usize,
    pub classes: usize,
    pub times: usize,
    pub points: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl OracleConfig {
    /// Laptop-sized dataset.
    pub fn desk() -> Self {
        Self {
            geometry: TankGeometry::default(),
            ranges: ParamRanges::FIELD,
            ode_step: 0.5,
            kappa_max: 8.0,
            duration: 3600.0,
            cases: 48,
            classes: 3,
            times: 60,
            points: 512,
            seed: 20240,
        }
    }

    /// Dimensions of the original CFD campaign (10 s output interval).
    pub fn full_scale() -> Self {
        Self { cases: 640, classes: 9, times: 360, points: 8000, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        self.geometry.validate()?;
        ParamRanges::new(self.ranges.lower, self.ranges.upper)?;
        if !(self.ode_step > 0.0) || !(self.duration > 0.0) || !(self.kappa_max > 0.0) {
            return Err(OracleError::Config("ode_step, duration and kappa_max must be positive".into()));
        }
        if self.cases == 0 || self.times == 0 || self.points == 0 {
            return Err(OracleError::Config("cases, times and points must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(OracleError::Config("at least two settling classes are required".into()));
        }
        let steps = self.output_interval() / self.ode_step;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(OracleError::Config(
                "output interval must be a whole number of ODE steps".into(),
            ));
        }
        Ok(())
    }

    pub fn output_interval(&self) -> f64 {
        self.duration / self.times as f64
    }

    /// Output time stamps (s): one interval after the start through the end of the event.
    pub fn time_grid(&self) -> Vec<f64> {
        let dt = self.output_interval();
        (1..=self.times).map(|j| dt * j as f64).collect()
    }

    pub fn solution_count(&self) -> u64 {
        self.cases as u64 * self.classes as u64 * self.times as u64 * self.points as u64 * 2
    }

    /// Size of the f32 solutions block in bytes.
    pub fn solutions_bytes(&self) -> u64 {
        self.solution_count() * 4
    }

    pub fn oracle(&self) -> Oracle {
        Oracle { geometry: self.geometry, ode_step: self.ode_step, kappa_max: self.kappa_max }
    }
}

/// Well-mixed tank concentration of one class on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TankState {
    pub times: Vec<f64>,
    pub conc: Vec<f64>,
}

impl TankState {
    /// Linear interpolation between grid points.
    pub fn at(&self, t: f64) -> Result<f64, OracleError> {
        let last = *self.times.last().ok_or(OracleError::OutsideEvent(t))?;
        if t < self.times[0] - 1e-9 || t > last + 1e-9 {
            return Err(OracleError::OutsideEvent(t));
        }
        let i = self.times.partition_point(|&g| g < t);
        if i < self.times.len() && (self.times[i] - t).abs() <= 1e-9 {
            return Ok(self.conc[i]);
        }
        if i == 0 {
            return Ok(self.conc[0]);
        }
        let i = i.min(self.times.len() - 1);
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let w = (t - t0) / (t1 - t0);
        Ok(self.conc[i - 1] * (1.0 - w) + self.conc[i] * w)
    }
}

/// Inflow in per-second units at `t` seconds: (Q in m³/s, C_in in kg/m³).
pub fn inflow(p: &StormParams, t: f64) -> (f64, f64) {
    let minutes = t / 60.0;
    (hydrograph_unchecked(p, minutes) / 60.0, pollutograph_c(p, minutes))
}

/// Number of leading steps laid out on a graded mesh.
const GRADED_STEPS: f64 = 64.0;
/// Grading exponent: nodes at `L·(i/n)^5`. Restores fourth-order accuracy for
/// inflows that start like `t^(k−1)` with `k` close to 1.
const GRADING: i32 = 5;

/// Step boundaries from `start` to `end`: graded over the first
/// `GRADED_STEPS · step` seconds after the event start, uniform afterwards, and
/// split at every output time.
fn step_nodes(grid: &[f64], step: f64) -> Vec<f64> {
    let start = grid[0];
    let end = *grid.last().expect("non-empty grid");
    let graded_len = GRADED_STEPS * step;
    let n_graded = GRADED_STEPS as usize * GRADING as usize;
    let mut nodes: Vec<f64> = (0..=n_graded)
        .map(|i| start + graded_len * (i as f64 / n_graded as f64).powi(GRADING))
        .take_while(|&t| t < end)
        .collect();
    let n_uniform = ((end - start - graded_len) / step - 1e-9).ceil().max(0.0) as usize;
    nodes.extend((1..=n_uniform).map(|i| start + graded_len + step * i as f64).filter(|&t| t < end));
    nodes.extend_from_slice(grid);
    nodes.sort_by(f64::total_cmp);
    nodes.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
    nodes
}

/// Classical RK4 for `dc/dt = (Q/V)(C_in − c) − (w_s/H) c` with `c(0) = 0`.
///
/// `inflow(t)` returns `(Q [m³/s], C_in [kg/m³])`. Steps have length `step`,
/// except for a graded start (see [`GRADING`]) and where they are cut short
/// to land on a grid time.
pub fn cstr_integrate(
    inflow: impl Fn(f64) -> (f64, f64),
    settling_velocity: f64,
    geometry: &TankGeometry,
    grid: &[f64],
    step: f64,
) -> TankState {
    if grid.is_empty() {
        return TankState { times: Vec::new(), conc: Vec::new() };
    }
    let volume = geometry.volume();
    let removal = settling_velocity / geometry.depth;
    let rhs = |t: f64, c: f64| {
        let (q, c_in) = inflow(t);
        q / volume * (c_in - c) - removal * c
    };
    let mut conc = Vec::with_capacity(grid.len());
    let mut c = 0.0;
    let mut next_out = 0;
    let nodes = step_nodes(grid, step);
    for (i, &t) in nodes.iter().enumerate() {
        if i > 0 {
            let t0 = nodes[i - 1];
            let h = t - t0;
            let k1 = rhs(t0, c);
            let k2 = rhs(t0 + 0.5 * h, c + 0.5 * h * k1);
            let k3 = rhs(t0 + 0.5 * h, c + 0.5 * h * k2);
            let k4 = rhs(t, c + h * k3);
            c += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            c = c.max(0.0);
        }
        while next_out < grid.len() && (grid[next_out] - t).abs() <= 1e-12 * t.abs().max(1.0) {
            conc.push(c);
            next_out += 1;
        }
    }
    debug_assert_eq!(conc.len(), grid.len());
    TankState { times: grid.to_vec(), conc }
}

/// Vertical settling profile, normalised to unit mean over the depth.
pub fn stratification(kappa: f64, z_over_h: f64) -> f64 {
    if kappa < 1e-6 {
        1.0 + kappa * (0.5 - z_over_h)
    } else {
        kappa * (kappa * (1.0 - z_over_h)).exp() / kappa.exp_m1()
    }
}

/// Ground-truth field evaluator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Oracle {
    pub geometry: TankGeometry,
    pub ode_step: f64,
    pub kappa_max: f64,
}

impl Default for Oracle {
    fn default() -> Self {
        OracleConfig::desk().oracle()
    }
}

/// Position-only factors of the field, reusable across times and classes.
#[derive(Debug, Clone, Copy)]
pub struct PointWeights {
    pub jet: f64,
    pub radial: f64,
    pub z_over_h: f64,
}

impl Oracle {
    pub fn cstr_solve(&self, p: &StormParams, settling_velocity: f64, grid: &[f64]) -> TankState {
        cstr_integrate(|t| inflow(p, t), settling_velocity, &self.geometry, grid, self.ode_step)
    }

    pub fn point_weights(&self, xyz: [f64; 3]) -> Result<PointWeights, OracleError> {
        let g = &self.geometry;
        if !g.contains(xyz) {
            return Err(OracleError::OutsideTank(xyz[0], xyz[1], xyz[2]));
        }
        let [x, y, z] = xyz;
        let rho_jet_sq = y * y + (z - g.jet_height).powi(2);
        let jet = (-rho_jet_sq / (2.0 * g.jet_radius * g.jet_radius)).exp()
            * (-(x + g.radius) / g.jet_decay_length).exp();
        let radial = (x * x + y * y).sqrt() / g.radius;
        Ok(PointWeights { jet, radial, z_over_h: z / g.depth })
    }

    fn combine(&self, w: &PointWeights, q: f64, c_in: f64, c_tank: f64, kappa: f64) -> (f64, f64) {
        let g = &self.geometry;
        let speed = q / g.pipe_area * (w.jet + g.circulation * (1.0 - w.jet) * w.radial);
        let conc = w.jet * c_in + (1.0 - w.jet) * c_tank * stratification(kappa, w.z_over_h);
        (speed, conc)
    }

    pub fn kappa(&self, settling_velocity: f64, t: f64) -> f64 {
        (settling_velocity * t / self.geometry.depth).min(self.kappa_max)
    }

    /// `(|u| [m/s], c [kg/m³])` at time `t` (s) and position `xyz` (m).
    pub fn field_eval(
        &self,
        p: &StormParams,
        settling_velocity: f64,
        t: f64,
        xyz: [f64; 3],
        state: &TankState,
    ) -> Result<(f64, f64), OracleError> {
        let w = self.point_weights(xyz)?;
        let c_tank = state.at(t)?;
        let (q, c_in) = inflow(p, t);
        Ok(self.combine(&w, q, c_in, c_tank, self.kappa(settling_velocity, t)))
    }

    /// Fields for one case over all classes, times and points, laid out
    /// `[class][time][point][(|u|, c)]`.
    pub fn case_fields(
        &self,
        p: &StormParams,
        classes: &[f64],
        times: &[f64],
        coords: &[[f64; 3]],
    ) -> Result<Vec<f64>, OracleError> {
        let weights = coords
            .iter()
            .map(|&xyz| self.point_weights(xyz))
            .collect::<Result<Vec<_>, _>>()?;
        let mut grid = Vec::with_capacity(times.len() + 1);
        grid.push(0.0);
        grid.extend_from_slice(times);
        let inflows: Vec<(f64, f64)> = times.iter().map(|&t| inflow(p, t)).collect();
        let mut out = Vec::with_capacity(classes.len() * times.len() * coords.len() * 2);
        for &ws in classes {
            let state = self.cstr_solve(p, ws, &grid);
            for (ti, &t) in times.iter().enumerate() {
                let (q, c_in) = inflows[ti];
                let c_tank = state.conc[ti + 1];
                let kappa = self.kappa(ws, t);
                for w in &weights {
                    let (u, c) = self.combine(w, q, c_in, c_tank, kappa);
                    out.push(u);
                    out.push(c);
                }
            }
        }
        Ok(out)
    }
}

/// Solution target selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Velocity,
    Concentration,
}

impl Target {
    pub const ALL: [Target; 2] = [Target::Velocity, Target::Concentration];

    pub fn index(self) -> usize {
        match self {
            Target::Velocity => 0,
            Target::Concentration => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Velocity => "velocity",
            Target::Concentration => "concentration",
        }
    }
}

impl std::str::FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "velocity" | "u" => Ok(Target::Velocity),
            "concentration" | "c" => Ok(Target::Concentration),
            other => Err(format!("unknown target '{other}' (expected velocity|concentration)")),
        }
    }
}

/// Feature and solution store for `M` cases × `C` classes × `O` times × `N` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub params: Vec<StormParams>,
    pub classes: Vec<f64>,
    /// Seconds since event start.
    pub times: Vec<f64>,
    /// `M × N` sample coordinates (m); sampling differs per case.
    pub coords: Vec<[f64; 3]>,
    /// `M × C × O × N × 2` values `(|u|, c)`.
    pub solutions: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub cases: usize,
    pub classes: usize,
    pub times: usize,
    pub points: usize,
}

impl Dims {
    /// Rows of the fully expanded feature matrix (one per case, class, time and point).
    pub fn feature_rows(&self) -> usize {
        self.cases * self.classes * self.times * self.points
    }
}

/// Width of one expanded feature row: 5 loading + 1 class + 1 time + 3 coordinates.
pub const FEATURE_WIDTH: usize = 10;

impl Dataset {
    pub fn dims(&self) -> Dims {
        Dims {
            cases: self.params.len(),
            classes: self.classes.len(),
            times: self.times.len(),
            points: if self.params.is_empty() { 0 } else { self.coords.len() / self.params.len() },
        }
    }

    pub fn check(&self) -> Result<(), OracleError> {
        let d = self.dims();
        if d.cases == 0 || d.classes == 0 || d.times == 0 || d.points == 0 {
            return Err(OracleError::Corrupt("empty dimension".into()));
        }
        if self.coords.len() != d.cases * d.points {
            return Err(OracleError::Corrupt("coordinate count".into()));
        }
        if self.solutions.len() != d.feature_rows() * 2 {
            return Err(OracleError::Corrupt("solution count".into()));
        }
        if self.solutions.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::Corrupt("non-finite solution".into()));
        }
        Ok(())
    }

    pub fn coord(&self, case: usize, point: usize) -> [f64; 3] {
        self.coords[case * self.dims().points + point]
    }

    #[inline]
    pub fn solution_index(&self, case: usize, class: usize, time: usize, point: usize) -> usize {
        let d = self.dims();
        (((case * d.classes + class) * d.times + time) * d.points + point) * 2
    }

    #[inline]
    pub fn solution(&self, case: usize, class: usize, time: usize, point: usize, target: Target) -> f64 {
        self.solutions[self.solution_index(case, class, time, point) + target.index()] as f64
    }

    pub fn write_swds(&self, path: &Path) -> Result<(), OracleError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), OracleError> {
        self.check()?;
        let d = self.dims();
        w.write_all(SWDS_MAGIC)?;
        for n in [d.cases, d.classes, d.times, d.points] {
            let n = u32::try_from(n).map_err(|_| OracleError::Config("dimension exceeds u32".into()))?;
            w.write_all(&n.to_le_bytes())?;
        }
        for p in &self.params {
            for v in p.to_array() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for v in self.classes.iter().chain(&self.times) {
            w.write_all(&v.to_le_bytes())?;
        }
        for xyz in &self.coords {
            for v in xyz {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        let mut buf = Vec::with_capacity(self.solutions.len() * 4);
        for v in &self.solutions {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_swds(path: &Path) -> Result<Self, OracleError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, OracleError> {
        let mut magic = [0u8; 6];
        read_exact(r, &mut magic)?;
        if &magic != SWDS_MAGIC {
            return Err(OracleError::BadMagic);
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let mut b = [0u8; 4];
            read_exact(r, &mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let [m, c, o, n] = dims;
        let params = read_f64s(r, m * 5)?
            .chunks_exact(5)
            .map(|a| StormParams::from_array([a[0], a[1], a[2], a[3], a[4]]))
            .collect();
        let classes = read_f64s(r, c)?;
        let times = read_f64s(r, o)?;
        let coords = read_f64s(r, m * n * 3)?.chunks_exact(3).map(|a| [a[0], a[1], a[2]]).collect();
        let count = m * c * o * n * 2;
        let mut raw = vec![0u8; count * 4];
        read_exact(r, &mut raw)?;
        let solutions = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(OracleError::Corrupt("trailing bytes".into()));
        }
        let ds = Dataset { params, classes, times, coords, solutions };
        ds.check()?;
        Ok(ds)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), OracleError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => OracleError::Corrupt("unexpected end of file".into()),
        _ => OracleError::Io(e),
    })
}

fn read_f64s(r: &mut impl Read, count: usize) -> Result<Vec<f64>, OracleError> {
    let mut raw = vec![0u8; count * 8];
    read_exact(r, &mut raw)?;
    Ok(raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect())
}

/// Draws the loading design and spatial samples and evaluates the oracle on
/// the full grid. Deterministic in `cfg.seed`.
pub fn generate_dataset(cfg: &OracleConfig) -> Result<Dataset, OracleError> {
    cfg.validate()?;
    let params = lhs_sample(&cfg.ranges, cfg.cases, derive_seed(cfg.seed, 0));
    let classes = settling_classes(cfg.classes)?.velocities().to_vec();
    let times = cfg.time_grid();
    let oracle = cfg.oracle();

    let per_case: Vec<(Vec<[f64; 3]>, Vec<f64>)> = params
        .par_iter()
        .enumerate()
        .map(|(case, p)| {
            let coords =
                sample_cylinder(&cfg.geometry, cfg.points, derive_seed(cfg.seed, 1_000 + case as u64));
            let fields = oracle.case_fields(p, &classes, &times, &coords)?;
            Ok((coords, fields))
        })
        .collect::<Result<_, OracleError>>()?;

    let mut coords = Vec::with_capacity(cfg.cases * cfg.points);
    let mut solutions = Vec::with_capacity(cfg.solution_count() as usize);
    for (xyz, fields) in per_case {
        coords.extend(xyz);
        solutions.extend(fields.into_iter().map(|v| v as f32));
    }
    let ds = Dataset { params, classes, times, coords, solutions };
    ds.check()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_inflow(q: f64, c: f64) -> impl Fn(f64) -> (f64, f64) {
        move |_| (q, c)
    }

    #[test]
    fn relaxes_to_inflow_without_settling() {
        let g = TankGeometry::default();
        let grid: Vec<f64> = (0..=200).map(|i| i as f64 * 100.0).collect();
        let s = cstr_integrate(constant_inflow(0.01, 2.0), 0.0, &g, &grid, 1.0);
        assert!(s.conc.windows(2).all(|w| w[1] >= w[0]));
        assert!((s.conc.last().unwrap() - 2.0).abs() < 1e-6);
        assert_eq!(s.conc[0], 0.0);
    }

    #[test]
    fn steady_state_balances_settling() {
        let g = TankGeometry::default();
        let (q, c_in, ws) = (0.005, 1.5, 2e-3);
        let grid: Vec<f64> = vec![0.0, 20_000.0];
        let s = cstr_integrate(constant_inflow(q, c_in), ws, &g, &grid, 1.0);
        let rate = q / g.volume();
        let expect = c_in * rate / (rate + ws / g.depth);
        assert!((s.conc[1] / expect - 1.0).abs() < 1e-6, "{} vs {expect}", s.conc[1]);
    }

    #[test]
    fn no_inflow_stays_empty() {
        let g = TankGeometry::default();
        let s = cstr_integrate(constant_inflow(0.0, 3.0), 0.05, &g, &[0.0, 100.0, 3600.0], 1.0);
        assert!(s.conc.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn stratification_has_unit_mean() {
        for kappa in [0.0, 1e-8, 1e-3, 0.5, 3.0, 8.0] {
            // composite Simpson over 1000 intervals
            let n = 1000;
            let h = 1.0 / n as f64;
            let mean = (0..=n)
                .map(|i| {
                    let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                    w * stratification(kappa, i as f64 * h)
                })
                .sum::<f64>()
                * h
                / 3.0;
            assert!((mean - 1.0).abs() < 1e-6, "kappa={kappa}: {mean}");
        }
        // series branch agrees with the closed form at the switch-over
        let kappa = 0.999e-6_f64;
        let closed = kappa * (kappa * 0.8).exp() / kappa.exp_m1();
        assert!((stratification(kappa, 0.2) - closed).abs() < 1e-12);
    }

    #[test]
    fn inlet_probe_sees_inflow() {
        let o = Oracle::default();
        let p = StormParams::sensitivity_baseline();
        let grid: Vec<f64> = (0..=60).map(|i| i as f64 * 60.0).collect();
        let s = o.cstr_solve(&p, 1e-4, &grid);
        for &t in &[60.0, 600.0, 1800.0, 3600.0] {
            let (u, c) = o.field_eval(&p, 1e-4, t, o.geometry.inlet_probe(), &s).unwrap();
            let (q, c_in) = inflow(&p, t);
            assert!((c - c_in).abs() < 1e-12);
            assert!((u - q / o.geometry.pipe_area).abs() < 1e-12);
        }
    }

    #[test]
    fn start_of_event_is_jet_only() {
        let o = Oracle::default();
        let p = StormParams::sensitivity_baseline();
        let s = o.cstr_solve(&p, 1e-3, &[0.0, 60.0]);
        for xyz in sample_cylinder(&o.geometry, 50, 2) {
            let (_, c) = o.field_eval(&p, 1e-3, 0.0, xyz, &s).unwrap();
            let w = o.point_weights(xyz).unwrap();
            assert!((c - w.jet * p.c0).abs() < 1e-15);
        }
    }

    #[test]
    fn outside_points_rejected() {
        let o = Oracle::default();
        let p = StormParams::sensitivity_baseline();
        let s = o.cstr_solve(&p, 1e-3, &[0.0, 60.0]);
        assert!(matches!(
            o.field_eval(&p, 1e-3, 30.0, [1.0, 0.0, 0.5], &s),
            Err(OracleError::OutsideTank(..))
        ));
        assert!(matches!(
            o.field_eval(&p, 1e-3, 30.0, [0.0, 0.0, -0.1], &s),
            Err(OracleError::OutsideTank(..))
        ));
        assert!(matches!(
            o.field_eval(&p, 1e-3, 90.0, [0.0, 0.0, 0.5], &s),
            Err(OracleError::OutsideEvent(_))
        ));
    }

    #[test]
    fn concentration_is_linear_in_c0() {
        let o = Oracle::default();
        let p = StormParams::sensitivity_baseline();
        let scaled = StormParams { c0: 2.5 * p.c0, ..p };
        let times = [230.0, 1200.0, 3600.0];
        let coords = sample_cylinder(&o.geometry, 20, 9);
        let a = o.case_fields(&p, &[1e-5, 1e-2], &times, &coords).unwrap();
        let b = o.case_fields(&scaled, &[1e-5, 1e-2], &times, &coords).unwrap();
        for (x, y) in a.chunks(2).zip(b.chunks(2)) {
            assert_eq!(x[0], y[0]);
            assert!((y[1] - 2.5 * x[1]).abs() <= 1e-14 * y[1].abs().max(1e-300));
        }
    }

    #[test]
    fn outflow_never_exceeds_inflow_mass() {
        let g = TankGeometry::default();
        let (q, c_in) = (0.002, 1.0);
        let grid: Vec<f64> = (0..=3600).map(|i| i as f64).collect();
        let s = cstr_integrate(constant_inflow(q, c_in), 0.0, &g, &grid, 1.0);
        let out: f64 = s.conc.windows(2).map(|w| 0.5 * q * (w[0] + w[1])).sum();
        assert!(out <= q * c_in * 3600.0);
    }

    #[test]
    fn full_dims_are_metadata_only() {
        let cfg = OracleConfig::full_scale();
        cfg.validate().unwrap();
        assert_eq!(cfg.output_interval(), 10.0);
        assert_eq!(cfg.solution_count(), 640 * 9 * 360 * 8000 * 2);
        assert_eq!(OracleConfig::desk().solutions_bytes(), 48 * 3 * 60 * 512 * 2 * 4);
    }

    #[test]
    fn config_validation() {
        let mut cfg = OracleConfig::desk();
        cfg.ode_step = 0.7;
        assert!(cfg.validate().is_err());
        cfg = OracleConfig { classes: 1, ..OracleConfig::desk() };
        assert!(cfg.validate().is_err());
    }

    fn tiny() -> OracleConfig {
        OracleConfig { cases: 4, classes: 2, times: 6, points: 16, duration: 360.0, ..OracleConfig::desk() }
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let ds = generate_dataset(&tiny()).unwrap();
        assert_eq!(ds.dims(), Dims { cases: 4, classes: 2, times: 6, points: 16 });
        assert!(ds.solutions.iter().all(|&v| v >= 0.0));
        let mut a = Vec::new();
        ds.write_to(&mut a).unwrap();
        let mut b = Vec::new();
        generate_dataset(&tiny()).unwrap().write_to(&mut b).unwrap();
        assert_eq!(a, b);
        let back = Dataset::read_from(&mut a.as_slice()).unwrap();
        assert_eq!(back, ds);

        // bit layout of the header
        assert_eq!(&a[..6], b"SWDS1\0");
        assert_eq!(u32::from_le_bytes(a[6..10].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(a[18..22].try_into().unwrap()), 16);
        let lambda0 = f64::from_le_bytes(a[22..30].try_into().unwrap());
        assert_eq!(lambda0, ds.params[0].lambda);
    }

    #[test]
    fn corrupt_files_rejected() {
        let ds = generate_dataset(&tiny()).unwrap();
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::read_from(&mut bad.as_slice()), Err(OracleError::BadMagic)));
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(Dataset::read_from(&mut &short[..]), Err(OracleError::Corrupt(_))));
    }

    #[test]
    fn spatial_samples_differ_between_cases() {
        let ds = generate_dataset(&tiny()).unwrap();
        assert_ne!(ds.coord(0, 0), ds.coord(1, 0));
    }
}
