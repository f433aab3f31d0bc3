//! Storm-event loadings: the gamma-shaped hydrograph, the exponentially
//! decaying pollutograph, Latin hypercube sampling of their parameters,
//! settling classes and spatial sampling of the separator tank.
//!
//! Units: hydrograph time is in minutes and flow in m³/min; `kd` is per hour.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoadingError {
    #[error("non-finite storm parameter {0}")]
    NonFinite(&'static str),
    #[error("invalid range for {name}: [{lo}, {hi}]")]
    InvalidRange { name: &'static str, lo: f64, hi: f64 },
    #[error("{0}")]
    Invalid(&'static str),
}

pub const PARAM_NAMES: [&str; 5] = ["lambda", "k", "theta", "c0", "kd"];

/// Loading parameters of one storm event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StormParams {
    /// Event volume scale (m³).
    pub lambda: f64,
    /// Gamma shape (dimensionless).
    pub k: f64,
    /// Gamma scale (min).
    pub theta: f64,
    /// Initial concentration (kg/m³).
    pub c0: f64,
    /// Concentration decay coefficient (1/h).
    pub kd: f64,
}

impl StormParams {
    pub fn to_array(&self) -> [f64; 5] {
        [self.lambda, self.k, self.theta, self.c0, self.kd]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self { lambda: a[0], k: a[1], theta: a[2], c0: a[3], kd: a[4] }
    }

    /// Canonical single event used for sensitivity maps.
    pub fn sensitivity_baseline() -> Self {
        Self { lambda: 0.14, k: 1.9, theta: 10.0, c0: 1.3, kd: 0.8 }
    }

    fn check_finite(&self) -> Result<(), LoadingError> {
        for (v, name) in self.to_array().iter().zip(PARAM_NAMES) {
            if !v.is_finite() {
                return Err(LoadingError::NonFinite(name));
            }
        }
        Ok(())
    }
}

/// Per-parameter sampling bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub lower: [f64; 5],
    pub upper: [f64; 5],
}

impl ParamRanges {
    /// Bounds observed across the monitored field events.
    pub const FIELD: ParamRanges = ParamRanges {
        lower: [0.0017, 1.1, 0.23, 0.1072, 0.5],
        upper: [0.2012, 99.3, 51.5, 3.6963, 1.0],
    };

    pub fn new(lower: [f64; 5], upper: [f64; 5]) -> Result<Self, LoadingError> {
        for i in 0..5 {
            if !(lower[i] < upper[i]) {
                return Err(LoadingError::InvalidRange {
                    name: PARAM_NAMES[i],
                    lo: lower[i],
                    hi: upper[i],
                });
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, p: &StormParams) -> bool {
        p.to_array()
            .iter()
            .enumerate()
            .all(|(i, v)| *v >= self.lower[i] && *v <= self.upper[i])
    }

    /// The 32 corners of the parameter box.
    pub fn corners(&self) -> Vec<StormParams> {
        (0..32u32)
            .map(|mask| {
                StormParams::from_array(std::array::from_fn(|i| {
                    if mask & (1 << i) != 0 {
                        self.upper[i]
                    } else {
                        self.lower[i]
                    }
                }))
            })
            .collect()
    }
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self::FIELD
    }
}

/// Inflow rate Q(t) in m³/min for `t` in minutes. The gamma density is
/// evaluated in log space so large shape parameters do not overflow.
pub fn hydrograph_q(p: &StormParams, t: f64) -> Result<f64, LoadingError> {
    p.check_finite()?;
    if !t.is_finite() {
        return Err(LoadingError::NonFinite("t"));
    }
    Ok(hydrograph_unchecked(p, t))
}

pub(crate) fn hydrograph_unchecked(p: &StormParams, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    // unit-mass gamma density in log space, then scaled by the event volume
    let log_density = -ln_gamma(p.k) - p.k * p.theta.ln() + (p.k - 1.0) * t.ln() - t / p.theta;
    p.lambda * log_density.exp()
}

/// Inlet concentration C(t) in kg/m³ for `t` in minutes.
pub fn pollutograph_c(p: &StormParams, t: f64) -> f64 {
    p.c0 * (-p.kd * t / 60.0).exp()
}

/// Latin hypercube design over `ranges`: along every dimension each of the `m`
/// equal-width strata holds exactly one sample.
pub fn lhs_sample(ranges: &ParamRanges, m: usize, seed: u64) -> Vec<StormParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns: [Vec<f64>; 5] = Default::default();
    for (dim, column) in columns.iter_mut().enumerate() {
        let mut strata: Vec<usize> = (0..m).collect();
        strata.shuffle(&mut rng);
        let (lo, hi) = (ranges.lower[dim], ranges.upper[dim]);
        *column = strata
            .into_iter()
            .map(|s| {
                let u: f64 = rng.gen();
                let v = lo + (hi - lo) * (s as f64 + u) / m as f64;
                v.clamp(lo, hi)
            })
            .collect();
    }
    (0..m)
        .map(|i| StormParams::from_array(std::array::from_fn(|d| columns[d][i])))
        .collect()
}

/// Particle classes identified by their terminal velocity (m/s), ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettlingClassSet(Vec<f64>);

impl SettlingClassSet {
    pub fn new(velocities: Vec<f64>) -> Result<Self, LoadingError> {
        if velocities.is_empty() || velocities.iter().any(|&w| !(w > 0.0)) {
            return Err(LoadingError::Invalid("settling velocities must be positive"));
        }
        if velocities.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LoadingError::Invalid("settling velocities must be strictly increasing"));
        }
        Ok(Self(velocities))
    }

    pub fn velocities(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `n` log-spaced terminal velocities from 1e-6 to 1e-1 m/s inclusive.
pub fn settling_classes(n: usize) -> Result<SettlingClassSet, LoadingError> {
    if n < 2 {
        return Err(LoadingError::Invalid("need at least two settling classes"));
    }
    let step = 5.0 / (n - 1) as f64;
    let v = (0..n).map(|j| 10f64.powf(-6.0 + step * j as f64)).collect();
    SettlingClassSet::new(v)
}

/// Cylindrical separator geometry, lengths in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TankGeometry {
    pub radius: f64,
    pub depth: f64,
    /// Height of the inlet jet axis.
    pub jet_height: f64,
    pub jet_radius: f64,
    pub jet_decay_length: f64,
    /// Inlet pipe cross-section (m²).
    pub pipe_area: f64,
    /// Fraction of jet velocity carried by the background circulation.
    pub circulation: f64,
}

impl Default for TankGeometry {
    fn default() -> Self {
        Self {
            radius: 0.605,
            depth: 1.21,
            jet_height: 0.9,
            jet_radius: 0.12,
            jet_decay_length: 0.6,
            pipe_area: 0.0177,
            circulation: 0.05,
        }
    }
}

impl TankGeometry {
    pub fn validate(&self) -> Result<(), LoadingError> {
        let all = [
            self.radius,
            self.depth,
            self.jet_height,
            self.jet_radius,
            self.jet_decay_length,
            self.pipe_area,
            self.circulation,
        ];
        if all.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(LoadingError::Invalid("tank geometry values must be positive"));
        }
        if self.jet_height >= self.depth {
            return Err(LoadingError::Invalid("jet height must lie below the tank depth"));
        }
        if self.jet_radius >= self.radius {
            return Err(LoadingError::Invalid("jet radius must be smaller than the tank radius"));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        std::f64::consts::PI * self.radius * self.radius * self.depth
    }

    pub fn contains(&self, xyz: [f64; 3]) -> bool {
        let [x, y, z] = xyz;
        let tol = 1e-12 * self.radius.max(self.depth);
        x * x + y * y <= self.radius * self.radius * (1.0 + 1e-12) + tol && z >= -tol && z <= self.depth + tol
    }

    /// Inlet jet axis at the tank wall.
    pub fn inlet_probe(&self) -> [f64; 3] {
        [-self.radius, 0.0, self.jet_height]
    }

    /// Outlet location opposite the inlet.
    pub fn outlet_probe(&self) -> [f64; 3] {
        [self.radius, 0.0, self.jet_height]
    }
}

/// Uniform points in the cylinder.
pub fn sample_cylinder(geom: &TankGeometry, n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
            let r = geom.radius * u1.sqrt();
            let phi = std::f64::consts::TAU * u2;
            [r * phi.cos(), r * phi.sin(), geom.depth * u3]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let inner: f64 = (1..n).map(|i| f(a + h * i as f64)).sum();
        h * (0.5 * (f(a) + f(b)) + inner)
    }

    #[test]
    fn hydrograph_peak_at_gamma_mode() {
        let p = StormParams { lambda: 0.14, k: 1.9, theta: 10.0, c0: 1.0, kd: 0.5 };
        let (best_t, _) = (0..=60_000)
            .map(|i| i as f64 * 1e-3)
            .map(|t| (t, hydrograph_q(&p, t).unwrap()))
            .fold((0.0, f64::MIN), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        assert!((best_t - 9.0).abs() < 1e-3, "{best_t}");
    }

    #[test]
    fn hydrograph_integrates_to_lambda() {
        let p = StormParams { lambda: 0.14, k: 1.9, theta: 10.0, c0: 1.0, kd: 0.5 };
        let total = trapezoid(|t| hydrograph_q(&p, t).unwrap(), 0.0, 600.0, 600_000);
        assert!((total / p.lambda - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn hydrograph_zero_at_origin() {
        for k in [1.1, 2.0, 50.0, 99.3] {
            let p = StormParams { lambda: 0.1, k, theta: 3.0, c0: 1.0, kd: 0.5 };
            assert_eq!(hydrograph_q(&p, 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn hydrograph_finite_at_extreme_corner() {
        let p = StormParams { lambda: 0.2012, k: 99.3, theta: 51.5, c0: 1.0, kd: 0.5 };
        for t in [1e-3, 1.0, 60.0, 5000.0, 1e5] {
            assert!(hydrograph_q(&p, t).unwrap().is_finite());
        }
        let bad = StormParams { lambda: f64::NAN, ..p };
        assert_eq!(hydrograph_q(&bad, 1.0), Err(LoadingError::NonFinite("lambda")));
    }

    #[test]
    fn ln_gamma_accuracy() {
        // integer arguments against log factorials
        let mut log_fact = 0.0_f64;
        for n in 1..=99u32 {
            if n > 1 {
                log_fact += ((n - 1) as f64).ln();
            }
            let got = ln_gamma(n as f64);
            let err = if log_fact == 0.0 { got.abs() } else { ((got - log_fact) / log_fact).abs() };
            assert!(err < 1e-10, "n={n}: {got} vs {log_fact}");
        }
        // Γ(1.5) = √π / 2
        let expect = (std::f64::consts::PI.sqrt() / 2.0).ln();
        assert!(((ln_gamma(1.5) - expect) / expect).abs() < 1e-10);
    }

    #[test]
    fn pollutograph_values() {
        let p = StormParams { lambda: 0.1, k: 2.0, theta: 1.0, c0: 1.3, kd: 0.8 };
        assert_eq!(pollutograph_c(&p, 0.0), 1.3);
        assert!((pollutograph_c(&p, 60.0) - 0.584_127_65).abs() < 1e-8);
        let doubled = StormParams { kd: 1.6, ..p };
        let r1 = pollutograph_c(&p, 45.0) / p.c0;
        let r2 = pollutograph_c(&doubled, 45.0) / p.c0;
        assert!((r2 - r1 * r1).abs() < 1e-15);
    }

    #[test]
    fn lhs_small_design_is_stratified() {
        let r = ParamRanges::FIELD;
        let s = lhs_sample(&r, 4, 11);
        for d in 0..5 {
            let mut strata: Vec<usize> = s
                .iter()
                .map(|p| {
                    let v = p.to_array()[d];
                    (((v - r.lower[d]) / (r.upper[d] - r.lower[d])) * 4.0).floor().min(3.0) as usize
                })
                .collect();
            strata.sort();
            assert_eq!(strata, vec![0, 1, 2, 3]);
        }
        assert!(s.iter().all(|p| r.contains(p)));
        assert_eq!(s, lhs_sample(&r, 4, 11));
        assert_ne!(s, lhs_sample(&r, 4, 12));
    }

    #[test]
    fn settling_class_grid() {
        let c = settling_classes(9).unwrap();
        let v = c.velocities();
        assert_eq!(v.len(), 9);
        assert!((v[0] - 1e-6).abs() < 1e-18);
        assert!((v[8] - 0.1).abs() < 1e-15);
        for target in [7.50e-5, 3.16e-4, 5.62e-3] {
            assert!(v.iter().any(|w| (w / target - 1.0).abs() < 2e-3), "{target}");
        }
        assert!(v.windows(2).all(|w| w[0] < w[1]));
        assert!(settling_classes(1).is_err());
    }

    #[test]
    fn cylinder_samples_inside_with_expected_height() {
        let g = TankGeometry::default();
        let pts = sample_cylinder(&g, 10_000, 5);
        assert!(pts.iter().all(|&p| g.contains(p)));
        let mean_z = pts.iter().map(|p| p[2]).sum::<f64>() / pts.len() as f64;
        // uniform on [0,H]: σ = H/√12, standard error σ/√n
        let se = g.depth / 12f64.sqrt() / 100.0;
        assert!((mean_z - g.depth / 2.0).abs() < 3.0 * se, "{mean_z}");
        assert_eq!(pts, sample_cylinder(&g, 10_000, 5));
    }

    #[test]
    fn geometry_validation() {
        assert!(TankGeometry::default().validate().is_ok());
        let bad = TankGeometry { jet_height: 2.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(ParamRanges::new([1.0; 5], [1.0; 5]).is_err());
    }

    proptest! {
        #[test]
        fn hydrograph_linear_in_lambda(i in 0usize..64, t in 0.01f64..120.0) {
            let p = lhs_sample(&ParamRanges::FIELD, 64, 3)[i];
            let q = hydrograph_q(&p, t).unwrap();
            let q2 = hydrograph_q(&StormParams { lambda: 2.0 * p.lambda, ..p }, t).unwrap();
            prop_assert!((q2 - 2.0 * q).abs() <= 1e-14 * q2.abs());
        }

        #[test]
        fn lhs_stratified_for_any_size(m in 1usize..40, seed in any::<u64>()) {
            let r = ParamRanges::FIELD;
            let s = lhs_sample(&r, m, seed);
            for d in 0..5 {
                let mut seen = vec![false; m];
                for p in &s {
                    let v = p.to_array()[d];
                    let idx = (((v - r.lower[d]) / (r.upper[d] - r.lower[d])) * m as f64).floor() as usize;
                    seen[idx.min(m - 1)] = true;
                }
                prop_assert!(seen.iter().all(|&b| b));
            }
        }
    }
}
