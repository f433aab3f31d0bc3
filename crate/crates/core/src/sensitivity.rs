//! Sensitivity of predicted concentration to the five raw loading
//! parameters, by reverse-mode differentiation through a trained model.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::loading::{StormParams, TankGeometry, PARAM_NAMES};
use crate::models::{ModelError, ModelParams, SplitInputs};
use crate::oracle::Target;
use crate::tensor::{Tape, Tensor5, TensorError};

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("model does not predict concentration")]
    NoConcentration,
    #[error("nothing to evaluate (no points or no times)")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// `∂c/∂π` on a set of query points and times for one settling class.
/// Values are laid out `[time][point]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityField {
    pub params: StormParams,
    pub settling_velocity: f64,
    pub points: Vec<[f64; 3]>,
    pub times: Vec<f64>,
    /// De-standardized concentration.
    pub c: Vec<f64>,
    /// Derivatives with respect to raw parameters, ordered like [`PARAM_NAMES`].
    pub grads: Vec<[f64; 5]>,
    /// Same derivatives with respect to standardized parameters.
    pub grads_standardized: Vec<[f64; 5]>,
    /// Filled by [`relative_map`].
    pub relative: Option<Vec<[f64; 5]>>,
    /// Parameters whose derivative is zero everywhere (relative map left at 0).
    pub zero_params: [bool; 5],
}

impl SensitivityField {
    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }
}

/// Reverse-mode sensitivities; one backward pass per query time.
///
/// The loading is replicated along the case axis with one query point per
/// case, so each output row depends only on its own copy of the parameters
/// and a single backward sweep yields every per-point gradient.
pub fn grad_wrt_loading(
    model: &ModelParams,
    params: &StormParams,
    settling_velocity: f64,
    times: &[f64],
    points: &[[f64; 3]],
) -> Result<SensitivityField, SensitivityError> {
    if times.is_empty() || points.is_empty() {
        return Err(SensitivityError::Empty);
    }
    let stats = model.stats()?;
    let targets = model.targets();
    let col = targets.iter().position(|&t| t == Target::Concentration).ok_or(SensitivityError::NoConcentration)?;
    let width = targets.len();
    let n = points.len();
    let c_std = stats.targets.std[Target::Concentration.index()];
    let p_std = &stats.loading.std;

    let mut c = Vec::with_capacity(n * times.len());
    let mut grads = Vec::with_capacity(n * times.len());
    let mut grads_standardized = Vec::with_capacity(n * times.len());
    for &t in times {
        let inputs = single_time_inputs(model, params, settling_velocity, t, points)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let vars = inputs.record(&mut tape);
        let out = model.forward(&mut tape, &bound, &vars)?;
        let mut mask = vec![0.0; width];
        mask[col] = 1.0;
        let mask = tape.leaf(Tensor5::from_dims([1, 1, 1, 1, width], mask)?);
        let picked = tape.mul(out, mask)?;
        let total = tape.sum(picked);
        for row in tape.value(out).values().chunks_exact(width) {
            c.push(stats.untarget(Target::Concentration, row[col]));
        }
        let g = tape.backward(total)?.get(vars.p);
        for row in g.values().chunks_exact(5) {
            let std: [f64; 5] = std::array::from_fn(|j| row[j] * c_std);
            grads_standardized.push(std);
            grads.push(std::array::from_fn(|j| std[j] / p_std[j]));
        }
    }
    Ok(SensitivityField {
        params: *params,
        settling_velocity,
        points: points.to_vec(),
        times: times.to_vec(),
        c,
        grads,
        grads_standardized,
        relative: None,
        zero_params: [false; 5],
    })
}

fn single_time_inputs(
    model: &ModelParams,
    params: &StormParams,
    settling_velocity: f64,
    t: f64,
    points: &[[f64; 3]],
) -> Result<SplitInputs, ModelError> {
    let stats = model.stats()?;
    let n = points.len();
    let p = stats.loading(params.to_array());
    Ok(SplitInputs {
        p: Tensor5::from_dims([n, 1, 1, 1, 5], p.repeat(n))?,
        cl: Tensor5::from_dims([1, 1, 1, 1, 1], vec![stats.class(settling_velocity)])?,
        t: Tensor5::from_dims([1, 1, 1, 1, 1], vec![stats.time(t)])?,
        q: Tensor5::from_dims([n, 1, 1, 1, 3], points.iter().flat_map(|&x| stats.coord(x)).collect())?,
    })
}

/// De-standardized concentration predicted at `points` and time `t`.
pub fn predict_concentration(
    model: &ModelParams,
    params: &StormParams,
    settling_velocity: f64,
    t: f64,
    points: &[[f64; 3]],
) -> Result<Vec<f64>, SensitivityError> {
    let targets = model.targets();
    let col = targets.iter().position(|&t| t == Target::Concentration).ok_or(SensitivityError::NoConcentration)?;
    let stats = model.stats()?;
    let out = model.predict(&single_time_inputs(model, params, settling_velocity, t, points)?)?;
    Ok(out
        .values()
        .chunks_exact(targets.len())
        .map(|row| stats.untarget(Target::Concentration, row[col]))
        .collect())
}

/// Central differences on raw parameters with step `rel_step` times each
/// parameter's standardization scale. Layout matches [`SensitivityField::grads`].
pub fn finite_difference_grads(
    model: &ModelParams,
    params: &StormParams,
    settling_velocity: f64,
    times: &[f64],
    points: &[[f64; 3]],
    rel_step: f64,
) -> Result<Vec<[f64; 5]>, SensitivityError> {
    let stats = model.stats()?;
    let raw = params.to_array();
    let mut out = vec![[0.0; 5]; times.len() * points.len()];
    for j in 0..5 {
        let h = rel_step * stats.loading.std[j];
        let shifted = |d: f64| {
            let mut a = raw;
            a[j] += d;
            StormParams::from_array(a)
        };
        let (plus, minus) = (shifted(h), shifted(-h));
        for (ti, &t) in times.iter().enumerate() {
            let cp = predict_concentration(model, &plus, settling_velocity, t, points)?;
            let cm = predict_concentration(model, &minus, settling_velocity, t, points)?;
            for s in 0..points.len() {
                out[ti * points.len() + s][j] = (cp[s] - cm[s]) / (2.0 * h);
            }
        }
    }
    Ok(out)
}

/// Per-parameter division by the largest magnitude over all points and
/// times. Returns the scale used for each parameter (0 for an all-zero map).
pub fn normalize(values: &[[f64; 5]]) -> (Vec<[f64; 5]>, [f64; 5]) {
    let mut scale = [0.0f64; 5];
    for row in values {
        for j in 0..5 {
            scale[j] = scale[j].max(row[j].abs());
        }
    }
    let out = values
        .iter()
        .map(|row| std::array::from_fn(|j| if scale[j] > 0.0 { row[j] / scale[j] } else { 0.0 }))
        .collect();
    (out, scale)
}

pub fn relative_map(field: &SensitivityField) -> Result<SensitivityField, SensitivityError> {
    if field.is_empty() {
        return Err(SensitivityError::Empty);
    }
    let (relative, scale) = normalize(&field.grads);
    let zero_params = scale.map(|s| s == 0.0);
    if zero_params.iter().any(|&z| z) {
        let names: Vec<&str> = (0..5).filter(|&j| zero_params[j]).map(|j| PARAM_NAMES[j]).collect();
        log::warn!("sensitivity identically zero for {}", names.join(", "));
    }
    Ok(SensitivityField { relative: Some(relative), zero_params, ..field.clone() })
}

pub const SENSITIVITY_HEADER: [&str; 16] = [
    "x", "y", "z", "t", "w_s", "c", "dc_dlambda", "dc_dk", "dc_dtheta", "dc_dc0", "dc_dkd", "rel_dlambda", "rel_dk",
    "rel_dtheta", "rel_dc0", "rel_dkd",
];

#[derive(Serialize)]
struct Row {
    x: f64,
    y: f64,
    z: f64,
    t: f64,
    w_s: f64,
    c: f64,
    dc_dlambda: f64,
    dc_dk: f64,
    dc_dtheta: f64,
    dc_dc0: f64,
    dc_dkd: f64,
    rel_dlambda: f64,
    rel_dk: f64,
    rel_dtheta: f64,
    rel_dc0: f64,
    rel_dkd: f64,
}

/// One row per (time, point); relative columns are computed if absent.
pub fn export_sensitivity(field: &SensitivityField, path: &Path) -> Result<(), SensitivityError> {
    let relative = match &field.relative {
        Some(r) => r.clone(),
        None => relative_map(field)?.relative.expect("relative map"),
    };
    let mut w = csv::Writer::from_path(path)?;
    let n = field.points.len();
    for (i, (g, r)) in field.grads.iter().zip(&relative).enumerate() {
        let [x, y, z] = field.points[i % n];
        w.serialize(Row {
            x,
            y,
            z,
            t: field.times[i / n],
            w_s: field.settling_velocity,
            c: field.c[i],
            dc_dlambda: g[0],
            dc_dk: g[1],
            dc_dtheta: g[2],
            dc_dc0: g[3],
            dc_dkd: g[4],
            rel_dlambda: r[0],
            rel_dk: r[1],
            rel_dtheta: r[2],
            rel_dc0: r[3],
            rel_dkd: r[4],
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Regular `nx × nz` grid on the vertical `y = 0` mid-plane, kept just inside the wall.
pub fn midplane_points(geom: &TankGeometry, nx: usize, nz: usize) -> Vec<[f64; 3]> {
    let span = |i: usize, n: usize, lo: f64, hi: f64| {
        if n <= 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    let r = 0.98 * geom.radius;
    let mut out = Vec::with_capacity(nx * nz);
    for iz in 0..nz {
        for ix in 0..nx {
            out.push([span(ix, nx, -r, r), 0.0, span(iz, nz, 0.01 * geom.depth, 0.99 * geom.depth)]);
        }
    }
    out
}
