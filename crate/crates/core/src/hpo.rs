//! Tree-structured Parzen Estimator search over training hyperparameters.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::models::ArchitectureConfig;
use crate::seed::derive_seed;
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum HpoError {
    #[error("search space is empty")]
    EmptySpace,
    #[error("parameter '{0}': lower bound must be below upper bound")]
    BadBounds(String),
    #[error("parameter '{0}': log scale needs a positive lower bound")]
    BadLog(String),
    #[error("unknown hyperparameter '{0}'")]
    UnknownName(String),
    #[error("assignment has {got} values for {expected} parameters")]
    Arity { expected: usize, got: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Hyperparameters the search may tune.
pub const TUNABLE: [&str; 9] = [
    "batch_cases",
    "batch_classes",
    "batch_times",
    "batch_points",
    "hidden",
    "encoder_layers",
    "decoder_layers",
    "decay",
    "lr",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Domain {
    Float {
        lo: f64,
        hi: f64,
        #[serde(default)]
        log: bool,
    },
    Int {
        lo: i64,
        hi: i64,
    },
}

impl Domain {
    /// Bounds in the internal (possibly log) coordinate.
    fn internal_bounds(&self) -> (f64, f64) {
        match *self {
            Domain::Float { lo, hi, log: true } => (lo.ln(), hi.ln()),
            Domain::Float { lo, hi, .. } => (lo, hi),
            Domain::Int { lo, hi } => (lo as f64, hi as f64),
        }
    }

    fn to_internal(&self, v: f64) -> f64 {
        match self {
            Domain::Float { log: true, .. } => v.ln(),
            _ => v,
        }
    }

    /// Maps an internal coordinate back to a legal value.
    fn from_internal(&self, u: f64) -> f64 {
        match *self {
            Domain::Float { lo, hi, log: true } => u.exp().clamp(lo, hi),
            Domain::Float { lo, hi, .. } => u.clamp(lo, hi),
            Domain::Int { lo, hi } => u.round().clamp(lo as f64, hi as f64),
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        match *self {
            Domain::Float { lo, hi, .. } => (lo..=hi).contains(&v),
            Domain::Int { lo, hi } => v.fract() == 0.0 && (lo as f64..=hi as f64).contains(&v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchSpace {
    pub params: Vec<ParamSpec>,
}

impl SearchSpace {
    pub fn new(params: Vec<ParamSpec>) -> Result<Self, HpoError> {
        let s = Self { params };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), HpoError> {
        if self.params.is_empty() {
            return Err(HpoError::EmptySpace);
        }
        for p in &self.params {
            let ok = match p.domain {
                Domain::Float { lo, hi, log } => {
                    if log && lo <= 0.0 {
                        return Err(HpoError::BadLog(p.name.clone()));
                    }
                    lo < hi
                }
                Domain::Int { lo, hi } => lo < hi,
            };
            if !ok {
                return Err(HpoError::BadBounds(p.name.clone()));
            }
        }
        Ok(())
    }

    /// Bounds bracketing the desk-scale optimum (cases 40, classes 3, times 60, points 512).
    pub fn desk_default() -> Self {
        let int = |name: &str, lo, hi| ParamSpec { name: name.into(), domain: Domain::Int { lo, hi } };
        let float = |name: &str, lo, hi, log| ParamSpec { name: name.into(), domain: Domain::Float { lo, hi, log } };
        Self {
            params: vec![
                int("batch_cases", 2, 12),
                int("batch_times", 4, 24),
                int("batch_points", 8, 64),
                int("hidden", 16, 96),
                int("encoder_layers", 1, 3),
                int("decoder_layers", 1, 6),
                float("decay", 0.95, 1.0, false),
                float("lr", 1e-4, 1e-2, true),
            ],
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }
}

/// Writes an assignment into training and architecture configs.
pub fn apply_assignment(
    space: &SearchSpace,
    values: &[f64],
    train: &mut TrainConfig,
    arch: &mut ArchitectureConfig,
) -> Result<(), HpoError> {
    if values.len() != space.params.len() {
        return Err(HpoError::Arity { expected: space.params.len(), got: values.len() });
    }
    for (spec, &v) in space.params.iter().zip(values) {
        let n = v.round().max(0.0) as usize;
        match spec.name.as_str() {
            "batch_cases" => train.batch_cases = n,
            "batch_classes" => train.batch_classes = n,
            "batch_times" => train.batch_times = n,
            "batch_points" => train.batch_points = n,
            "hidden" => arch.hidden = n,
            "encoder_layers" => arch.encoder_layers = n,
            "decoder_layers" => arch.decoder_layers = n,
            "decay" => train.decay = v,
            "lr" => train.lr = v,
            other => return Err(HpoError::UnknownName(other.to_string())),
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpeSettings {
    pub n_startup: usize,
    /// Fraction of completed trials forming the "good" set.
    pub gamma: f64,
    pub candidates: usize,
}

impl Default for TpeSettings {
    fn default() -> Self {
        Self { n_startup: 10, gamma: 0.25, candidates: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub id: usize,
    pub values: Vec<f64>,
    pub objective: Option<f64>,
    pub status: TrialStatus,
    pub message: Option<String>,
}

impl Trial {
    fn objective_if_complete(&self) -> Option<f64> {
        match self.status {
            TrialStatus::Complete => self.objective.filter(|v| v.is_finite()),
            TrialStatus::Failed => None,
        }
    }
}

/// Equal-weight mixture of Gaussians truncated to `[lo, hi]`.
struct Parzen {
    centres: Vec<f64>,
    kernel: Normal,
    lo: f64,
    hi: f64,
    /// Kernel mass inside the domain, per centre.
    mass: Vec<f64>,
}

impl Parzen {
    fn new(centres: Vec<f64>, lo: f64, hi: f64) -> Self {
        let bw = (hi - lo) / (centres.len() as f64).sqrt();
        let kernel = Normal::new(0.0, bw).expect("positive bandwidth");
        let mass = centres
            .iter()
            .map(|&c| (kernel.cdf(hi - c) - kernel.cdf(lo - c)).max(1e-300))
            .collect();
        Self { centres, kernel, lo, hi, mass }
    }

    fn log_pdf(&self, x: f64) -> f64 {
        let n = self.centres.len() as f64;
        let p: f64 = self.centres.iter().zip(&self.mass).map(|(&c, m)| self.kernel.pdf(x - c) / m).sum::<f64>() / n;
        p.max(1e-300).ln()
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        let i = rng.gen_range(0..self.centres.len());
        let c = self.centres[i];
        let (a, b) = (self.kernel.cdf(self.lo - c), self.kernel.cdf(self.hi - c));
        let u = a + (b - a) * rng.gen::<f64>();
        (c + self.kernel.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16))).clamp(self.lo, self.hi)
    }
}

fn uniform(space: &SearchSpace, rng: &mut impl Rng) -> Vec<f64> {
    space
        .params
        .iter()
        .map(|p| {
            let (lo, hi) = p.domain.internal_bounds();
            let u = match p.domain {
                // widen by half a step so end points are as likely as interior integers
                Domain::Int { .. } => rng.gen_range(lo - 0.5..hi + 0.5),
                _ => rng.gen_range(lo..=hi),
            };
            p.domain.from_internal(u)
        })
        .collect()
}

/// Next assignment given the trial history.
pub fn suggest(history: &[Trial], space: &SearchSpace, settings: &TpeSettings, seed: u64) -> Result<Vec<f64>, HpoError> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done: Vec<(&Trial, f64)> =
        history.iter().filter_map(|t| t.objective_if_complete().map(|o| (t, o))).collect();
    if done.len() < settings.n_startup.max(2) {
        return Ok(uniform(space, &mut rng));
    }
    done.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.id.cmp(&b.0.id)));
    let n_good = ((settings.gamma * done.len() as f64).ceil() as usize).clamp(1, done.len() - 1);
    let (good, bad) = done.split_at(n_good);

    let densities: Vec<(Parzen, Parzen)> = space
        .params
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let (lo, hi) = p.domain.internal_bounds();
            let pts = |set: &[(&Trial, f64)]| set.iter().map(|(t, _)| p.domain.to_internal(t.values[j])).collect();
            (Parzen::new(pts(good), lo, hi), Parzen::new(pts(bad), lo, hi))
        })
        .collect();

    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..settings.candidates.max(1) {
        let candidate: Vec<f64> = space
            .params
            .iter()
            .zip(&densities)
            .map(|(p, (l, _))| p.domain.from_internal(l.sample(&mut rng)))
            .collect();
        let score: f64 = space
            .params
            .iter()
            .zip(&densities)
            .zip(&candidate)
            .map(|((p, (l, g)), &v)| {
                let u = p.domain.to_internal(v);
                l.log_pdf(u) - g.log_pdf(u)
            })
            .sum();
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, candidate));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub space: SearchSpace,
    pub trials: Vec<Trial>,
}

impl Study {
    pub fn best(&self) -> Option<&Trial> {
        self.trials
            .iter()
            .filter(|t| t.objective_if_complete().is_some())
            .min_by(|a, b| a.objective.unwrap().total_cmp(&b.objective.unwrap()))
    }

    /// Best objective seen after each trial (`inf` until one completes).
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.trials
            .iter()
            .map(|t| {
                if let Some(o) = t.objective_if_complete() {
                    best = best.min(o);
                }
                best
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HpoError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["trial".to_string()];
        header.extend(self.space.names().into_iter().map(String::from));
        header.extend(["objective".to_string(), "status".to_string()]);
        w.write_record(&header)?;
        for t in &self.trials {
            let mut row = vec![t.id.to_string()];
            row.extend(t.values.iter().map(|v| v.to_string()));
            row.push(t.objective.map(|o| o.to_string()).unwrap_or_default());
            row.push(
                match t.status {
                    TrialStatus::Complete => "complete",
                    TrialStatus::Failed => "failed",
                }
                .to_string(),
            );
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Sequential study; errors and non-finite objectives are recorded as
/// failed trials and ignored by later suggestions.
pub fn run_study<F>(
    mut objective: F,
    space: &SearchSpace,
    n_trials: usize,
    settings: &TpeSettings,
    seed: u64,
) -> Result<Study, HpoError>
where
    F: FnMut(&[f64]) -> Result<f64, String>,
{
    space.validate()?;
    let mut trials: Vec<Trial> = Vec::with_capacity(n_trials);
    for id in 0..n_trials {
        let values = suggest(&trials, space, settings, derive_seed(seed, id as u64))?;
        let trial = match objective(&values) {
            Ok(v) if v.is_finite() => {
                Trial { id, values, objective: Some(v), status: TrialStatus::Complete, message: None }
            }
            Ok(v) => Trial {
                id,
                values,
                objective: None,
                status: TrialStatus::Failed,
                message: Some(format!("non-finite objective {v}")),
            },
            Err(e) => Trial { id, values, objective: None, status: TrialStatus::Failed, message: Some(e) },
        };
        if let Some(msg) = &trial.message {
            log::warn!("trial {id} failed: {msg}");
        }
        trials.push(trial);
    }
    Ok(Study { space: space.clone(), trials })
}

/// Pure random search drawing from the same seed stream as [`run_study`].
pub fn random_search<F>(objective: F, space: &SearchSpace, n_trials: usize, seed: u64) -> Result<Study, HpoError>
where
    F: FnMut(&[f64]) -> Result<f64, String>,
{
    let settings = TpeSettings { n_startup: usize::MAX, ..TpeSettings::default() };
    run_study(objective, space, n_trials, &settings, seed)
}
