//! Accuracy metrics on unstandardized fields: R², per-case reports with
//! three accuracy bins, log-normal fits of per-case errors and parity
//! histograms.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::models::{ModelError, ModelParams};
use crate::oracle::{Dataset, Oracle, OracleError, Target};
use crate::training::{predict_case, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("R² needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("R² is undefined for a constant target")]
    ConstantTarget,
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("empty case list")]
    EmptySplit,
    #[error("log-normal fit needs positive values (got {0})")]
    NonPositive(f64),
    #[error("histogram needs at least 2 bins")]
    TooFewBins,
    #[error("predictor does not produce {0}")]
    MissingTarget(&'static str),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub fn r2(pred: &[f64], target: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != target.len() {
        return Err(EvalError::LengthMismatch(pred.len(), target.len()));
    }
    if target.len() < 2 {
        return Err(EvalError::TooFewSamples(target.len()));
    }
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(EvalError::ConstantTarget);
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / target.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    High,
    Medium,
    Low,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::High, Category::Medium, Category::Low];

    pub fn of(r2: f64) -> Self {
        if r2 > 0.8 {
            Category::High
        } else if r2 > 0.4 {
            Category::Medium
        } else {
            Category::Low
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::High => "high",
            Category::Medium => "medium",
            Category::Low => "low",
        }
    }

    pub fn criterion(self) -> &'static str {
        match self {
            Category::High => "R2>0.8",
            Category::Medium => "0.4<R2<=0.8",
            Category::Low => "R2<=0.4",
        }
    }
}

/// Something that yields unstandardized fields for a dataset case, laid out
/// `[class][time][point][target]` in the order of [`Predictor::targets`].
pub trait Predictor: Sync {
    fn targets(&self) -> Vec<Target>;
    fn predict_case(&self, dataset: &Dataset, case: usize) -> Result<Vec<f64>, EvalError>;
}

impl Predictor for ModelParams {
    fn targets(&self) -> Vec<Target> {
        ModelParams::targets(self)
    }

    fn predict_case(&self, dataset: &Dataset, case: usize) -> Result<Vec<f64>, EvalError> {
        let stats = self.stats()?;
        let targets = ModelParams::targets(self);
        let mut out = predict_case(self, dataset, case)?;
        for (i, v) in out.iter_mut().enumerate() {
            *v = stats.untarget(targets[i % targets.len()], *v);
        }
        Ok(out)
    }
}

/// The oracle re-run on a case's loading and coordinates.
impl Predictor for Oracle {
    fn targets(&self) -> Vec<Target> {
        Target::ALL.to_vec()
    }

    fn predict_case(&self, dataset: &Dataset, case: usize) -> Result<Vec<f64>, EvalError> {
        let n = dataset.dims().points;
        let coords = &dataset.coords[case * n..(case + 1) * n];
        Ok(self.case_fields(&dataset.params[case], &dataset.classes, &dataset.times, coords)?)
    }
}

/// Ground truth of one case for `target`, `[class][time][point]`.
pub fn case_truth(dataset: &Dataset, case: usize, target: Target) -> Vec<f64> {
    let start = dataset.solution_index(case, 0, 0, 0);
    let d = dataset.dims();
    dataset.solutions[start..start + d.classes * d.times * d.points * 2]
        .chunks_exact(2)
        .map(|pair| pair[target.index()] as f64)
        .collect()
}

fn column(values: &[f64], width: usize, col: usize) -> Vec<f64> {
    values.chunks_exact(width).map(|row| row[col]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub case: usize,
    pub target: Target,
    /// Unstandardized mean squared error.
    pub mse: f64,
    /// `NaN` when the case's target is constant.
    pub r2: f64,
    /// `None` when R² is undefined; such cases are left out of the fractions.
    pub category: Option<Category>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategorySummary {
    pub target: Target,
    pub counts: [usize; 3],
    /// Cases with a constant target (R² undefined).
    pub undefined: usize,
}

impl CategorySummary {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn fraction(&self, category: Category) -> f64 {
        let i = Category::ALL.iter().position(|&c| c == category).expect("category");
        self.counts[i] as f64 / self.total().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cases: Vec<CaseReport>,
    pub summaries: Vec<CategorySummary>,
    /// Pooled R² over every reported case, per target.
    pub pooled_r2: Vec<(Target, f64)>,
}

impl EvalReport {
    pub fn summary(&self, target: Target) -> Option<&CategorySummary> {
        self.summaries.iter().find(|s| s.target == target)
    }

    pub fn pooled(&self, target: Target) -> Option<f64> {
        self.pooled_r2.iter().find(|(t, _)| *t == target).map(|p| p.1)
    }

    pub fn case_mse(&self, target: Target) -> Vec<f64> {
        self.cases.iter().filter(|c| c.target == target).map(|c| c.mse).collect()
    }
}

/// Per-case metrics pooled over classes, times and points, for each target
/// the predictor produces.
pub fn per_case_report(
    predictor: &dyn Predictor,
    dataset: &Dataset,
    cases: &[usize],
) -> Result<EvalReport, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let targets = predictor.targets();
    let width = targets.len();
    let preds: Vec<Vec<f64>> =
        cases.par_iter().map(|&c| predictor.predict_case(dataset, c)).collect::<Result<_, _>>()?;
    let mut reports = Vec::new();
    let mut summaries = Vec::new();
    let mut pooled_r2 = Vec::new();
    for (col, &target) in targets.iter().enumerate() {
        let mut counts = [0usize; 3];
        let mut undefined = 0;
        let (mut all_p, mut all_y) = (Vec::new(), Vec::new());
        for (&case, pred) in cases.iter().zip(&preds) {
            let p = column(pred, width, col);
            let y = case_truth(dataset, case, target);
            let r = match r2(&p, &y) {
                Ok(r) => r,
                Err(EvalError::ConstantTarget) => {
                    log::warn!("case {case}: constant {} target, R² undefined", target.name());
                    f64::NAN
                }
                Err(e) => return Err(e),
            };
            let category = if r.is_nan() {
                undefined += 1;
                None
            } else {
                let c = Category::of(r);
                counts[Category::ALL.iter().position(|&k| k == c).expect("category")] += 1;
                Some(c)
            };
            reports.push(CaseReport { case, target, mse: mse(&p, &y), r2: r, category });
            all_p.extend(p);
            all_y.extend(y);
        }
        summaries.push(CategorySummary { target, counts, undefined });
        pooled_r2.push((target, r2(&all_p, &all_y).unwrap_or(f64::NAN)));
    }
    Ok(EvalReport { cases: reports, summaries, pooled_r2 })
}

/// Parameters of `log10(MSE*)` across cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistributionFit {
    pub mu: f64,
    pub sigma: f64,
    pub n: usize,
}

impl fmt::Display for DistributionFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "μ = {:.2} and σ = {:.2}", self.mu, self.sigma)
    }
}

/// Mean and sample standard deviation of `log10` values.
pub fn lognormal_fit(values: &[f64]) -> Result<DistributionFit, EvalError> {
    if values.len() < 2 {
        return Err(EvalError::TooFewSamples(values.len()));
    }
    if let Some(&bad) = values.iter().find(|v| !(**v > 0.0)) {
        return Err(EvalError::NonPositive(bad));
    }
    let logs: Vec<f64> = values.iter().map(|v| v.log10()).collect();
    let n = logs.len() as f64;
    let mu = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mu) * (l - mu)).sum::<f64>() / (n - 1.0);
    Ok(DistributionFit { mu, sigma: var.sqrt(), n: logs.len() })
}

/// Joint histogram over a shared square range; `counts[t * bins + p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParityHistogram {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    pub counts: Vec<u64>,
}

impl ParityHistogram {
    pub fn edge(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / self.bins as f64
    }

    pub fn count(&self, target_bin: usize, pred_bin: usize) -> u64 {
        self.counts[target_bin * self.bins + pred_bin]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn parity_histogram(pred: &[f64], target: &[f64], bins: usize) -> Result<ParityHistogram, EvalError> {
    if bins < 2 {
        return Err(EvalError::TooFewBins);
    }
    if pred.len() != target.len() {
        return Err(EvalError::LengthMismatch(pred.len(), target.len()));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in pred.iter().chain(target) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    let bin = |v: f64| (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
    let mut counts = vec![0u64; bins * bins];
    for (&p, &y) in pred.iter().zip(target) {
        counts[bin(y) * bins + bin(p)] += 1;
    }
    Ok(ParityHistogram { lo, hi, bins, counts })
}

/// Pooled unstandardized `(pred, truth)` for `target` over `cases`.
pub fn pooled_pairs(
    predictor: &dyn Predictor,
    dataset: &Dataset,
    cases: &[usize],
    target: Target,
) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let targets = predictor.targets();
    let col = targets.iter().position(|&t| t == target).ok_or(EvalError::MissingTarget(target.name()))?;
    let (mut p, mut y) = (Vec::new(), Vec::new());
    for &case in cases {
        p.extend(column(&predictor.predict_case(dataset, case)?, targets.len(), col));
        y.extend(case_truth(dataset, case, target));
    }
    Ok((p, y))
}

pub fn write_case_table(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in &report.cases {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_category_summary(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["target", "category", "criterion", "count", "fraction"])?;
    for s in &report.summaries {
        for (i, c) in Category::ALL.iter().enumerate() {
            w.write_record([
                s.target.name(),
                c.name(),
                c.criterion(),
                &s.counts[i].to_string(),
                &s.fraction(*c).to_string(),
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_lognormal(fits: &[(Target, DistributionFit)], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["target", "mu", "sigma", "n"])?;
    for (t, f) in fits {
        w.write_record([t.name(), &f.mu.to_string(), &f.sigma.to_string(), &f.n.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_histogram(hist: &ParityHistogram, path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["target_lo", "target_hi", "pred_lo", "pred_hi", "count"])?;
    for t in 0..hist.bins {
        for p in 0..hist.bins {
            w.write_record([
                hist.edge(t).to_string(),
                hist.edge(t + 1).to_string(),
                hist.edge(p).to_string(),
                hist.edge(p + 1).to_string(),
                hist.count(t, p).to_string(),
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
