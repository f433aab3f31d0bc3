//! Standardization, case splits, four-axis mini-batches, Adam and the
//! early-stopping training loop.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{build, ArchitectureConfig, ModelError, ModelParams, OutputMode, SplitInputs};
use crate::oracle::{Dataset, Target};
use crate::seed::derive_seed;
use crate::tensor::{Tape, Tensor5, TensorError};

pub const STD_FLOOR: f64 = 1e-12;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Upper bound on rows per inference chunk.
const CHUNK_ROWS: usize = 16_384;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("need at least 10 cases to split, got {0}")]
    TooFewCases(usize),
    #[error("empty training split")]
    EmptySplit,
    #[error("batch of {batch} exceeds the {axis} axis extent {extent}")]
    BatchTooLarge { axis: &'static str, batch: usize, extent: usize },
    #[error("non-finite gradient in parameter block {block} at iteration {iteration}")]
    NonFiniteGradient { block: usize, iteration: usize },
    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64, last_good: Box<TrainOutcome> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Mean and standard deviation per feature column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Population statistics of row-major `rows` with `width` columns.
    pub fn fit(name: &str, data: &[f64], width: usize) -> Self {
        let n = (data.len() / width).max(1) as f64;
        let mut mean = vec![0.0; width];
        for row in data.chunks_exact(width) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; width];
        for row in data.chunks_exact(width) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let sd = (s / n).sqrt();
                if sd < STD_FLOOR {
                    log::warn!("feature {name}[{j}] is constant on the training split; std floored to {STD_FLOOR:e}");
                    STD_FLOOR
                } else {
                    sd
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn forward(&self, j: usize, x: f64) -> f64 {
        (x - self.mean[j]) / self.std[j]
    }

    pub fn inverse(&self, j: usize, z: f64) -> f64 {
        z * self.std[j] + self.mean[j]
    }

    pub fn is_degenerate(&self) -> bool {
        self.std.iter().any(|&s| s <= STD_FLOOR)
    }
}

/// Training-split statistics for every input group and both targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub loading: FeatureStats,
    /// Statistics of `log10(w_s)`.
    pub class: FeatureStats,
    pub time: FeatureStats,
    pub coords: FeatureStats,
    /// Indexed by [`Target::index`].
    pub targets: FeatureStats,
}

impl StandardizationStats {
    pub fn loading(&self, raw: [f64; 5]) -> [f64; 5] {
        std::array::from_fn(|j| self.loading.forward(j, raw[j]))
    }

    pub fn class(&self, w_s: f64) -> f64 {
        self.class.forward(0, w_s.log10())
    }

    pub fn time(&self, t: f64) -> f64 {
        self.time.forward(0, t)
    }

    pub fn coord(&self, xyz: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|j| self.coords.forward(j, xyz[j]))
    }

    pub fn target(&self, target: Target, raw: f64) -> f64 {
        self.targets.forward(target.index(), raw)
    }

    pub fn untarget(&self, target: Target, z: f64) -> f64 {
        self.targets.inverse(target.index(), z)
    }

    /// Names of input groups whose statistics hit the std floor.
    pub fn degenerate_features(&self) -> Vec<&'static str> {
        [
            ("loading", &self.loading),
            ("class", &self.class),
            ("time", &self.time),
            ("coords", &self.coords),
            ("targets", &self.targets),
        ]
        .into_iter()
        .filter(|(_, s)| s.is_degenerate())
        .map(|(n, _)| n)
        .collect()
    }
}

/// Fits statistics on the training cases only.
pub fn standardize_fit(dataset: &Dataset, split: &SplitSpec) -> Result<StandardizationStats, TrainError> {
    if split.train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let d = dataset.dims();
    let loading: Vec<f64> = split.train.iter().flat_map(|&c| dataset.params[c].to_array()).collect();
    let classes: Vec<f64> = dataset.classes.iter().map(|w| w.log10()).collect();
    let coords: Vec<f64> = split
        .train
        .iter()
        .flat_map(|&c| (0..d.points).flat_map(move |s| dataset.coord(c, s)))
        .collect();
    let mut targets = Vec::with_capacity(split.train.len() * d.classes * d.times * d.points * 2);
    for &c in &split.train {
        let start = dataset.solution_index(c, 0, 0, 0);
        let end = start + d.classes * d.times * d.points * 2;
        targets.extend(dataset.solutions[start..end].iter().map(|&v| v as f64));
    }
    Ok(StandardizationStats {
        loading: FeatureStats::fit("loading", &loading, 5),
        class: FeatureStats::fit("log10_w_s", &classes, 1),
        time: FeatureStats::fit("time", &dataset.times, 1),
        coords: FeatureStats::fit("coords", &coords, 3),
        targets: FeatureStats::fit("targets", &targets, 2),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled split with `floor(M/10)` cases each for validation and test.
pub fn split_cases(m: usize, seed: u64) -> Result<SplitSpec, TrainError> {
    if m < 10 {
        return Err(TrainError::TooFewCases(m));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tenth = m / 10;
    let test = order.split_off(m - tenth);
    let validation = order.split_off(m - 2 * tenth);
    Ok(SplitSpec { train: order, validation, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_cases: usize,
    pub batch_classes: usize,
    pub batch_times: usize,
    pub batch_points: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_interval: usize,
    pub iterations: usize,
    pub val_interval: usize,
    pub seed: u64,
    /// Trained target in separate-per-output mode.
    pub target: Target,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Optimum batch sizes and schedule from the full-scale study.
    pub fn full_scale() -> Self {
        Self {
            batch_cases: 226,
            batch_classes: 9,
            batch_times: 227,
            batch_points: 195,
            lr: 0.002,
            decay: 0.984,
            decay_interval: 100,
            iterations: 25_000,
            val_interval: 250,
            seed: 0,
            target: Target::Concentration,
        }
    }

    /// Small batches for the 48-case desk dataset; 8000 iterations fit in a
    /// few single-core minutes.
    pub fn desk() -> Self {
        Self {
            batch_cases: 4,
            batch_classes: 3,
            batch_times: 8,
            batch_points: 16,
            iterations: 8_000,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if [self.batch_cases, self.batch_classes, self.batch_times, self.batch_points].contains(&0) {
            return bad("batch sizes must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must lie in (0, 1]");
        }
        if self.decay_interval == 0 || self.val_interval == 0 {
            return bad("decay_interval and val_interval must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        Ok(())
    }

    fn check_extents(&self, dataset: &Dataset, split: &SplitSpec) -> Result<(), TrainError> {
        let d = dataset.dims();
        for (axis, batch, extent) in [
            ("case", self.batch_cases, split.train.len()),
            ("class", self.batch_classes, d.classes),
            ("time", self.batch_times, d.times),
            ("point", self.batch_points, d.points),
        ] {
            if batch > extent {
                return Err(TrainError::BatchTooLarge { axis, batch, extent });
            }
        }
        Ok(())
    }
}

/// Index sets of one mini-batch; cases are dataset case ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub cases: Vec<usize>,
    pub classes: Vec<usize>,
    pub times: Vec<usize>,
    pub points: Vec<usize>,
}

/// Uniform draws without replacement along each axis.
pub fn sample_minibatch(
    dataset: &Dataset,
    split: &SplitSpec,
    cfg: &TrainConfig,
    iteration_seed: u64,
) -> Result<BatchIndices, TrainError> {
    cfg.check_extents(dataset, split)?;
    let d = dataset.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed);
    let mut draw = |n: usize, k: usize| index::sample(&mut rng, n, k).into_vec();
    Ok(BatchIndices {
        cases: draw(split.train.len(), cfg.batch_cases).into_iter().map(|i| split.train[i]).collect(),
        classes: draw(d.classes, cfg.batch_classes),
        times: draw(d.times, cfg.batch_times),
        points: draw(d.points, cfg.batch_points),
    })
}

/// Standardized inputs for the given index sets.
pub fn gather_inputs(dataset: &Dataset, stats: &StandardizationStats, b: &BatchIndices) -> SplitInputs {
    let (nl, nc, nt, ns) = (b.cases.len(), b.classes.len(), b.times.len(), b.points.len());
    let p = b.cases.iter().flat_map(|&c| stats.loading(dataset.params[c].to_array())).collect();
    let cl = b.classes.iter().map(|&k| stats.class(dataset.classes[k])).collect();
    let t = b.times.iter().map(|&j| stats.time(dataset.times[j])).collect();
    let q = b
        .cases
        .iter()
        .flat_map(|&c| b.points.iter().flat_map(move |&s| stats.coord(dataset.coord(c, s))))
        .collect();
    SplitInputs {
        p: Tensor5::from_dims([nl, 1, 1, 1, 5], p).expect("p shape"),
        cl: Tensor5::from_dims([1, nc, 1, 1, 1], cl).expect("cl shape"),
        t: Tensor5::from_dims([1, 1, nt, 1, 1], t).expect("T shape"),
        q: Tensor5::from_dims([nl, 1, 1, ns, 3], q).expect("q shape"),
    }
}

/// Standardized targets shaped `(N_L, N_c, N_t, N_s, targets.len())`.
pub fn gather_targets(
    dataset: &Dataset,
    stats: &StandardizationStats,
    b: &BatchIndices,
    targets: &[Target],
) -> Tensor5 {
    let mut out = Vec::with_capacity(b.cases.len() * b.classes.len() * b.times.len() * b.points.len() * targets.len());
    for &c in &b.cases {
        for &k in &b.classes {
            for &j in &b.times {
                for &s in &b.points {
                    for &tg in targets {
                        out.push(stats.target(tg, dataset.solution(c, k, j, s, tg)));
                    }
                }
            }
        }
    }
    Tensor5::from_dims([b.cases.len(), b.classes.len(), b.times.len(), b.points.len(), targets.len()], out)
        .expect("target shape")
}

/// Bias-corrected Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(blocks: &[usize]) -> Self {
        Self {
            m: blocks.iter().map(|&n| vec![0.0; n]).collect(),
            v: blocks.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// Returns the index of a block with a non-finite gradient, if any; parameters
/// are untouched in that case.
pub fn adam_step(
    params: &mut [&mut Vec<f64>],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), usize> {
    if let Some(block) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(block);
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

pub fn lr_schedule(lr0: f64, gamma: f64, interval: usize, iteration: usize) -> f64 {
    lr0 * gamma.powi((iteration / interval.max(1)) as i32)
}

/// Mean squared error; with `stats` given, both operands are de-standardized
/// first (the last axis indexes `targets`).
pub fn mse_loss(
    pred: &Tensor5,
    target: &Tensor5,
    unstandardize: Option<(&StandardizationStats, &[Target])>,
) -> Result<f64, TrainError> {
    if pred.shape() != target.shape() {
        let (a, b) = (pred.shape().dims(), target.shape().dims());
        let axis = (0..5).find(|&i| a[i] != b[i]).unwrap_or(4);
        return Err(TensorError::ShapeMismatch { axis: AXIS_NAMES[axis], left: a[axis], right: b[axis] }.into());
    }
    let width = pred.shape().features();
    let sum: f64 = pred
        .values()
        .iter()
        .zip(target.values())
        .enumerate()
        .map(|(i, (&y, &t))| {
            let (y, t) = match unstandardize {
                Some((s, tg)) => {
                    let tg = tg[i % width];
                    (s.untarget(tg, y), s.untarget(tg, t))
                }
                None => (y, t),
            };
            (y - t) * (y - t)
        })
        .sum();
    Ok(sum / pred.values().len() as f64)
}

const AXIS_NAMES: [&str; 5] = ["case", "class", "time", "point", "feature"];

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen.
    pub model: ModelParams,
    pub history: Vec<LossRecord>,
    pub best_val_mse: f64,
    pub best_iteration: usize,
}

impl TrainOutcome {
    pub fn val_series(&self) -> Vec<(usize, f64)> {
        self.history.iter().filter_map(|r| r.val_mse.map(|v| (r.iteration, v))).collect()
    }
}

pub fn write_loss_history(history: &[LossRecord], path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Targets a model predicts, in output-column order.
pub fn model_targets(arch: &ArchitectureConfig, cfg: &TrainConfig) -> Vec<Target> {
    match arch.output_mode {
        OutputMode::Joint => Target::ALL.to_vec(),
        OutputMode::Separate => vec![cfg.target],
    }
}

/// Time-chunked slabs covering one case: `(case, class, times)` with enough
/// times per chunk to stay below [`CHUNK_ROWS`].
fn case_chunks(dataset: &Dataset, case: usize) -> Vec<BatchIndices> {
    let d = dataset.dims();
    let per_time = d.points.max(1);
    let step = (CHUNK_ROWS / per_time).clamp(1, d.times);
    let mut out = Vec::new();
    for k in 0..d.classes {
        for t0 in (0..d.times).step_by(step) {
            out.push(BatchIndices {
                cases: vec![case],
                classes: vec![k],
                times: (t0..(t0 + step).min(d.times)).collect(),
                points: (0..d.points).collect(),
            });
        }
    }
    out
}

/// Standardized predictions for one case laid out `[class][time][point][output]`.
pub fn predict_case(model: &ModelParams, dataset: &Dataset, case: usize) -> Result<Vec<f64>, TrainError> {
    let stats = model.stats()?;
    let d = dataset.dims();
    let outputs = model.config.outputs();
    let mut out = vec![0.0; d.classes * d.times * d.points * outputs];
    for chunk in case_chunks(dataset, case) {
        let pred = model.predict(&gather_inputs(dataset, stats, &chunk))?;
        let k = chunk.classes[0];
        let start = ((k * d.times + chunk.times[0]) * d.points) * outputs;
        out[start..start + pred.values().len()].copy_from_slice(pred.values());
    }
    Ok(out)
}

/// Standardized MSE over every class, time and point of `cases`, summed in
/// a fixed order.
pub fn evaluate_mse(model: &ModelParams, dataset: &Dataset, cases: &[usize], targets: &[Target]) -> Result<f64, TrainError> {
    let stats = model.stats()?;
    let chunks: Vec<BatchIndices> = cases.iter().flat_map(|&c| case_chunks(dataset, c)).collect();
    let partial: Vec<(f64, usize)> = chunks
        .par_iter()
        .map(|chunk| -> Result<(f64, usize), TrainError> {
            let pred = model.predict(&gather_inputs(dataset, stats, chunk))?;
            let truth = gather_targets(dataset, stats, chunk, targets);
            let sse: f64 = pred.values().iter().zip(truth.values()).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok((sse, pred.values().len()))
        })
        .collect::<Result<_, _>>()?;
    let (sse, n) = partial.iter().fold((0.0, 0usize), |(s, n), &(a, b)| (s + a, n + b));
    Ok(sse / n.max(1) as f64)
}

/// One forward/backward pass on a batch; returns the standardized loss and
/// gradients ordered like [`ModelParams::params`].
pub fn loss_and_grads(
    model: &ModelParams,
    inputs: &SplitInputs,
    target: &Tensor5,
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let vars = inputs.record(&mut tape);
    let pred = model.forward(&mut tape, &bound, &vars)?;
    let truth = tape.leaf(target.clone());
    let diff = tape.sub(pred, truth)?;
    let sq = tape.square(diff);
    let loss = tape.mean(sq);
    let value = tape.value(loss).values()[0];
    let mut grads = tape.backward(loss)?;
    Ok((value, bound.collect(&mut grads)))
}

/// Trains `arch` on the training split, validating every `val_interval`
/// iterations (and at the end) and keeping the best parameters.
pub fn train(
    dataset: &Dataset,
    split: &SplitSpec,
    cfg: &TrainConfig,
    arch: &ArchitectureConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    cfg.check_extents(dataset, split)?;
    if split.validation.is_empty() {
        return Err(TrainError::Config("validation split is empty".into()));
    }
    let stats = standardize_fit(dataset, split)?;
    let targets = model_targets(arch, cfg);
    let mut model = build(arch, derive_seed(cfg.seed, 1))?;
    model.stats = Some(stats.clone());
    model.meta.targets = targets.clone();
    model.meta.seed = cfg.seed;

    let blocks: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut adam = AdamState::new(&blocks);
    let batch_root = derive_seed(cfg.seed, 2);
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for it in 1..=cfg.iterations {
        let batch = sample_minibatch(dataset, split, cfg, derive_seed(batch_root, it as u64))?;
        let inputs = gather_inputs(dataset, &stats, &batch);
        let truth = gather_targets(dataset, &stats, &batch, &targets);
        let (loss, grads) = loss_and_grads(&model, &inputs, &truth)?;
        if !loss.is_finite() {
            return Err(diverged(it, loss, best, model, history));
        }
        let lr = lr_schedule(cfg.lr, cfg.decay, cfg.decay_interval, it - 1);
        if let Err(block) = adam_step(&mut model.params_mut(), &grads, &mut adam, lr) {
            log::error!("non-finite gradient in block {block} at iteration {it}");
            return Err(diverged(it, f64::NAN, best, model, history));
        }
        let mut record = LossRecord { iteration: it, train_mse: loss, val_mse: None };
        if it % cfg.val_interval == 0 || it == cfg.iterations {
            let val = evaluate_mse(&model, dataset, &split.validation, &targets)?;
            if !val.is_finite() {
                return Err(diverged(it, val, best, model, history));
            }
            log::info!("iteration {it}: train {loss:.4e} val {val:.4e}");
            record.val_mse = Some(val);
            if best.as_ref().is_none_or(|(b, _, _)| val < *b) {
                best = Some((val, it, model.clone()));
            }
        }
        history.push(record);
    }
    let (best_val_mse, best_iteration, mut model) = best.expect("final iteration validates");
    model.meta.iterations = cfg.iterations;
    model.meta.best_iteration = best_iteration;
    model.meta.best_val_mse = Some(best_val_mse);
    Ok(TrainOutcome { model, history, best_val_mse, best_iteration })
}

fn diverged(
    iteration: usize,
    loss: f64,
    best: Option<(f64, usize, ModelParams)>,
    current: ModelParams,
    history: Vec<LossRecord>,
) -> TrainError {
    let (best_val_mse, best_iteration, model) = best.unwrap_or((f64::INFINITY, 0, current));
    TrainError::Diverged {
        iteration,
        loss,
        last_good: Box::new(TrainOutcome { model, history, best_val_mse, best_iteration }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{generate_dataset, OracleConfig};
    use crate::tensor::Shape5;
    use rand::Rng;

    fn tiny_dataset() -> Dataset {
        let cfg = OracleConfig { cases: 12, classes: 2, times: 6, points: 20, ..OracleConfig::desk() };
        generate_dataset(&cfg).unwrap()
    }

    #[test]
    fn split_counts() {
        let s = split_cases(640, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (512, 64, 64));
        let s = split_cases(48, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (40, 4, 4));
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..48).collect::<Vec<_>>());
        assert_eq!(s, split_cases(48, 1).unwrap());
        assert_ne!(s, split_cases(48, 2).unwrap());
        assert!(matches!(split_cases(9, 0), Err(TrainError::TooFewCases(9))));
    }

    #[test]
    fn standardized_training_features_are_unit() {
        let ds = tiny_dataset();
        let split = split_cases(12, 3).unwrap();
        let stats = standardize_fit(&ds, &split).unwrap();
        let d = ds.dims();
        let b = BatchIndices {
            cases: split.train.clone(),
            classes: (0..d.classes).collect(),
            times: (0..d.times).collect(),
            points: (0..d.points).collect(),
        };
        let x = gather_inputs(&ds, &stats, &b);
        for (t, w) in [(&x.p, 5), (&x.cl, 1), (&x.t, 1), (&x.q, 3)] {
            let fs = FeatureStats::fit("check", t.values(), w);
            for j in 0..w {
                assert!(fs.mean[j].abs() < 1e-10, "mean {}", fs.mean[j]);
                assert!((fs.std[j] - 1.0).abs() < 1e-10, "std {}", fs.std[j]);
            }
        }
        let y = gather_targets(&ds, &stats, &b, &Target::ALL);
        let fs = FeatureStats::fit("y", y.values(), 2);
        assert!(fs.mean.iter().all(|m| m.abs() < 1e-8));
        assert!(fs.std.iter().all(|s| (s - 1.0).abs() < 1e-8));
    }

    #[test]
    fn two_case_hand_stats() {
        let fs = FeatureStats::fit("x", &[1.0, 10.0, 3.0, 30.0], 2);
        assert_eq!(fs.mean, vec![2.0, 20.0]);
        assert_eq!(fs.std, vec![1.0, 10.0]);
        let constant = FeatureStats::fit("c", &[4.0, 4.0, 4.0], 1);
        assert_eq!(constant.std, vec![STD_FLOOR]);
        assert!(constant.is_degenerate());
        assert_eq!(constant.forward(0, 4.0), 0.0);
    }

    #[test]
    fn minibatch_indices_unique_and_bounded() {
        let ds = tiny_dataset();
        let split = split_cases(12, 0).unwrap();
        let cfg = TrainConfig { batch_cases: 5, batch_classes: 2, batch_times: 4, batch_points: 7, ..TrainConfig::desk() };
        for seed in 0..50 {
            let b = sample_minibatch(&ds, &split, &cfg, seed).unwrap();
            for (v, n) in [(&b.classes, 2), (&b.times, 6), (&b.points, 20)] {
                let mut u = v.clone();
                u.sort_unstable();
                u.dedup();
                assert_eq!(u.len(), v.len());
                assert!(v.iter().all(|&i| i < n));
            }
            assert!(b.cases.iter().all(|c| split.train.contains(c)));
        }
        let too_big = TrainConfig { batch_points: 21, ..cfg };
        assert!(matches!(
            sample_minibatch(&ds, &split, &too_big, 0),
            Err(TrainError::BatchTooLarge { axis: "point", .. })
        ));
    }

    #[test]
    fn full_batch_returns_everything() {
        let ds = tiny_dataset();
        let split = split_cases(12, 0).unwrap();
        let cfg = TrainConfig { batch_cases: 10, batch_classes: 2, batch_times: 6, batch_points: 20, ..TrainConfig::desk() };
        let mut b = sample_minibatch(&ds, &split, &cfg, 9).unwrap();
        b.cases.sort_unstable();
        let mut train = split.train.clone();
        train.sort_unstable();
        assert_eq!(b.cases, train);
        b.points.sort_unstable();
        assert_eq!(b.points, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn minibatch_coverage_is_uniform() {
        // chi-square on point-axis inclusion counts; 1% critical value for 19 dof is 36.19
        let ds = tiny_dataset();
        let split = split_cases(12, 0).unwrap();
        let cfg = TrainConfig { batch_cases: 3, batch_classes: 1, batch_times: 2, batch_points: 5, ..TrainConfig::desk() };
        let mut counts = [0f64; 20];
        for it in 0..1000 {
            for p in sample_minibatch(&ds, &split, &cfg, derive_seed(77, it)).unwrap().points {
                counts[p] += 1.0;
            }
        }
        let expected = 1000.0 * 5.0 / 20.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        assert!(chi2 < 36.19, "chi2 {chi2}");
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut state = AdamState::new(&[3]);
        adam_step(&mut [&mut p], &[vec![3.0, -0.2, 1e-3]], &mut state, 0.01).unwrap();
        for (after, (before, g)) in p.iter().zip([(1.0, 3.0), (-2.0, -0.2), (0.5, 1e-3)]) {
            let delta: f64 = after - before;
            assert!(delta.abs() >= 0.99 * 0.01 && delta.abs() <= 0.01, "{delta}");
            assert_eq!(delta.signum(), -f64::signum(g));
        }
        let mut q = vec![0.3, 0.4];
        let mut state = AdamState::new(&[2]);
        adam_step(&mut [&mut q], &[vec![0.0, 0.0]], &mut state, 0.1).unwrap();
        assert_eq!(q, vec![0.3, 0.4]);
        assert_eq!(adam_step(&mut [&mut q], &[vec![f64::NAN, 0.0]], &mut state, 0.1), Err(0));
    }

    #[test]
    fn adam_quadratic_bowl() {
        let centre = [1.5, -0.7, 0.2];
        let mut p = vec![0.0; 3];
        let mut state = AdamState::new(&[3]);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().zip(centre).map(|(x, c)| 2.0 * (x - c)).collect();
            adam_step(&mut [&mut p], &[g], &mut state, 0.01).unwrap();
        }
        for (x, c) in p.iter().zip(centre) {
            assert!((x - c).abs() < 1e-4, "{x} vs {c}");
        }
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_schedule(0.002, 1.0, 100, 12_345), 0.002);
        assert_eq!(lr_schedule(0.002, 0.5, 100, 99), 0.002);
        let lr = lr_schedule(1.0, 0.984, 100, 1000);
        assert!((lr - 0.984f64.powi(10)).abs() < 1e-15);
        assert!((lr - 0.85104).abs() < 1e-5);
    }

    #[test]
    fn mse_cases() {
        let s = Shape5::new([2, 1, 3, 1, 1]).unwrap();
        let a = Tensor5::from_fn(s, |i| i[2] as f64);
        assert_eq!(mse_loss(&a, &a, None).unwrap(), 0.0);
        let b = Tensor5::from_fn(s, |i| i[2] as f64 + 2.0);
        assert_eq!(mse_loss(&a, &b, None).unwrap(), 4.0);
        let other = Tensor5::zeros(Shape5::new([2, 1, 2, 1, 1]).unwrap());
        assert!(mse_loss(&a, &other, None).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let big = Shape5::new([3, 2, 4, 5, 2]).unwrap();
        let x = Tensor5::from_fn(big, |_| rng.gen_range(-3.0..3.0));
        let y = Tensor5::from_fn(big, |_| rng.gen_range(-3.0..3.0));
        let diffs: Vec<f64> = x.values().iter().zip(y.values()).map(|(a, b)| a - b).collect();
        let two_pass = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        assert!((mse_loss(&x, &y, None).unwrap() - two_pass).abs() < 1e-12);

        // unstandardized: errors scale by the target std
        let ds = tiny_dataset();
        let stats = standardize_fit(&ds, &split_cases(12, 0).unwrap()).unwrap();
        let unstd = mse_loss(&x, &y, Some((&stats, &Target::ALL))).unwrap();
        let manual: f64 = diffs
            .iter()
            .enumerate()
            .map(|(i, d)| (d * stats.targets.std[i % 2]).powi(2))
            .sum::<f64>()
            / diffs.len() as f64;
        assert!((unstd - manual).abs() <= 1e-12 * manual.max(1.0));
    }

    #[test]
    fn short_run_is_deterministic_and_early_stopped() {
        let ds = tiny_dataset();
        let split = split_cases(12, 0).unwrap();
        let arch = ArchitectureConfig::cpnn(1, 1, 8);
        let cfg = TrainConfig {
            batch_cases: 4,
            batch_classes: 2,
            batch_times: 3,
            batch_points: 8,
            iterations: 60,
            val_interval: 10,
            lr: 5e-3,
            ..TrainConfig::desk()
        };
        let a = train(&ds, &split, &cfg, &arch).unwrap();
        let b = train(&ds, &split, &cfg, &arch).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.len(), 60);
        assert!(a.history[0].train_mse.is_finite());
        let vals = a.val_series();
        assert_eq!(vals.len(), 6);
        let min = vals.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_val_mse, min);
        assert!(a.best_val_mse <= vals.last().unwrap().1);
        let check = evaluate_mse(&a.model, &ds, &split.validation, &[cfg.target]).unwrap();
        assert!((check - a.best_val_mse).abs() < 1e-12);
    }

    #[test]
    fn loss_history_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let h = [
            LossRecord { iteration: 1, train_mse: 0.5, val_mse: None },
            LossRecord { iteration: 2, train_mse: 0.25, val_mse: Some(0.125) },
        ];
        write_loss_history(&h, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "iteration,train_mse,val_mse\n1,0.5,\n2,0.25,0.125\n");
    }
}
