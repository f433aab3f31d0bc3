use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use hydronet::evaluation::{
    lognormal_fit, parity_histogram, per_case_report, pooled_pairs, write_case_table, write_category_summary,
    write_histogram, write_lognormal, Category,
};
use hydronet::gradcheck::check_architecture;
use hydronet::hpo::{apply_assignment, run_study};
use hydronet::loading::StormParams;
use hydronet::longterm::{run_longterm, write_fit_table, OutletPredictor, TimeSeriesRecord};
use hydronet::models::{ArchKind, ModelParams};
use hydronet::oracle::{generate_dataset, Dataset, Target};
use hydronet::sensitivity::{export_sensitivity, grad_wrt_loading, midplane_points, relative_map};
use hydronet::training::{split_cases, train, write_loss_history, TrainError};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{} does not exist", path.display())))
    }
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    require(&cfg.paths.dataset)?;
    Ok(Dataset::read_swds(&cfg.paths.dataset)?)
}

fn load_model(path: &Path) -> Result<ModelParams, CliError> {
    require(path)?;
    Ok(ModelParams::load(path)?)
}

pub fn generate(cfg: &RunConfig, out: Option<PathBuf>) -> Result<String, CliError> {
    let path = out.unwrap_or_else(|| cfg.paths.dataset.clone());
    let ds = generate_dataset(&cfg.oracle)?;
    ds.write_swds(&path)?;
    let d = ds.dims();
    Ok(format!(
        "generate cases={} classes={} times={} points={} sha256={} path={}",
        d.cases,
        d.classes,
        d.times,
        d.points,
        sha256_file(&path)?,
        path.display()
    ))
}

pub fn train_cmd(cfg: &RunConfig) -> Result<String, CliError> {
    let ds = load_dataset(cfg)?;
    let split = split_cases(ds.dims().cases, cfg.training.seed)?;
    let checkpoint = cfg.checkpoint_path();
    let loss_csv = cfg.out(&format!("loss_{}_{}.csv", cfg.architecture.kind.name(), cfg.training.target.name()));
    let outcome = match train(&ds, &split, &cfg.training, &cfg.architecture) {
        Ok(o) => o,
        Err(TrainError::Diverged { iteration, loss, last_good }) => {
            // keep what was learned before the blow-up for inspection
            last_good.model.save(&checkpoint)?;
            write_loss_history(&last_good.history, &loss_csv)?;
            return Err(CliError::Numeric(format!("training diverged at iteration {iteration} (loss {loss})")));
        }
        Err(e) => return Err(e.into()),
    };
    outcome.model.save(&checkpoint)?;
    write_loss_history(&outcome.history, &loss_csv)?;
    let last = outcome.history.last().map_or(f64::NAN, |r| r.train_mse);
    Ok(format!(
        "train arch={} target={} iterations={} params={} final_train_mse={:.6e} best_val_mse={:.6e} best_iteration={} checkpoint={}",
        cfg.architecture.kind.name(),
        cfg.training.target.name(),
        cfg.training.iterations,
        outcome.model.parameter_count(),
        last,
        outcome.best_val_mse,
        outcome.best_iteration,
        checkpoint.display()
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Validation,
    Test,
    All,
}

pub fn eval(cfg: &RunConfig, which: SplitChoice, bins: usize) -> Result<String, CliError> {
    let ds = load_dataset(cfg)?;
    let model = load_model(&cfg.checkpoint_path())?;
    let m = ds.dims().cases;
    let split = split_cases(m, cfg.training.seed)?;
    let cases = match which {
        SplitChoice::Train => split.train,
        SplitChoice::Validation => split.validation,
        SplitChoice::Test => split.test,
        SplitChoice::All => (0..m).collect(),
    };
    let report = per_case_report(&model, &ds, &cases)?;
    write_case_table(&report, &cfg.out("eval_cases.csv"))?;
    write_category_summary(&report, &cfg.out("eval_categories.csv"))?;
    let mut fits = Vec::new();
    let mut parts = vec![format!("eval cases={}", cases.len())];
    for target in model.targets() {
        let mse: Vec<f64> = report.case_mse(target).into_iter().filter(|&v| v > 0.0).collect();
        match lognormal_fit(&mse) {
            Ok(f) => {
                parts.push(format!("{}_mu={:.4} {}_sigma={:.4}", target.name(), f.mu, target.name(), f.sigma));
                fits.push((target, f));
            }
            Err(e) => log::warn!("{}: no log-normal fit ({e})", target.name()),
        }
        let (p, y) = pooled_pairs(&model, &ds, &cases, target)?;
        let hist = parity_histogram(&p, &y, bins)?;
        write_histogram(&hist, &cfg.out(&format!("eval_parity_{}.csv", target.name())))?;
        if let Some(s) = report.summary(target) {
            for c in Category::ALL {
                parts.push(format!("{}_{}={:.4}", target.name(), c.name(), s.fraction(c)));
            }
            parts.push(format!("{}_undefined={}", target.name(), s.undefined));
        }
        parts.push(format!("{}_pooled_r2={:.6}", target.name(), report.pooled(target).unwrap_or(f64::NAN)));
    }
    write_lognormal(&fits, &cfg.out("eval_lognormal.csv"))?;
    Ok(parts.join(" "))
}

pub fn hpo(cfg: &RunConfig) -> Result<String, CliError> {
    let ds = load_dataset(cfg)?;
    let split = split_cases(ds.dims().cases, cfg.training.seed)?;
    let h = &cfg.hpo;
    let objective = |values: &[f64]| -> Result<f64, String> {
        let mut train_cfg = cfg.training;
        let mut arch = cfg.architecture.clone();
        train_cfg.iterations = h.iterations;
        apply_assignment(&h.space, values, &mut train_cfg, &mut arch).map_err(|e| e.to_string())?;
        train(&ds, &split, &train_cfg, &arch).map(|o| o.best_val_mse).map_err(|e| e.to_string())
    };
    let study = run_study(objective, &h.space, h.trials, &h.tpe, h.seed)?;
    let path = cfg.out("hpo_trials.csv");
    study.write_csv(&path)?;
    let failed = study.trials.iter().filter(|t| t.objective.is_none()).count();
    let best = study.best().ok_or_else(|| CliError::Numeric("every trial failed".into()))?;
    let assignment: Vec<String> =
        h.space.names().iter().zip(&best.values).map(|(n, v)| format!("best_{n}={v:.6}")).collect();
    Ok(format!(
        "hpo trials={} failed={} best_trial={} best_objective={:.6e} {}",
        study.trials.len(),
        failed,
        best.id,
        best.objective.unwrap_or(f64::NAN),
        assignment.join(" ")
    ))
}

pub struct SensArgs {
    pub settling_velocity: f64,
    pub times: Vec<f64>,
    pub nx: usize,
    pub nz: usize,
    pub params: Option<[f64; 5]>,
}

pub fn sens(cfg: &RunConfig, args: &SensArgs) -> Result<String, CliError> {
    let model = load_model(&cfg.checkpoint_path())?;
    let params = args.params.map(StormParams::from_array).unwrap_or_else(StormParams::sensitivity_baseline);
    let points = midplane_points(&cfg.oracle.geometry, args.nx, args.nz);
    let field = grad_wrt_loading(&model, &params, args.settling_velocity, &args.times, &points)?;
    let field = relative_map(&field)?;
    let path = cfg.out("sensitivity.csv");
    export_sensitivity(&field, &path)?;
    let mean_abs: Vec<String> = ["lambda", "k", "theta", "c0", "kd"]
        .iter()
        .enumerate()
        .map(|(j, n)| format!("mean_abs_dc_d{n}={:.4e}", field.grads.iter().map(|g| g[j].abs()).sum::<f64>() / field.len() as f64))
        .collect();
    Ok(format!("sens points={} times={} {} path={}", points.len(), args.times.len(), mean_abs.join(" "), path.display()))
}

pub fn longterm(cfg: &RunConfig, use_oracle: bool) -> Result<String, CliError> {
    let record_path =
        cfg.paths.record.clone().ok_or_else(|| CliError::Config("paths.record is required for longterm".into()))?;
    require(&record_path)?;
    let record = TimeSeriesRecord::read_csv(&record_path)?;
    let oracle = cfg.oracle.oracle();
    let model;
    let predictor: &dyn OutletPredictor = if use_oracle {
        &oracle
    } else {
        model = load_model(&cfg.checkpoint_path())?;
        if !model.targets().contains(&Target::Concentration) {
            return Err(CliError::Config("longterm needs a concentration model".into()));
        }
        &model
    };
    let result = run_longterm(&record, &cfg.longterm, predictor, &cfg.oracle.geometry)?;
    write_fit_table(&result.events, &record, &cfg.out("longterm_fits.csv"))?;
    result.effluent.write_csv(&cfg.out("effluent.csv"))?;
    let unconverged = result.events.iter().filter(|e| !e.fit.converged).count();
    Ok(format!(
        "longterm events={} unconverged={} inlet_load_kg={:.6e} outlet_load_kg={:.6e} removal={:.6}",
        result.events.len(),
        unconverged,
        result.effluent.inlet_load,
        result.effluent.outlet_load,
        result.effluent.removal_ratio().unwrap_or(f64::NAN)
    ))
}

pub fn gradcheck(draws: usize, seed: u64) -> Result<String, CliError> {
    let mut parts = vec![format!("gradcheck draws={draws}")];
    let mut worst = 0.0_f64;
    for kind in ArchKind::ALL {
        let r = check_architecture(kind, draws, seed)?;
        worst = worst.max(r.worst());
        parts.push(format!("{}={:.3e}", kind.name(), r.worst()));
    }
    let pass = worst < GRADCHECK_TOLERANCE;
    parts.push(format!("pass={pass}"));
    let line = parts.join(" ");
    if pass {
        Ok(line)
    } else {
        Err(CliError::Numeric(line))
    }
}
