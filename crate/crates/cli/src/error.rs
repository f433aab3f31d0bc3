use hydronet::evaluation::EvalError;
use hydronet::hpo::HpoError;
use hydronet::longterm::LongtermError;
use hydronet::models::ModelError;
use hydronet::oracle::OracleError;
use hydronet::sensitivity::SensitivityError;
use hydronet::tensor::TensorError;
use hydronet::training::TrainError;
use thiserror::Error;

/// Failure classes with stable process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        let msg = e.to_string();
        match e {
            OracleError::Io(_) | OracleError::BadMagic | OracleError::Corrupt(_) => CliError::Io(msg),
            _ => CliError::Config(msg),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let msg = e.to_string();
        match e {
            ModelError::Io(_) | ModelError::BadMagic | ModelError::BadVersion(_) | ModelError::Corrupt(_) => {
                CliError::Io(msg)
            }
            ModelError::Tensor(t) => t.into(),
            _ => CliError::Config(msg),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let msg = e.to_string();
        match e {
            TrainError::NonFiniteGradient { .. } | TrainError::Diverged { .. } => CliError::Numeric(msg),
            TrainError::Model(m) => m.into(),
            TrainError::Tensor(t) => t.into(),
            TrainError::Csv(c) => c.into(),
            _ => CliError::Config(msg),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let msg = e.to_string();
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Oracle(o) => o.into(),
            EvalError::Csv(c) => c.into(),
            EvalError::NonPositive(_) | EvalError::ConstantTarget => CliError::Numeric(msg),
            _ => CliError::Config(msg),
        }
    }
}

impl From<SensitivityError> for CliError {
    fn from(e: SensitivityError) -> Self {
        let msg = e.to_string();
        match e {
            SensitivityError::Model(m) => m.into(),
            SensitivityError::Tensor(t) => t.into(),
            SensitivityError::Csv(c) => c.into(),
            _ => CliError::Config(msg),
        }
    }
}

impl From<HpoError> for CliError {
    fn from(e: HpoError) -> Self {
        match e {
            HpoError::Csv(c) => c.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<LongtermError> for CliError {
    fn from(e: LongtermError) -> Self {
        let msg = e.to_string();
        match e {
            LongtermError::Oracle(o) => o.into(),
            LongtermError::Model(m) => m.into(),
            LongtermError::Csv(c) => c.into(),
            LongtermError::Record(_) => CliError::Io(msg),
            LongtermError::Thresholds => CliError::Config(msg),
            LongtermError::Segment { .. } | LongtermError::Overlap(_) => CliError::Numeric(msg),
        }
    }
}
