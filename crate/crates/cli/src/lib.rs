//! Experiment driver library: configuration, command implementations, and
//! the error taxonomy behind the CLI exit codes.

pub mod commands;
pub mod config;

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// Bad or inconsistent configuration (exit code 2).
    Config(String),
    /// Missing, corrupt, or mismatched data files (exit code 3).
    Data(String),
    /// Non-finite values during training or evaluation (exit code 4).
    Numeric(String),
    /// Everything else, typically IO (exit code 1).
    Io(std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io(_) => 1,
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(s) => write!(f, "config error: {s}"),
            Self::Data(s) => write!(f, "data error: {s}"),
            Self::Numeric(s) => write!(f, "numeric error: {s}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl From<csi_pretrain::model::ModelError> for CliError {
    fn from(e: csi_pretrain::model::ModelError) -> Self {
        use csi_pretrain::model::ModelError as M;
        match e {
            M::NonFiniteLoss { .. }
            | M::NonFiniteGrad { .. }
            | M::NonFiniteParam { .. }
            | M::NonFiniteInput(_) => Self::Numeric(e.to_string()),
            M::Io(io) => Self::Io(io),
            M::Checkpoint(_) => Self::Data(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<csi_pretrain::scheduler::SchedulerError> for CliError {
    fn from(e: csi_pretrain::scheduler::SchedulerError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<csi_pretrain::masking::MaskingError> for CliError {
    fn from(e: csi_pretrain::masking::MaskingError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<csi_pretrain::tensor::TensorError> for CliError {
    fn from(e: csi_pretrain::tensor::TensorError) -> Self {
        match e {
            csi_pretrain::tensor::TensorError::Io(io) => Self::Io(io),
            csi_pretrain::tensor::TensorError::Format(_) => Self::Data(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<csi_pretrain::datagen::DatagenError> for CliError {
    fn from(e: csi_pretrain::datagen::DatagenError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<csi_pretrain::metrics::MetricsError> for CliError {
    fn from(e: csi_pretrain::metrics::MetricsError) -> Self {
        use csi_pretrain::metrics::MetricsError as M;
        match e {
            M::Model(m) => Self::from(m),
            M::ZeroNormGradient => Self::Numeric(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}
