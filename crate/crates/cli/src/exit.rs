//! Process exit codes.

use std::fmt;

use dispnet_core::autodiff::AutodiffError;
use dispnet_core::data::{DataError, PlyError};
use dispnet_core::losses::LossError;
use dispnet_core::model::{CheckpointError, ModelError};
use dispnet_core::operators::OpError;

pub const OK: u8 = 0;
/// A check ran and reported failures.
pub const CHECK_FAILED: u8 = 1;
pub const INPUT: u8 = 2;
pub const NUMERIC: u8 = 3;
pub const CONFIG: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn io_error(message: impl Into<String>) -> Failure {
    Failure {
        code: INPUT,
        message: message.into(),
    }
}

pub fn config_error(message: impl Into<String>) -> Failure {
    Failure {
        code: CONFIG,
        message: message.into(),
    }
}

pub fn numeric_error(message: impl Into<String>) -> Failure {
    Failure {
        code: NUMERIC,
        message: message.into(),
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        io_error(e.to_string())
    }
}

impl From<PlyError> for Failure {
    fn from(e: PlyError) -> Self {
        io_error(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Model(m) => m.into(),
            other => io_error(other.to_string()),
        }
    }
}

fn is_numeric(e: &ModelError) -> bool {
    let autodiff = |a: &AutodiffError| matches!(a, AutodiffError::NumericFault { .. });
    match e {
        ModelError::NonFinite { .. } => true,
        ModelError::Autodiff(a) => autodiff(a),
        ModelError::Op(OpError::Autodiff(a)) => autodiff(a),
        ModelError::Loss(LossError::Autodiff(a)) => autodiff(a),
        _ => false,
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        if is_numeric(&e) {
            numeric_error(e.to_string())
        } else if matches!(e, ModelError::Config { .. }) {
            config_error(e.to_string())
        } else {
            io_error(e.to_string())
        }
    }
}
