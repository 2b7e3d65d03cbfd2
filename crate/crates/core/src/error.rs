use std::fmt;

use thiserror::Error;

use crate::trace::IterationTrace;

/// Which part of the pipeline produced an error or a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Consensus,
    Feasibility,
    Edp,
    Shedding,
    Oracle,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Consensus => "consensus",
            Stage::Feasibility => "feasibility",
            Stage::Edp => "edp",
            Stage::Shedding => "shedding",
            Stage::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Diagnostic returned when an iterative stage exhausts its iteration budget.
#[derive(Debug, Clone)]
pub struct NotConverged {
    pub stage: Stage,
    pub iterations: usize,
    pub residual: f64,
    pub threshold: f64,
    pub trace: IterationTrace,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("communication graph is disconnected: {components} components")]
    DisconnectedGraph { components: usize },

    #[error("invalid edge ({from}, {to}): {reason}")]
    InvalidEdge {
        from: usize,
        to: usize,
        reason: &'static str,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error(
        "loss matrix is not positive semidefinite: eigenvalue {eigenvalue:e} below -{tolerance:e}"
    )]
    NotPositiveSemidefinite { eigenvalue: f64, tolerance: f64 },

    #[error("index {index} out of range for {len} agents")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("bus {0} has no generator")]
    NotAGenerator(usize),

    #[error("priority level {0} has no buses")]
    EmptyPriorityLevel(u32),

    #[error("load shedding infeasible: total y_max {capacity} MW does not exceed requested {requested} MW (Assumption 8)")]
    InfeasibleShedding { capacity: f64, requested: f64 },

    #[error("category cardinality is zero")]
    ZeroCardinality,

    #[error("consensus value {theta} is {distance} away from the nearest band (m = {nearest}), beyond epsilon {epsilon}")]
    Undecodable {
        theta: f64,
        nearest: usize,
        distance: f64,
        epsilon: f64,
    },

    #[error("{stage} did not converge after {} iterations (residual {:e}, threshold {:e})", .0.iterations, .0.residual, .0.threshold, stage = .0.stage)]
    NotConverged(Box<NotConverged>),

    #[error("problem is infeasible: {0}")]
    Infeasible(String),

    #[error("grid of {points} points exceeds the limit of {limit}")]
    GridTooLarge { points: f64, limit: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parse error at line {line}{}: {message}", field.as_ref().map(|f| format!(" (field `{f}`)")).unwrap_or_default())]
    Parse {
        line: usize,
        field: Option<String>,
        message: String,
    },

    #[error("validation failed [{assumption}]: {message}")]
    Validation { assumption: String, message: String },

    #[error("{stage}: {source}")]
    InStage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn in_stage(self, stage: Stage) -> Error {
        match self {
            Error::InStage { .. } => self,
            other => Error::InStage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Innermost error, with stage tags peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::InStage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::NotConverged(_) => 3,
            Error::Io(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
