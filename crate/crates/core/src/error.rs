use std::path::PathBuf;

use thiserror::Error;

/// Every failure the pipeline can report.
///
/// Each variant maps to its own process exit code (see [`Error::exit_code`]) so
/// batch drivers can tell failures apart without parsing messages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("topology error: {0}")]
    Topology(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ambiguous surface topology: {0}")]
    AmbiguousTopology(String),
    #[error("missing surface label {0}")]
    MissingLabel(&'static str),
    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),
    #[error("linear solver failed: {0}")]
    Solver(String),
    #[error("degenerate transmural gradient in element {0}")]
    DegenerateGradient(usize),
    #[error("fiber frame undefined at apex element {0} (no resolved neighbour)")]
    PoleDegeneracy(usize),
    #[error("inverted element {element} (det F = {det_f:.3e})")]
    InvertedElement { element: usize, det_f: f64 },
    #[error("strain-energy exponent overflow (Q = {0:.3e})")]
    Overflow(f64),
    #[error("solver did not converge: {0}")]
    NonConvergence(String),
    #[error("missing PCA mode file")]
    MissingModeFile,
    #[error("mesh resolution error: {0}")]
    Resolution(String),
    #[error("too few shapes to split: {0}")]
    TooFewShapes(usize),
    #[error("value {value} of {param} is not in the parameter grid")]
    ValueNotInGrid { param: String, value: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss is not a scalar (shape {0}x{1})")]
    NotScalar(usize, usize),
    #[error("isolated node {0} has no neighbours")]
    IsolatedNode(usize),
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("node correspondence mismatch: {0}")]
    CorrespondenceMismatch(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("unknown ablation variant: {0}")]
    UnknownVariant(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "ParseError",
            Error::Topology(_) => "TopologyError",
            Error::Io { .. } => "IoError",
            Error::AmbiguousTopology(_) => "AmbiguousTopology",
            Error::MissingLabel(_) => "MissingLabel",
            Error::DegenerateMesh(_) => "DegenerateMesh",
            Error::Solver(_) => "SolverError",
            Error::DegenerateGradient(_) => "DegenerateGradient",
            Error::PoleDegeneracy(_) => "PoleDegeneracy",
            Error::InvertedElement { .. } => "InvertedElement",
            Error::Overflow(_) => "Overflow",
            Error::NonConvergence(_) => "NonConvergence",
            Error::MissingModeFile => "MissingModeFile",
            Error::Resolution(_) => "ResolutionError",
            Error::TooFewShapes(_) => "TooFewShapes",
            Error::ValueNotInGrid { .. } => "ValueNotInGrid",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NotScalar(..) => "NotScalar",
            Error::IsolatedNode(_) => "IsolatedNode",
            Error::NonFiniteActivation(_) => "NonFiniteActivation",
            Error::NonFiniteGradient(_) => "NonFiniteGradient",
            Error::EmptySplit(_) => "EmptySplit",
            Error::CorrespondenceMismatch(_) => "CorrespondenceMismatch",
            Error::InsufficientData(_) => "InsufficientData",
            Error::EmptyTestSet => "EmptyTestSet",
            Error::UnknownVariant(_) => "UnknownVariant",
            Error::Config(_) => "ConfigError",
        }
    }

    /// Distinct nonzero exit code per variant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } => 10,
            Error::Topology(_) => 11,
            Error::Io { .. } => 12,
            Error::AmbiguousTopology(_) => 13,
            Error::MissingLabel(_) => 14,
            Error::DegenerateMesh(_) => 15,
            Error::Solver(_) => 16,
            Error::DegenerateGradient(_) => 17,
            Error::PoleDegeneracy(_) => 18,
            Error::InvertedElement { .. } => 19,
            Error::Overflow(_) => 20,
            Error::NonConvergence(_) => 21,
            Error::MissingModeFile => 22,
            Error::Resolution(_) => 23,
            Error::TooFewShapes(_) => 24,
            Error::ValueNotInGrid { .. } => 25,
            Error::ShapeMismatch(_) => 26,
            Error::NotScalar(..) => 27,
            Error::IsolatedNode(_) => 28,
            Error::NonFiniteActivation(_) => 29,
            Error::NonFiniteGradient(_) => 30,
            Error::EmptySplit(_) => 31,
            Error::CorrespondenceMismatch(_) => 32,
            Error::InsufficientData(_) => 33,
            Error::EmptyTestSet => 34,
            Error::UnknownVariant(_) => 35,
            Error::Config(_) => 36,
        }
    }
}
