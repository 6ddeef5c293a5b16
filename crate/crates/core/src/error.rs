use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),

    #[error("invalid parameter set: {0}")]
    InvalidParameters(String),

    #[error("item {item_id} has constant observed values")]
    ConstantItem { item_id: String },

    #[error("item {item_id} has {n} observed values, at least 2 are required")]
    TooFewObservations { item_id: String, n: usize },

    #[error("row ({class_id}, {item_id}) is not permitted by the block design for a {group} classroom")]
    ForbiddenRow {
        class_id: String,
        item_id: String,
        group: String,
    },

    #[error("classroom {class_id} has no common-block items and cannot bridge the age groups")]
    UnbridgedClassroom { class_id: String },

    #[error("duplicate observation for classroom {class_id}, item {item_id}")]
    DuplicateRow { class_id: String, item_id: String },

    #[error("unknown item {0}")]
    UnknownItem(String),

    #[error("classroom {0} has no age-group record")]
    UnknownClassroom(String),

    #[error("item {0} has no observations in the design")]
    EmptyItem(String),

    #[error("marginal covariance of center {center_id} is not positive definite")]
    SingularCovariance { center_id: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix A of the block partition is singular")]
    SingularA,

    #[error("factor {factor} has non-positive variance {value}")]
    DegenerateFactor { factor: usize, value: f64 },

    #[error("composite weight vector is zero")]
    ZeroWeightVector,

    #[error("balance constraints are infeasible (constraint residual {residual:e})")]
    InfeasibleConstraints { residual: f64 },

    #[error("invalid balance problem: {0}")]
    InvalidBalanceProblem(String),

    #[error("dose has zero variance")]
    DegenerateDose,

    #[error("{distinct} distinct dose values, at least {required} are required")]
    TooFewDistinctDoses { distinct: usize, required: usize },

    #[error("missing upstream artifact {path}: {remedy}")]
    MissingArtifact { path: PathBuf, remedy: String },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "Io",
            Error::Parse { .. } => "Parse",
            Error::InvalidCatalog(_) => "InvalidCatalog",
            Error::InvalidParameters(_) => "InvalidParameters",
            Error::ConstantItem { .. } => "ConstantItem",
            Error::TooFewObservations { .. } => "TooFewObservations",
            Error::ForbiddenRow { .. } => "ForbiddenRow",
            Error::UnbridgedClassroom { .. } => "UnbridgedClassroom",
            Error::DuplicateRow { .. } => "DuplicateRow",
            Error::UnknownItem(_) => "UnknownItem",
            Error::UnknownClassroom(_) => "UnknownClassroom",
            Error::EmptyItem(_) => "EmptyItem",
            Error::SingularCovariance { .. } => "SingularCovariance",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::SingularA => "SingularA",
            Error::DegenerateFactor { .. } => "DegenerateFactor",
            Error::ZeroWeightVector => "ZeroWeightVector",
            Error::InfeasibleConstraints { .. } => "InfeasibleConstraints",
            Error::InvalidBalanceProblem(_) => "InvalidBalanceProblem",
            Error::DegenerateDose => "DegenerateDose",
            Error::TooFewDistinctDoses { .. } => "TooFewDistinctDoses",
            Error::MissingArtifact { .. } => "MissingArtifact",
            Error::Config(_) => "Config",
        }
    }

    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            Error::Io { path, .. } | Error::Parse { path, .. } | Error::MissingArtifact { path, .. } => {
                Some(path)
            }
            _ => None,
        }
    }
}
