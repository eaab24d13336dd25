use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),
    #[error("invalid gear table: {0}")]
    InvalidGearTable(String),
    #[error("invalid friction approximation: {0}")]
    InvalidFriction(String),
    #[error("friction breakpoint {0} coincides with a gear boundary")]
    DegeneratePartition(f64),
    #[error("velocity {0} outside the model partition")]
    VelocityOutsidePartition(f64),
    #[error("gear {gear} is not valid at velocity {velocity}")]
    InvalidGear { gear: u8, velocity: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MldError {
    #[error("unbounded box: {0}")]
    UnboundedBox(String),
    #[error("state or input outside the box: {0}")]
    OutOfBox(String),
    #[error("a gear input is required for this model")]
    MissingGear,
    #[error("no consistent binary/auxiliary assignment: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MipError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("binary variable {0} must have bounds within [0, 1]")]
    BinaryBounds(usize),
    #[error("quadratic cost is not positive semidefinite")]
    NotPsd,
    #[error("too many binaries for enumeration: {0} (limit {1})")]
    TooManyBinaries(usize, usize),
    #[error("LP parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("reference window too short: need {need}, got {got}")]
    ReferenceTooShort { need: usize, got: usize },
    #[error("missing data: {0}")]
    Missing(String),
    #[error("weight matrix is indefinite")]
    IndefiniteWeight,
    #[error("solution dimension {got} does not match problem ({need})")]
    SolutionDimension { need: usize, got: usize },
    #[error("binaries of vehicle {vehicle} at step {step} are not one-hot")]
    NotOneHot { vehicle: usize, step: usize },
    #[error(transparent)]
    Mld(#[from] MldError),
    #[error(transparent)]
    Mip(#[from] MipError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("no feasible solution for vehicle {vehicle:?} ({status})")]
    Infeasible {
        vehicle: Option<usize>,
        status: String,
    },
    #[error("expected {expected} measured states, got {got}")]
    Measurements { expected: usize, got: usize },
    #[error("message from {sender} to {receiver} outside the communication topology")]
    Topology { sender: usize, receiver: usize },
    #[error("invalid controller options: {0}")]
    Options(String),
    #[error(transparent)]
    Mpc(#[from] MpcError),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation setup: {0}")]
    Setup(String),
    #[error("controller failed at step {step}: {source}")]
    Controller {
        step: usize,
        #[source]
        source: ControlError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("config parse error at line {line}, column {column}: {msg}")]
    Parse {
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("missing run outputs: {0}")]
    MissingRuns(String),
}
