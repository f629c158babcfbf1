use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid platoon config: {0}")]
    InvalidConfig(String),
    #[error("invalid platoon state: {0}")]
    InvalidState(String),
    #[error("invalid weight schedule: {0}")]
    InvalidWeights(String),
    #[error("invalid leader profile: {0}")]
    InvalidProfile(String),
    #[error("invalid solver parameters: {0}")]
    InvalidParams(String),
    #[error("stage block U_{vehicle} is not positive definite")]
    StageBlockNotPd { vehicle: usize },
    #[error("decomposition block {index} lost positive definiteness (lambda_min = {lambda_min:e})")]
    DecompositionNotPd { index: usize, lambda_min: f64 },
    #[error("augmented layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("fabric fault in round {round}: agent {from} posted no message for agent {to}")]
    MissingMessage { round: usize, from: usize, to: usize },
    #[error("fabric refused message from agent {from} to non-neighbor {to}")]
    NotNeighbor { from: usize, to: usize },
    #[error("local problem of agent {agent} failed")]
    Agent {
        agent: usize,
        #[source]
        source: crate::qcqp::QcqpError,
    },
    #[error("centralized solve failed")]
    Centralized(#[source] crate::qcqp::QcqpError),
    #[error("solver did not converge within {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("step {step}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("safety violation at step {step}, vehicle {vehicle}: margin {margin:e}")]
    SafetyViolation {
        step: usize,
        vehicle: usize,
        margin: f64,
    },
    #[error("applied control infeasible at step {step}: worst residual {residual:e}")]
    InfeasibleControl { step: usize, residual: f64 },
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
