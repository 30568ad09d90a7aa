use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("could not parse parameters: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("axis `{axis}` needs at least 3 nodes, got {nodes}")]
    TooFewNodes { axis: &'static str, nodes: usize },
    #[error("price range [{s_min}, {s_max}] too narrow, need s_min < {need_min} and s_max > {need_max}")]
    DomainTooNarrow {
        s_min: f64,
        s_max: f64,
        need_min: f64,
        need_max: f64,
    },
    #[error("solver supports exactly two regimes, got {0}")]
    RegimeCount(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(
        "control iteration did not converge at time index {time_index}: \
         {iterations} iterations, last value change {last_change:e}, \
         {changed_controls} controls still switching"
    )]
    NotConverged {
        time_index: usize,
        iterations: usize,
        last_change: f64,
        changed_controls: usize,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BarrierError {
    #[error("fit needs at least {coefficients} usable nodes, only {nodes} available")]
    Underdetermined { nodes: usize, coefficients: usize },
    #[error("least-squares system is singular")]
    Singular,
    #[error("barriers cross at q={q}, nu1={nu1}, t={t}: buy level {buy} >= sell level {sell}")]
    Crossing {
        q: f64,
        nu1: f64,
        t: f64,
        buy: f64,
        sell: f64,
    },
    #[error("non-parallelity fails at q={q}, nu1={nu1}, t={t} (margin {margin:e})")]
    NonParallel { q: f64, nu1: f64, t: f64, margin: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("diffusion normal to the surface vanishes (|grad f . beta|^2 = {value:e}) at {at:?}")]
    DegenerateDiffusion { value: f64, at: Vec<f64> },
    #[error("inverse transform did not converge after {iterations} iterations (residual {residual:e}) near {at:?}")]
    InversionFailed {
        iterations: usize,
        residual: f64,
        at: Vec<f64>,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("need at least {min} paths per start, got {got}")]
    TooFewPaths { min: usize, got: usize },
    #[error("start {index} outside the domain: {reason}")]
    BadStart { index: usize, reason: String },
    #[error(transparent)]
    Transform(#[from] TransformError),
}

/// A configuration problem, located by its dotted field path.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{field}: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("solver failed: {0}")]
    Solver(#[from] SolverError),
    #[error("barrier stage failed: {0}")]
    Barrier(#[from] BarrierError),
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("admissibility check failed: {0}")]
    Admissibility(String),
    #[error("field dump: {0}")]
    Dump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
