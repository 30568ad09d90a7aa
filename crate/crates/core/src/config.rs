//! Run configuration: a preset with field overrides for the model, plus grid,
//! solver, smoothing, simulation and output sections, all in one JSON object.
//!
//! Every section is validated before any computation starts. Errors carry
//! the dotted path of the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::barriers::{SmoothingSpec, TimeCoordinate};
use crate::error::{ConfigError, GridError, ParamError};
use crate::evaluate::{Scheme, SimulationSpec, SystemState};
use crate::hjb::{Grid4D, GridSpec, SolverOptions};
use crate::model::{ModelParams, PAPER_PRESET};
use crate::transform::TransformOptions;

/// Monte Carlo settings shared by `simulate` and `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub dt: f64,
    pub n_paths: usize,
    pub scheme: Scheme,
    pub antithetic: bool,
    pub transform: TransformOptions,
    pub starts: Vec<SystemState>,
    /// Paths per start written out by `simulate`.
    pub dump_paths: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let spec = SimulationSpec::default();
        Self {
            dt: spec.dt,
            n_paths: spec.n_paths,
            scheme: spec.scheme,
            antithetic: spec.antithetic,
            transform: spec.transform,
            starts: vec![
                SystemState::new(40.0, 50.0, 0.5, 0.0),
                SystemState::new(30.0, 25.0, 0.3, 0.0),
                SystemState::new(50.0, 75.0, 0.7, 0.0),
            ],
            dump_paths: 3,
        }
    }
}

impl SimulationConfig {
    pub fn spec(&self) -> SimulationSpec {
        SimulationSpec {
            dt: self.dt,
            n_paths: self.n_paths,
            scheme: self.scheme,
            antithetic: self.antithetic,
            transform: self.transform,
            zero_noise: false,
        }
    }
}

/// Truth-mode filter paths written by `filter-demo`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterDemoConfig {
    /// Defaults to the model horizon.
    pub horizon: Option<f64>,
    pub dt: f64,
    pub n_paths: usize,
    pub record_every: usize,
}

impl Default for FilterDemoConfig {
    fn default() -> Self {
        Self {
            horizon: None,
            dt: 1e-3,
            n_paths: 5,
            record_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputOptions {
    /// Only every `time_stride`-th time slice (and the last) goes into the
    /// value/policy and barrier CSVs. The binary dump is always complete.
    pub time_stride: usize,
}

impl Default for OutputOptions {
    fn default() -> Self {
        Self { time_stride: 25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base parameter set; `model` overrides individual fields of it. Without
    /// a preset, `model` must list every parameter.
    pub preset: Option<String>,
    pub model: Map<String, Value>,
    pub grid: GridSpec,
    pub solver: SolverOptions,
    pub smoothing: SmoothingSpec,
    pub simulation: SimulationConfig,
    pub filter_demo: FilterDemoConfig,
    pub output: OutputOptions,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Some(PAPER_PRESET.to_string()),
            model: Map::new(),
            grid: GridSpec::default(),
            solver: SolverOptions::default(),
            smoothing: SmoothingSpec::default(),
            simulation: SimulationConfig::default(),
            filter_demo: FilterDemoConfig::default(),
            output: OutputOptions::default(),
            seed: 2016,
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn parse_error(e: serde_path_to_error::Error<serde_json::Error>) -> ConfigError {
    let path = e.path().to_string();
    let field = if path == "." { "config".to_string() } else { path };
    ConfigError::new(field, e.into_inner().to_string())
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(parse_error)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Preset with the `model` overrides applied, validated.
    pub fn params(&self) -> Result<ModelParams, ConfigError> {
        let mut merged = match &self.preset {
            Some(name) => {
                let base = ModelParams::preset(name).map_err(|e| ConfigError::new("preset", e.to_string()))?;
                match serde_json::to_value(base) {
                    Ok(Value::Object(map)) => map,
                    _ => unreachable!("parameters serialize to an object"),
                }
            }
            None => Map::new(),
        };
        for (k, v) in &self.model {
            merged.insert(k.clone(), v.clone());
        }
        let params: ModelParams = serde_path_to_error::deserialize(Value::Object(merged)).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "model".to_string() } else { format!("model.{path}") };
            ConfigError::new(field, e.into_inner().to_string())
        })?;
        params.validate().map_err(|e| match e {
            ParamError::Invalid { field, reason } => ConfigError::new(format!("model.{field}"), reason),
            other => ConfigError::new("model", other.to_string()),
        })?;
        Ok(params)
    }

    /// Checks every section and returns the resolved parameters.
    pub fn validate(&self) -> Result<ModelParams, ConfigError> {
        let params = self.params()?;
        Grid4D::new(&self.grid, &params).map_err(|e| match e {
            GridError::TooFewNodes { axis, .. } => ConfigError::new(format!("grid.n_{axis}"), e.to_string()),
            GridError::DomainTooNarrow { .. } => ConfigError::new("grid.s_min", e.to_string()),
            GridError::RegimeCount(_) => ConfigError::new("model.mu", e.to_string()),
        })?;

        if self.solver.policy_iterations == 0 {
            return Err(ConfigError::new("solver.policy_iterations", "must be at least 1"));
        }
        if !(self.solver.tolerance > 0.0) {
            return Err(ConfigError::new("solver.tolerance", "must be positive"));
        }

        let sm = &self.smoothing;
        for (name, deg) in [("degree_q", sm.degree_q), ("degree_nu", sm.degree_nu), ("degree_t", sm.degree_t)] {
            if deg > 15 {
                return Err(ConfigError::new(format!("smoothing.{name}"), format!("{deg} exceeds the maximum 15")));
            }
        }
        match sm.time {
            TimeCoordinate::Exponential { rate } if !(rate > 0.0) => return Err(ConfigError::new("smoothing.time.rate", "must be positive")),
            TimeCoordinate::Logarithmic { offset } if !(offset > 0.0) => return Err(ConfigError::new("smoothing.time.offset", "must be positive")),
            _ => {}
        }

        let sim = &self.simulation;
        if !(sim.dt > 0.0 && sim.dt <= params.horizon) {
            return Err(ConfigError::new("simulation.dt", format!("must lie in (0, {}]", params.horizon)));
        }
        if sim.n_paths == 0 {
            return Err(ConfigError::new("simulation.n_paths", "must be at least 1"));
        }
        if sim.starts.is_empty() {
            return Err(ConfigError::new("simulation.starts", "needs at least one start"));
        }
        for (i, s) in sim.starts.iter().enumerate() {
            s.check(&params, i).map_err(|e| ConfigError::new(format!("simulation.starts[{i}]"), e.to_string()))?;
        }
        let tr = &sim.transform;
        for (name, v) in [
            ("fd_step", tr.fd_step),
            ("fd_step2", tr.fd_step2),
            ("tube_factor", tr.tube_factor),
            ("max_drift_ratio", tr.max_drift_ratio),
            ("newton_tol", tr.newton_tol),
            ("quadrature_tol", tr.quadrature_tol),
        ] {
            if !(v > 0.0) {
                return Err(ConfigError::new(format!("simulation.transform.{name}"), "must be positive"));
            }
        }
        if tr.rk_steps == 0 || tr.newton_max_iter == 0 {
            return Err(ConfigError::new("simulation.transform", "rk_steps and newton_max_iter must be at least 1"));
        }

        let fd = &self.filter_demo;
        if !(fd.dt > 0.0) {
            return Err(ConfigError::new("filter_demo.dt", "must be positive"));
        }
        if let Some(h) = fd.horizon {
            if !(h > 0.0) {
                return Err(ConfigError::new("filter_demo.horizon", "must be positive"));
            }
        }
        if self.output.time_stride == 0 {
            return Err(ConfigError::new("output.time_stride", "must be at least 1"));
        }
        Ok(params)
    }
}
