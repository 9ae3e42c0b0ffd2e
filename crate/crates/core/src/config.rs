//! Experiment configuration: JSON parsing, `key=value` overrides and validation.
//!
//! Per-channel quantities accept either a scalar (applied to all three
//! channels) or a three-element array. Unknown keys are rejected. Defaults:
//!
//! | key                    | default                         |
//! |------------------------|---------------------------------|
//! | `filter`               | same as `plant`                 |
//! | `estimator`            | `"reduced-filter"`              |
//! | `feedback`             | `true`                          |
//! | `dt`                   | `1e-3 / max Γ_k`                |
//! | `n_traj`               | `1000`                          |
//! | `latency`              | `0`                             |
//! | `bias`                 | `[0, 0, 0]`                     |
//! | `record_stride`        | `100`                           |
//! | `initial_state`        | `{"basis": "000"}`              |
//! | `filter_initial_state` | `{"basis": "000"}`              |
//!
//! `plant`, `controller`, `horizon` and `seed` are required.

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::algebra::{DensityMatrix, DIM};
use crate::controller::ControllerParams;
use crate::error::SimError;
use crate::filters::FilterParams;
use crate::model::{PlantParams, STABILITY_LIMIT};

/// Largest number of steps a single trajectory may take.
pub const MAX_STEPS: f64 = 1e8;

fn per_channel<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 3], D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Channels {
        Uniform(f64),
        PerChannel([f64; 3]),
    }
    match Channels::deserialize(d) {
        Ok(Channels::Uniform(v)) => Ok([v; 3]),
        Ok(Channels::PerChannel(v)) => Ok(v),
        Err(_) => Err(de::Error::custom("expected a number or an array of 3 numbers")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelParamsDoc {
    #[serde(deserialize_with = "per_channel")]
    measurement_strength: [f64; 3],
    #[serde(deserialize_with = "per_channel")]
    efficiency: [f64; 3],
    #[serde(deserialize_with = "per_channel")]
    flip_rate: [f64; 3],
}

impl From<ChannelParamsDoc> for PlantParams {
    fn from(d: ChannelParamsDoc) -> Self {
        Self { measurement_strength: d.measurement_strength, efficiency: d.efficiency, flip_rate: d.flip_rate }
    }
}

/// Feedback thresholds and gain constant. `η_j, Γ_j` of the gain formula are
/// the plant's nominal values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSettings {
    #[serde(deserialize_with = "per_channel")]
    pub alpha: [f64; 3],
    #[serde(deserialize_with = "per_channel")]
    pub beta: [f64; 3],
    pub c: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// The controller reads the plant state itself.
    TrueState,
    /// Density-matrix filter that also sees the control noise.
    FullFilter,
    /// Syndrome-expectation filter driven by the records only.
    #[default]
    ReducedFilter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    /// Computational basis state, e.g. `"100"` for a flip of qubit 1.
    Basis(String),
    /// Diagonal state with weights `(pC, p1, p2, p3)` on `|000>, |100>, |010>, |001>`.
    Populations([f64; 4]),
}

impl Default for InitialState {
    fn default() -> Self {
        Self::Basis("000".into())
    }
}

impl InitialState {
    pub fn to_density(&self) -> Result<DensityMatrix, SimError> {
        match self {
            Self::Basis(bits) => {
                if bits.len() != 3 || !bits.chars().all(|c| c == '0' || c == '1') {
                    return Err(SimError::Config(format!("basis state must be three bits like \"010\", got {bits:?}")));
                }
                let index = usize::from_str_radix(bits, 2).expect("validated bit string");
                debug_assert!(index < DIM);
                Ok(DensityMatrix::basis_state(index))
            }
            Self::Populations(p) => DensityMatrix::syndrome_diagonal(*p),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDocument {
    plant: ChannelParamsDoc,
    #[serde(default)]
    filter: Option<ChannelParamsDoc>,
    controller: ControllerSettings,
    #[serde(default)]
    estimator: Estimator,
    #[serde(default = "default_true")]
    feedback: bool,
    #[serde(default)]
    dt: Option<f64>,
    horizon: f64,
    #[serde(default = "default_n_traj")]
    n_traj: usize,
    seed: u64,
    #[serde(default)]
    latency: f64,
    #[serde(default, deserialize_with = "per_channel_default")]
    bias: [f64; 3],
    #[serde(default = "default_stride")]
    record_stride: usize,
    #[serde(default)]
    initial_state: InitialState,
    #[serde(default)]
    filter_initial_state: InitialState,
}

fn per_channel_default<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 3], D::Error> {
    per_channel(d)
}

fn default_true() -> bool {
    true
}

fn default_n_traj() -> usize {
    1000
}

fn default_stride() -> usize {
    100
}

/// A fully resolved and validated experiment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub plant: PlantParams,
    pub filter: FilterParams,
    pub controller: ControllerSettings,
    pub estimator: Estimator,
    /// When false the gains stay at zero.
    pub feedback: bool,
    pub dt: f64,
    pub horizon: f64,
    pub n_traj: usize,
    pub seed: u64,
    /// Feedback delay, a multiple of `dt`.
    pub latency: f64,
    /// Record bias in units of `√(η_k Γ_k)`: the estimator sees `dY_k + bias_k √(η_k Γ_k) dt`.
    pub bias: [f64; 3],
    pub record_stride: usize,
    pub initial_state: InitialState,
    pub filter_initial_state: InitialState,
}

/// A parsed configuration plus any non-fatal adjustments made while resolving it.
#[derive(Clone, Debug)]
pub struct ParsedConfig {
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
}

impl ExperimentConfig {
    pub fn controller_params(&self) -> ControllerParams {
        ControllerParams {
            alpha: self.controller.alpha,
            beta: self.controller.beta,
            c: self.controller.c,
            efficiency: self.plant.efficiency,
            measurement_strength: self.plant.measurement_strength,
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn latency_steps(&self) -> usize {
        (self.latency / self.dt).round() as usize
    }

    /// Checks every range and cross-field constraint.
    pub fn validate(&self) -> Result<(), SimError> {
        self.plant.validate("plant")?;
        self.filter.validate("filter")?;
        let ctrl = self.controller_params();
        ctrl.validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::param("dt", format!("must be > 0, got {}", self.dt)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SimError::param("horizon", format!("must be > 0, got {}", self.horizon)));
        }
        if self.horizon / self.dt > MAX_STEPS {
            return Err(SimError::param(
                "horizon",
                format!("horizon/dt = {:e} exceeds the limit of {MAX_STEPS:e} steps", self.horizon / self.dt),
            ));
        }
        if self.n_traj < 1 {
            return Err(SimError::param("n_traj", "must be >= 1"));
        }
        if self.record_stride < 1 {
            return Err(SimError::param("record_stride", "must be >= 1"));
        }
        if !(self.latency >= 0.0 && self.latency.is_finite()) {
            return Err(SimError::param("latency", format!("must be >= 0, got {}", self.latency)));
        }
        if self.bias.iter().any(|b| !b.is_finite()) {
            return Err(SimError::param("bias", "must be finite"));
        }
        let max_gain_sq = if self.feedback {
            (0..3).map(|j| ctrl.active_gain(j).powi(2)).fold(0.0, f64::max)
        } else {
            0.0
        };
        for (name, params) in [("plant", &self.plant), ("filter", &self.filter)] {
            let rate = params.fastest_rate().max(max_gain_sq);
            if self.dt * rate > STABILITY_LIMIT {
                return Err(SimError::param(
                    "dt",
                    format!(
                        "dt * max rate = {} * {} exceeds {STABILITY_LIMIT} ({name} rates and active feedback gains)",
                        self.dt, rate
                    ),
                ));
            }
        }
        self.initial_state.to_density()?;
        self.filter_initial_state.to_density()?;
        Ok(())
    }

    pub fn to_json_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

/// Parses a JSON document into a validated configuration.
pub fn parse_config(text: &str) -> Result<ParsedConfig, SimError> {
    parse_config_with_overrides(text, &[])
}

/// Parses a JSON document, applies `key=value` overrides, then validates.
pub fn parse_config_with_overrides(text: &str, overrides: &[String]) -> Result<ParsedConfig, SimError> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| SimError::Config(format!("malformed JSON: {e}")))?;
    for item in overrides {
        apply_override(&mut value, item)?;
    }
    resolve(value)
}

/// Sets a dotted key such as `plant.flip_rate=0.02` or `controller.alpha=[0.9,0.9,0.95]`.
/// The value is read as JSON when possible, otherwise as a string.
pub fn apply_override(doc: &mut Value, item: &str) -> Result<(), SimError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| SimError::Config(format!("override {item:?} is not of the form KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(SimError::Config(format!("override {item:?} has an empty key")));
    }
    let parsed: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| SimError::Config(format!("override key {key:?}: `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one part")
}

fn resolve(value: Value) -> Result<ParsedConfig, SimError> {
    let doc: ConfigDocument = serde_json::from_value(value).map_err(|e| SimError::Config(e.to_string()))?;
    let plant: PlantParams = doc.plant.into();
    let filter = doc.filter.map(PlantParams::from).unwrap_or(plant);
    plant.validate("plant")?;
    let dt = doc.dt.unwrap_or_else(|| plant.default_dt());
    let mut warnings = Vec::new();
    let mut latency = doc.latency;
    if latency.is_finite() && latency >= 0.0 && dt > 0.0 {
        let steps = (latency / dt).round();
        let rounded = steps * dt;
        if (rounded - latency).abs() > 1e-12 * latency.max(1.0) {
            warnings.push(format!("latency {latency} rounded to {rounded} ({steps} steps of {dt})"));
            latency = rounded;
        }
    }
    let config = ExperimentConfig {
        plant,
        filter,
        controller: doc.controller,
        estimator: doc.estimator,
        feedback: doc.feedback,
        dt,
        horizon: doc.horizon,
        n_traj: doc.n_traj,
        seed: doc.seed,
        latency,
        bias: doc.bias,
        record_stride: doc.record_stride,
        initial_state: doc.initial_state,
        filter_initial_state: doc.filter_initial_state,
    };
    config.validate()?;
    Ok(ParsedConfig { config, warnings })
}

/// The ideal-feedback protocol: equal channels `Γ = 1, γ = 1/64, η = 0.8`,
/// thresholds `α = 0.95, β = 0.6, c = 3/2`, start in `|000>`, horizon `1/γ`,
/// full filter with the exact model.
pub fn ideal_preset() -> ExperimentConfig {
    let plant = PlantParams::uniform(1.0, 0.8, 1.0 / 64.0);
    ExperimentConfig {
        plant,
        filter: plant,
        controller: ControllerSettings { alpha: [0.95; 3], beta: [0.6; 3], c: 1.5 },
        estimator: Estimator::FullFilter,
        feedback: true,
        dt: plant.default_dt(),
        horizon: 64.0,
        n_traj: 1000,
        seed: 2019,
        latency: 0.0,
        bias: [0.0; 3],
        record_stride: 100,
        initial_state: InitialState::default(),
        filter_initial_state: InitialState::default(),
    }
}

/// The degraded protocol: reduced filter with `γ* = 0.8γ, Γ* = 0.9Γ, η* = 0.9η`,
/// record biases `(+1/10, −1/10, +1/20)·√(ηΓ)` and latency `1/(2Γ)`.
pub fn mismatched_preset() -> ExperimentConfig {
    let ideal = ideal_preset();
    let p = ideal.plant;
    ExperimentConfig {
        filter: PlantParams {
            measurement_strength: p.measurement_strength.map(|g| 0.9 * g),
            efficiency: p.efficiency.map(|e| 0.9 * e),
            flip_rate: p.flip_rate.map(|g| 0.8 * g),
        },
        estimator: Estimator::ReducedFilter,
        latency: 0.5 / p.measurement_strength[0],
        bias: [0.1, -0.1, 0.05],
        ..ideal
    }
}
