//! TOML run configuration.
//!
//! ```toml
//! [simulation]      # round-loop parameters
//! [task]            # scenario text and dimension names
//! [backend]         # kind = "Scripted" | "Llm"
//! [scenario]        # scripted backend only
//! [llm]             # LLM backend only
//! [[agents]]        # one table per agent, in id order
//! ```

use std::path::Path;

use beacof_core::coordinator::{ConfidenceRule, PayoffPreset, ScenarioScript, TaskDescriptor};
use beacof_core::llm::EndpointConfig;
use beacof_core::runtime::{AgentSpec, BackendConfig, SimulationConfig};
use beacof_core::types::{AgentId, PayoffMode, TypeVector};
use serde::Deserialize;
use thiserror::Error;

/// Overrides `[llm].base_url`.
pub const ENDPOINT_ENV: &str = "BEACOF_ENDPOINT";

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("config {path}: {message}")]
    Invalid { path: String, message: String },
}

fn default_lambda() -> f64 {
    0.6
}
fn default_omega_init() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    0.05
}
fn default_patience() -> usize {
    3
}
fn default_t_max() -> u32 {
    4
}
fn default_round_attempts() -> u32 {
    2
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulationSection {
    n_agents: Option<u32>,
    d: usize,
    #[serde(default = "default_lambda")]
    lambda: f64,
    #[serde(default = "default_omega_init")]
    omega_init: f64,
    #[serde(default = "default_epsilon")]
    epsilon_change: f64,
    #[serde(default = "default_patience")]
    patience: usize,
    #[serde(default = "default_t_max")]
    t_max: u32,
    #[serde(default)]
    seed: u64,
    payoff_mode: PayoffMode,
    #[serde(default)]
    shift_includes_self: bool,
    consensus_threshold: Option<f64>,
    #[serde(default = "default_round_attempts")]
    round_attempts: u32,
}

#[derive(Debug, Deserialize, Clone, Copy, PartialEq, Eq)]
enum BackendKind {
    Scripted,
    Llm,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackendSection {
    kind: BackendKind,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioSection {
    payoff_preset: PayoffPreset,
    #[serde(default)]
    noise_sigma: f64,
    #[serde(default)]
    nonstationary: bool,
    confidence: ConfidenceRule,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentSection {
    role: String,
    #[serde(default)]
    private_profile: String,
    true_type: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    simulation: SimulationSection,
    #[serde(default)]
    task: TaskDescriptor,
    backend: BackendSection,
    scenario: Option<ScenarioSection>,
    llm: Option<toml::Table>,
    #[serde(default)]
    agents: Vec<AgentSection>,
}

fn build(file: ConfigFile, endpoint_override: Option<String>) -> Result<SimulationConfig, String> {
    let sim = file.simulation;
    let n_agents = match sim.n_agents {
        Some(n) if !file.agents.is_empty() && n as usize != file.agents.len() => {
            return Err(format!("n_agents = {n} but {} [[agents]] tables", file.agents.len()))
        }
        Some(n) => n,
        None if file.agents.is_empty() => return Err("set simulation.n_agents or list [[agents]]".into()),
        None => file.agents.len() as u32,
    };
    let backend = match file.backend.kind {
        BackendKind::Scripted => {
            let scenario = file.scenario.ok_or("scripted backend needs a [scenario] section")?;
            if file.agents.is_empty() {
                return Err("scripted backend needs [[agents]] with true_type".into());
            }
            let mut true_types = std::collections::BTreeMap::new();
            for (i, a) in file.agents.iter().enumerate() {
                let t = a
                    .true_type
                    .clone()
                    .ok_or_else(|| format!("agent {i} ({}) has no true_type", a.role))?;
                let t = TypeVector::new(t).map_err(|e| format!("agent {i} true_type: {e}"))?;
                true_types.insert(AgentId(i as u32), t);
            }
            BackendConfig::Scripted(ScenarioScript {
                true_types,
                payoff_preset: scenario.payoff_preset,
                noise_sigma: scenario.noise_sigma,
                confidence_rule: scenario.confidence,
                nonstationary: scenario.nonstationary,
            })
        }
        BackendKind::Llm => {
            let table = file.llm.unwrap_or_default();
            if table.contains_key("api_key") {
                return Err(format!("[llm] must not contain api_key; set {} instead", beacof_core::llm::API_KEY_ENV));
            }
            let mut endpoint: EndpointConfig = table.try_into().map_err(|e| format!("[llm]: {e}"))?;
            if let Some(url) = endpoint_override {
                endpoint.base_url = url;
            }
            BackendConfig::Llm(endpoint)
        }
    };
    let config = SimulationConfig {
        n_agents,
        d: sim.d,
        lambda: sim.lambda,
        omega_init: sim.omega_init,
        epsilon_change: sim.epsilon_change,
        patience: sim.patience,
        t_max: sim.t_max,
        seed: sim.seed,
        payoff_mode: sim.payoff_mode,
        shift_includes_self: sim.shift_includes_self,
        consensus_threshold: sim.consensus_threshold,
        round_attempts: sim.round_attempts,
        agents: file
            .agents
            .into_iter()
            .map(|a| AgentSpec {
                role: a.role,
                private_profile: a.private_profile,
            })
            .collect(),
        task: file.task,
        backend,
    };
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

/// Parses config text. `endpoint_override` replaces the LLM base URL.
pub fn parse_config(text: &str, path: &str, endpoint_override: Option<String>) -> Result<SimulationConfig, ConfigFileError> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| ConfigFileError::Parse {
        path: path.to_string(),
        message: e.to_string(),
    })?;
    build(file, endpoint_override).map_err(|message| ConfigFileError::Invalid {
        path: path.to_string(),
        message,
    })
}

/// Loads a config file, applying `BEACOF_ENDPOINT` if set.
pub fn load_config(path: &Path) -> Result<SimulationConfig, ConfigFileError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigFileError::Read {
        path: display.clone(),
        source,
    })?;
    let endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.trim().is_empty());
    parse_config(&text, &display, endpoint)
}
