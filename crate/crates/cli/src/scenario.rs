//! Scenario files: one TOML document per scenario, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sponsored_market::delay_stability::DelaySpec;
use sponsored_market::market_model::{validate_feasible, MarketParams, PopulationState, ProviderStrategy};
use sponsored_market::ne_search::NeSolverConfig;
use sponsored_market::replicator::{AgentConfig, OdeConfig};
use sponsored_market::se_search::MpecConfig;
use sponsored_market::MarketError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("{}: invalid scenario:\n  - {}", path.display(), problems.join("\n  - "))]
    Validation { path: PathBuf, problems: Vec<String> },
    #[error("unknown bundled scenario `{0}`")]
    UnknownBundled(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub meta: Meta,
    pub params: MarketParams<f64>,
    pub initial_strategy: ProviderStrategy<f64>,
    /// Defaults to the barycenter of the available strategies.
    #[serde(default)]
    pub initial_state: Option<PopulationState<f64>>,
    #[serde(default)]
    pub ode: OdeConfig<f64>,
    #[serde(default)]
    pub agent: AgentConfig<f64>,
    #[serde(default)]
    pub ne: NeSolverConfig<f64>,
    #[serde(default)]
    pub mpec: MpecConfig,
    #[serde(default)]
    pub delay: Option<DelaySpec<f64>>,
}

impl Scenario {
    pub fn initial_state(&self) -> PopulationState<f64> {
        self.initial_state
            .clone()
            .unwrap_or_else(|| PopulationState::barycenter(self.params.n_csp(), self.params.opt_out_allowed))
    }

    /// Every violated invariant, empty when the scenario is usable.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut note = |r: sponsored_market::Result<()>, what: &str| {
            if let Err(e) = r {
                out.push(format!("{what}: {e}"));
            }
        };
        if self.meta.name.trim().is_empty() {
            note(Err(MarketError::InvalidParams("name must be nonempty".into())), "meta");
        }
        note(self.params.validate(), "params");
        note(self.initial_strategy.validate_box(&self.params), "initial_strategy");
        if let Some(x) = &self.initial_state {
            let d = self.params.n_csp() + 1;
            if x.shares.len() != d {
                note(Err(MarketError::Dimension { expected: d, got: x.shares.len() }), "initial_state");
            } else {
                note(x.check(self.params.opt_out_allowed, 1e-12), "initial_state");
            }
        }
        note(self.ode.validate(), "ode");
        note(self.ne.validate(), "ne");
        note(self.mpec.validate(), "mpec");
        if let Some(d) = &self.delay {
            note(d.validate(self.params.n_csp()), "delay");
        }
        if out.is_empty() {
            let rep = validate_feasible(&self.initial_state(), &self.initial_strategy, &self.params);
            out.extend(rep.violations.iter().map(|v| format!("initial point violates {:?} by {:e}", v.row, v.magnitude)));
        }
        out
    }
}

/// Parses and validates scenario text; `origin` labels error messages.
pub fn parse_scenario(text: &str, origin: &Path) -> Result<Scenario, ScenarioError> {
    if text.trim().is_empty() {
        return Err(ScenarioError::Parse { path: origin.into(), message: "empty scenario file".into() });
    }
    let sc: Scenario =
        toml::from_str(text).map_err(|e| ScenarioError::Parse { path: origin.into(), message: e.to_string() })?;
    let problems = sc.problems();
    if problems.is_empty() {
        Ok(sc)
    } else {
        Err(ScenarioError::Validation { path: origin.into(), problems })
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.into(), source })?;
    parse_scenario(&text, path)
}

pub const BUNDLED: [(&str, &str); 3] = [
    ("via_fig3", include_str!("../scenarios/via_fig3.scenario")),
    ("sponsorship_2csp", include_str!("../scenarios/sponsorship_2csp.scenario")),
    ("network_effect_3csp", include_str!("../scenarios/network_effect_3csp.scenario")),
];

pub fn bundled(name: &str) -> Result<Scenario, ScenarioError> {
    let name = name.trim_end_matches(".scenario");
    let (_, text) = BUNDLED.iter().find(|(n, _)| *n == name).ok_or_else(|| ScenarioError::UnknownBundled(name.into()))?;
    parse_scenario(text, Path::new(&format!("<bundled>/{name}.scenario")))
}
