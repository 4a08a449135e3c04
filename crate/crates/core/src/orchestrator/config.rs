//! Declarative ensemble definitions.
//!
//! ```toml
//! integration_ms = 16
//!
//! [[modules]]
//! id = "m1"
//! role = "parse"
//! dependencies = []
//! generator = "simulated-latency"
//! params = { delay_ms = 300, inner = "fixed-text" }
//! ```

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::generators::{BuildContext, GeneratorRegistry, GeneratorSpec, RegistryError};
use super::{Ensemble, ModuleSpec, OrchestratorError, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleDef {
    pub id: String,
    pub role: String,
    #[serde(default)]
    pub dependencies: Vec<String>,
    pub generator: String,
    #[serde(default)]
    pub params: toml::Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EnsembleFile {
    #[serde(default)]
    pub integration_ms: f64,
    #[serde(default)]
    pub modules: Vec<ModuleDef>,
}

#[derive(Debug, Error)]
pub enum EnsembleConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse ensemble definition: {0}")]
    Parse(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error("integration_ms must be finite and non-negative")]
    BadIntegration,
}

impl EnsembleFile {
    pub fn from_toml(text: &str) -> Result<Self, EnsembleConfigError> {
        toml::from_str(text).map_err(|e| EnsembleConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, EnsembleConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| EnsembleConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("ensemble definitions always serialize")
    }

    /// Builds generators through `registry` and registers modules in file order.
    pub fn build(&self, registry: &GeneratorRegistry) -> Result<Ensemble, EnsembleConfigError> {
        if !(self.integration_ms >= 0.0 && self.integration_ms.is_finite()) {
            return Err(EnsembleConfigError::BadIntegration);
        }
        let mut ensemble = Ensemble::new();
        ensemble.integration_latency = Duration::from_secs_f64(self.integration_ms / 1e3);
        for def in &self.modules {
            let generator = registry.build(
                &GeneratorSpec {
                    kind: def.generator.clone(),
                    params: def.params.clone(),
                },
                &BuildContext {
                    module_id: &def.id,
                    role_tag: &def.role,
                },
            )?;
            let spec = ModuleSpec {
                module_id: def.id.clone(),
                role_tag: def.role.parse::<Role>().unwrap(),
                declared_dependencies: def.dependencies.clone(),
            };
            ensemble.register(spec, generator)?;
        }
        Ok(ensemble)
    }
}
