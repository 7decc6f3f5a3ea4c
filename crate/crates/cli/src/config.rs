//! TOML run configuration for `pipeline` and `compare`.

use std::path::Path;

use serde::Deserialize;

use hieraprune_core::budget::{DEFAULT_LAMBDA, DEFAULT_R_VAR};
use hieraprune_core::cost::ModelDims;
use hieraprune_core::pipeline::{default_boundaries, PruneSchedule};
use hieraprune_core::segmentation::DEFAULT_BETA;

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    File,
    #[default]
    Synthetic,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
struct DimsConfig {
    layers: u64,
    hidden: u64,
    ffn: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_stages")]
    n_stages: usize,
    boundaries: Option<Vec<usize>>,
    r_merge: f64,
    r_prune: Vec<f64>,
    #[serde(default = "default_r_var")]
    r_var: f64,
    #[serde(default = "default_lambda")]
    lambda: f64,
    #[serde(default = "default_beta")]
    beta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub provider: ProviderKind,
    dims: Option<DimsConfig>,
    #[serde(default)]
    text_tokens: u64,
}

fn default_stages() -> usize {
    4
}

fn default_r_var() -> f64 {
    DEFAULT_R_VAR
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| UsageError {
            flag: "config",
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text).map_err(|message| {
            UsageError {
                flag: "config",
                message,
            }
            .into()
        })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let config: RunConfig = toml::from_str(text).map_err(|e| e.message().to_string())?;
        config.schedule()?;
        Ok(config)
    }

    /// The validated schedule.
    pub fn schedule(&self) -> Result<PruneSchedule, String> {
        let dims = match self.dims {
            Some(d) => ModelDims::new(d.layers, d.hidden, d.ffn).map_err(|e| e.to_string())?,
            None => ModelDims::default(),
        };
        let schedule = PruneSchedule {
            n_stages: self.n_stages,
            boundaries: self
                .boundaries
                .clone()
                .unwrap_or_else(|| default_boundaries(self.n_stages, dims.layers)),
            r_merge: self.r_merge,
            r_prune: self.r_prune.clone(),
            r_var: self.r_var,
            lambda: self.lambda,
            beta: self.beta,
            dims,
            text_tokens: self.text_tokens,
        };
        schedule.validate().map_err(|e| e.to_string())?;
        Ok(schedule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::parse("r_merge = 0.3\nr_prune = [0.3, 0.3, 0.3]\n").unwrap();
        let s = c.schedule().unwrap();
        assert_eq!(s, PruneSchedule::default());
        assert_eq!(c.provider, ProviderKind::Synthetic);
    }

    #[test]
    fn full_config() {
        let c = RunConfig::parse(
            r#"
n_stages = 3
boundaries = [0, 4, 8]
r_merge = 0.2
r_prune = [0.5, 0.5]
r_var = 0.05
lambda = 0.7
beta = 0.3
seed = 9
provider = "file"
text_tokens = 32

[dims]
layers = 12
hidden = 64
ffn = 256
"#,
        )
        .unwrap();
        let s = c.schedule().unwrap();
        assert_eq!(s.boundaries, vec![0, 4, 8]);
        assert_eq!(s.dims, ModelDims::new(12, 64, 256).unwrap());
        assert_eq!((c.seed, c.provider), (9, ProviderKind::File));
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::parse("r_merge = 0.3\nr_prune = [0.3, 0.3, 0.3]\ngamma = 1\n").is_err());
        assert!(RunConfig::parse("r_merge = 0.3\nr_prune = [0.3]\n").is_err());
        assert!(RunConfig::parse("r_merge = 1.5\nr_prune = [0.3, 0.3, 0.3]\n").is_err());
        assert!(RunConfig::parse(
            "r_merge = 0.3\nr_prune = [0.3, 0.3, 0.3]\nprovider = \"magic\"\n"
        )
        .is_err());
    }
}
