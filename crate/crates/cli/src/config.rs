use std::path::Path;

use avatar_core::experiments::EvalSpec;
use avatar_core::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a config file can set. Each section is optional and falls
/// back to the library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub trainer: TrainerConfig,
    pub eval: EvalSpec,
}

pub fn parse(text: &str, origin: &str) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let at = match e.span() {
            Some(span) => format!("{origin}:{}", 1 + text[..span.start].matches('\n').count()),
            None => origin.to_string(),
        };
        CliError::Usage(format!("{at}: {}", e.message()))
    })?;
    cfg.trainer.validate().map_err(|e| CliError::Usage(format!("{origin}: {e}")))?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    parse(&text, &path.display().to_string())
}
