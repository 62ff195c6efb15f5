//! Train-command configuration file (TOML or JSON).

use std::path::Path;

use serde::{Deserialize, Serialize};

use flatscape::models::ArchitectureConfig;
use flatscape::training::{DefenseConfig, PhiProbeConfig, TrainConfig};
use flatscape::{Error, Result};

fn default_precision() -> String {
    "standard".into()
}

fn default_defense() -> DefenseConfig {
    DefenseConfig::None
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainFileConfig {
    /// "standard" (f32) or "high" (f64).
    #[serde(default = "default_precision")]
    pub precision: String,
    /// Dataset specification string (see the data module).
    pub data: String,
    pub arch: ArchitectureConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_defense")]
    pub defense: DefenseConfig,
    #[serde(default)]
    pub phi_probe: Option<PhiProbeConfig>,
}

impl TrainFileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainFileConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            Some("json") => serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => {
                return Err(Error::Config(format!(
                    "config {} must end in .toml or .json",
                    path.display()
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.precision != "standard" && self.precision != "high" {
            return Err(Error::Config(format!(
                "precision must be \"standard\" or \"high\", got {:?}",
                self.precision
            )));
        }
        self.train.validate()?;
        self.defense.validate()?;
        if let Some(p) = &self.phi_probe {
            if p.n_samples == 0 || p.n_planes == 0 {
                return Err(Error::Config(
                    "phi_probe needs n_samples >= 1 and n_planes >= 1".into(),
                ));
            }
        }
        Ok(())
    }
}
