//! TOML configuration. Every table mirrors the field names of the matching
//! core config struct; missing keys take the defaults.
//!
//! ```toml
//! [registration]
//! metric = "mind"
//! iterations = [100, 80, 50]
//!
//! [augmentation]
//! n = 3
//! delta = 0.5
//! ```

use std::fs;
use std::path::Path;

use dnsreg_core::augmentation::AugmentationConfig;
use dnsreg_core::contrastive::ContrastiveConfig;
use dnsreg_core::masrnet::NetConfig;
use dnsreg_core::registration::RegistrationConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub registration: RegistrationConfig,
    /// Takes precedence over `training.augmentation`.
    pub augmentation: Option<AugmentationConfig>,
    pub training: ContrastiveConfig,
    pub network: Option<NetConfig>,
}

impl FileConfig {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut cfg: FileConfig = toml::from_str(text).map_err(|e| Error::Config { path: path.into(), source: e })?;
        if let Some(a) = &cfg.augmentation {
            cfg.training.augmentation = a.clone();
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    /// The configuration as TOML, with every key written out.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_default()
    }
}
