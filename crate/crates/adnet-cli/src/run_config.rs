//! Run configuration file: shared paths, codec backend, and seed. Flags
//! override file values; relative paths resolve against the file's directory.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use adnet_core::codec::CodecBackendConfig;
use adnet_core::error::{Error, Result};

#[derive(Debug, Deserialize)]
pub struct RunPaths {
    pub data_root: PathBuf,
    pub checkpoints: PathBuf,
    pub tau_file: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: Option<RunPaths>,
    pub codec: Option<CodecBackendConfig>,
    pub model_preset: Option<String>,
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Format {
            offset: 0,
            message: format!("run config parse: {}", e),
        })
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Environment(format!("cannot read {}: {}", path.display(), e)))?;
        let mut config = Self::parse_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let Some(paths) = &mut config.paths {
            paths.data_root = absolutize(base, &paths.data_root);
            paths.checkpoints = absolutize(base, &paths.checkpoints);
            if let Some(tau) = &mut paths.tau_file {
                *tau = absolutize(base, tau);
            }
        }
        Ok(config)
    }
}

fn absolutize(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
