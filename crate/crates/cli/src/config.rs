use std::path::{Path, PathBuf};

use keyphrase::eval::RecognizerChoice;
use keyphrase::gate::DetectorConfig;
use keyphrase::recognizer::DtwConfig;
use keyphrase::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a pipeline run needs, in one JSON file. Command-line flags
/// override individual fields.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub detector: DetectorConfig,
    pub dtw: DtwConfig,
    pub recognizer: RecognizerChoice,
    pub phrases: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub jobs: Option<usize>,
}

impl PipelineConfig {
    /// Relative paths inside the file resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config: Self = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.phrases, &mut config.templates].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.dtw.validate()?;
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be > 0".into()));
        }
        Ok(())
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, json + "\n").map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}
