//! Settings from a JSON config file, merged under command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lmmci::intervals::ParamSelector;

/// Every field is optional; flags given on the command line win.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub formula: Option<String>,
    /// Fit method for `fit`, interval method for `confint`.
    pub method: Option<String>,
    pub estimator: Option<String>,
    pub boot_type: Option<String>,
    pub nsim: Option<usize>,
    pub level: Option<f64>,
    pub parm: Option<Vec<ParamSelector>>,
    pub cluster_id: Option<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub output: Option<String>,
    pub k: Option<f64>,
    pub design: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub methods: Option<Vec<String>>,
    pub verify: Option<PathBuf>,
    pub bootstrap_csv: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }
}
