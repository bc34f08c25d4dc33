use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{GridConfig, RunConfig};

/// Provenance embedded in every JSON output.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub core_version: &'static str,
    pub command: &'static str,
    /// SHA-256 of the config file bytes, or of the canonical JSON of the defaults.
    pub config_sha256: String,
    pub seed: u64,
    pub grid: GridConfig,
    pub wall_clock_seconds: f64,
}

pub fn config_hash(bytes: &[u8], cfg: &RunConfig) -> String {
    let mut h = Sha256::new();
    if bytes.is_empty() {
        h.update(serde_json::to_vec(cfg).expect("config serialises"));
    } else {
        h.update(bytes);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
