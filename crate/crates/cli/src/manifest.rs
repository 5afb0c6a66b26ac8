use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use mftc_core::lq::benchmark::Seeds;

#[derive(Debug, Serialize)]
pub struct Versions {
    pub mftc_core: &'static str,
    pub mftc_cli: &'static str,
}

/// Written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// sha256 of the config file bytes; of the built-in config's JSON when
    /// no file was given.
    pub config_digest: String,
    pub effective_config_digest: String,
    pub seeds: Seeds,
    pub versions: Versions,
    pub revision: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn revision() -> String {
    let rev = option_env!("MFTC_REVISION").unwrap_or("unknown");
    format!("v{}-{rev}", env!("CARGO_PKG_VERSION"))
}

pub fn versions() -> Versions {
    Versions {
        mftc_core: mftc_core::VERSION,
        mftc_cli: env!("CARGO_PKG_VERSION"),
    }
}

pub fn relative_outputs(out: &Path, files: &[PathBuf]) -> Vec<String> {
    files
        .iter()
        .map(|p| p.strip_prefix(out).unwrap_or(p).display().to_string())
        .collect()
}
