//! Run manifests: every command writes one next to its artifacts, and the
//! artifact directory is named after the manifest hash so identical
//! settings land in (and can resume from) the same place.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rca_core::pipeline::BenchParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// The settings that define a run. The hash covers everything except the
/// timestamp and the output root: when and where artifacts are written does
/// not change what they are.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Unix seconds at creation. Not part of the hash.
    pub created_unix: u64,
    /// Output root as given. Not part of the hash.
    pub out_root: String,
    /// Plant config path as given, or "bundled".
    pub config_path: String,
    /// Content hash of the resolved config.
    pub config_hash: String,
    pub spec: CommandSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum CommandSpec {
    Simulate {
        seed: u64,
        t_start: usize,
        duration: usize,
    },
    Inject {
        seed: u64,
        kind: String,
        t_i: usize,
        duration: usize,
        tau: usize,
        trailing: usize,
    },
    Fit {
        seed: u64,
        train_runs: usize,
        train_minutes: usize,
        lags: Vec<u32>,
        mode: String,
    },
    Attribute {
        model_hash: String,
        trace_hash: String,
        t: usize,
        agg: String,
        seed: u64,
        samples: usize,
        permutations: usize,
    },
    Explain {
        model_hash: String,
        trace_hash: String,
        t: usize,
        nodes: Vec<String>,
        seed: u64,
        samples: usize,
        permutations: usize,
    },
    Report {
        rows_hash: String,
        ks: Vec<usize>,
        max_delay: i64,
    },
    Bench {
        truncated: Vec<u32>,
        non_truncated: Vec<u32>,
        heuristic: bool,
        params: BenchParams,
    },
}

impl CommandSpec {
    pub fn name(&self) -> &'static str {
        match self {
            CommandSpec::Simulate { .. } => "simulate",
            CommandSpec::Inject { .. } => "inject",
            CommandSpec::Fit { .. } => "fit",
            CommandSpec::Attribute { .. } => "attribute",
            CommandSpec::Explain { .. } => "explain",
            CommandSpec::Report { .. } => "report",
            CommandSpec::Bench { .. } => "bench",
        }
    }
}

impl RunManifest {
    pub fn new(
        out_root: String,
        config_path: String,
        config_hash: String,
        spec: CommandSpec,
    ) -> Self {
        let created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix,
            out_root,
            config_path,
            config_hash,
            spec,
        }
    }

    /// Hash of the run-defining settings, hex encoded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.created_unix = 0;
        canonical.out_root = String::new();
        let text = toml::to_string(&canonical).expect("manifest serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    /// Directory name for this run's artifacts: command plus short hash.
    pub fn dir_name(&self) -> String {
        format!("{}-{}", self.spec.name(), &self.hash()[..12])
    }

    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        fs::write(path, toml::to_string_pretty(self).expect("manifest serializes"))
    }
}

/// Content hash of an arbitrary artifact file.
pub fn file_hash(path: &Path) -> Result<String, std::io::Error> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> RunManifest {
        RunManifest::new(
            "out".into(),
            "bundled".into(),
            "abc".into(),
            CommandSpec::Simulate { seed: 3, t_start: 0, duration: 100 },
        )
    }

    #[test]
    fn hash_ignores_timestamp_and_out_root() {
        let mut a = manifest();
        let mut b = manifest();
        a.created_unix = 1;
        b.created_unix = 2;
        b.out_root = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        assert!(a.dir_name().starts_with("simulate-"));
    }

    #[test]
    fn hash_tracks_every_setting() {
        let base = manifest();
        let mut seed = manifest();
        seed.spec = CommandSpec::Simulate { seed: 4, t_start: 0, duration: 100 };
        let mut cfg = manifest();
        cfg.config_hash = "def".into();
        assert_ne!(base.hash(), seed.hash());
        assert_ne!(base.hash(), cfg.hash());
    }

    #[test]
    fn manifests_round_trip_through_toml() {
        let m = RunManifest::new(
            "out".into(),
            "bundled".into(),
            "abc".into(),
            CommandSpec::Bench {
                truncated: vec![0, 3, 7],
                non_truncated: vec![],
                heuristic: true,
                params: BenchParams::desk(1),
            },
        );
        let text = toml::to_string_pretty(&m).unwrap();
        let back: RunManifest = toml::from_str(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.hash(), m.hash());
    }
}
