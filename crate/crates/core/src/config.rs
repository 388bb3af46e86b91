//! Run configuration shared by every pipeline stage.
//!
//! The file is TOML with one table per stage. Keys are the field names of the
//! owning types, so `[sim] Re = 100` sets [`SimConfig::re`]. Unknown keys are
//! rejected with a suggestion for the closest known key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{EvalConfig, FingerprintConfig, HistSpec};
use crate::env::EnvConfig;
use crate::flowsim::SimConfig;
use crate::rrsac::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory with one `source_<k>.odrf` per source position.
    pub fields: PathBuf,
    /// Root of all other outputs.
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { fields: "fields".into(), out: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub fingerprint: FingerprintConfig,
    pub turn_pdf: HistSpec,
    pub velocity_pdf: HistSpec,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { fingerprint: FingerprintConfig::default(), turn_pdf: HistSpec::turn_vs_log_c(), velocity_pdf: HistSpec::agent_vs_flow_y() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
    pub paths: PathsConfig,
}

/// Known keys at every table path of the default config.
fn known_keys(v: &serde_json::Value, prefix: &str, out: &mut Vec<(String, Vec<String>)>) {
    if let serde_json::Value::Object(m) = v {
        out.push((prefix.to_string(), m.keys().cloned().collect()));
        for (k, child) in m {
            let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            known_keys(child, &p, out);
        }
    }
}

fn check_keys(v: &toml::Value, prefix: &str, known: &[(String, Vec<String>)]) -> Result<()> {
    let toml::Value::Table(t) = v else { return Ok(()) };
    let Some((_, keys)) = known.iter().find(|(p, _)| p == prefix) else { return Ok(()) };
    for (k, child) in t {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if !keys.contains(k) {
            let best = keys
                .iter()
                .map(|c| (strsim::jaro_winkler(&k.to_lowercase(), &c.to_lowercase()), c))
                .filter(|(s, _)| *s > 0.6)
                .max_by(|a, b| a.0.total_cmp(&b.0));
            let hint = best.map(|(_, c)| format!("; did you mean `{c}`?")).unwrap_or_default();
            return Err(Error::Config(format!("unknown key `{path}`{hint}")));
        }
        check_keys(child, &path, known)?;
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Value = toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {}", e.message())))?;
        let mut known = Vec::new();
        known_keys(&serde_json::to_value(Self::default()).expect("default config serialises"), "", &mut known);
        check_keys(&raw, "", &known)?;
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.fields, &mut cfg.paths.out] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.env.validate(None)?;
        self.train.validate(self.env.f)?;
        if self.eval.n_trials == 0 {
            return Err(Error::Config("eval.n_trials must be positive".into()));
        }
        if self.env.source_positions != self.sim.source_positions {
            return Err(Error::Config("env.source_positions must match sim.source_positions".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, paths excluded so that moving a
    /// run directory keeps its hash.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let serde_json::Value::Object(m) = &mut v {
            m.remove("paths");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }
}
