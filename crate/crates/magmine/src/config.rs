//! Run configuration: one nested JSON document covering every pipeline stage,
//! with dotted-path overrides and master-seed derivation of stage seeds.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mil::MilConfig;
use crate::mining::MiningConfig;
use crate::supervised::SupConfig;
use crate::synthgen::SynthConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    /// Single reproducibility knob: stage seeds left at 0 are derived from
    /// this seed and the stage name.
    pub master_seed: u64,
    /// Iteration count for the iterate recipe.
    pub iterations: usize,
    pub synth: SynthConfig,
    pub mil: MilConfig,
    pub sup: SupConfig,
    pub mining: MiningConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            master_seed: 0,
            iterations: 1,
            synth: SynthConfig::default(),
            mil: MilConfig::default(),
            sup: SupConfig::default(),
            mining: MiningConfig::default(),
        }
    }
}

/// Derives a stage seed from the master seed and the stage name.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Json { path: path.into(), source: e })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.mil.validate()?;
        self.sup.validate()?;
        self.mining.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        Ok(())
    }

    /// Fills every stage seed still at its 0 default from the master seed.
    /// Explicit nonzero stage seeds are kept.
    pub fn resolve_seeds(&mut self) {
        if self.synth.seed == 0 {
            self.synth.seed = stage_seed(self.master_seed, "synth");
        }
        if self.mil.seed == 0 {
            self.mil.seed = stage_seed(self.master_seed, "mil");
        }
        if self.sup.seed == 0 {
            self.sup.seed = stage_seed(self.master_seed, "sup");
        }
        if self.mining.seed == 0 {
            self.mining.seed = stage_seed(self.master_seed, "mining");
        }
    }

    /// Applies one `key=value` override, where the key is a dotted path into
    /// the JSON document (`mil.lr=1e-3`, `synth.num_normal=80`). The value is
    /// parsed as JSON, falling back to a plain string.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut node = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let map = node
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("override key '{key}': '{part}' is not an object")))?;
            if i + 1 == parts.len() {
                if !map.contains_key(*part) {
                    return Err(Error::Config(format!("override key '{key}': unknown field '{part}'")));
                }
                map.insert(part.to_string(), value);
                break;
            }
            node = map
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("override key '{key}': unknown field '{part}'")))?;
        }
        *self = serde_json::from_value(doc)
            .map_err(|e| Error::Config(format!("override '{spec}': {e}")))?;
        self.validate()
    }

    /// Resolved config as a JSON value for embedding into artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Hex SHA-256 of a file's bytes; the audit-trail input hash.
pub fn content_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
