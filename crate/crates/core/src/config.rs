//! Scenario configuration, read from TOML. Every key has a default, so an empty file is a
//! valid two-datacenter scenario.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simnet::Topology;
use crate::trace::sha256_hex;
use crate::types::{ReadLevel, WriteLevel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultTarget {
    /// Whoever leads the group when the fault fires.
    Leader { dc: u16, partition: u16 },
    Xc { dc: u16, partition: u16 },
    Node { id: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub at_ms: f64,
    pub down_ms: f64,
    pub target: FaultTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptOpKind {
    Get,
    Put,
}

/// One step of a scripted client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptOp {
    pub op: ScriptOpKind,
    pub key: String,
    pub dc: u16,
    /// Replica slot for reads; uniform when absent.
    #[serde(default)]
    pub replica: Option<u16>,
    #[serde(default)]
    pub read_level: Option<ReadLevel>,
    #[serde(default)]
    pub write_level: Option<WriteLevel>,
    #[serde(default)]
    pub hlc_mode: Option<bool>,
    /// Idle time before issuing this step.
    #[serde(default)]
    pub pause_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientScript {
    pub home: u16,
    pub ops: Vec<ScriptOp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub dcs: u16,
    pub partitions: u16,
    pub replicas: u16,
    pub clients_per_dc: u32,
    pub local_prob: f64,
    pub write_prob: f64,
    pub read_level: ReadLevel,
    pub write_level: WriteLevel,
    pub hlc_mode: bool,
    /// Physical-clock writes wait on the session vectors. Off sends zero vectors.
    pub write_blocking: bool,
    pub xdc_delay_ms: f64,
    pub xdc_jitter_ms: f64,
    pub xdc_fifo: bool,
    pub intra_delay_ms: [f64; 2],
    pub skew_ms: f64,
    pub drift: f64,
    /// Extra clock offset per datacenter, added to every node's sampled offset.
    pub dc_offsets_ms: Vec<f64>,
    pub drop_prob: f64,
    pub dup_prob: f64,
    /// Stop issuing after this much simulated time; 0 means no time limit.
    pub duration_ms: f64,
    /// Stop issuing after this many operations in total; 0 means no limit.
    pub ops: u64,
    pub key_space: u64,
    pub service_ms: f64,
    pub tick_ms: f64,
    pub client_timeout_ms: f64,
    pub park_timeout_ms: Option<f64>,
    pub gc_window: usize,
    pub xc_retry_ms: f64,
    pub warmup_ms: f64,
    pub drain_limit_ms: f64,
    /// Draw random crash/restart faults from the seed.
    pub crash_faults: bool,
    pub fault_window_ms: f64,
    pub faults: Vec<FaultSpec>,
    pub trace_raft: bool,
    /// Scripted clients replace the random workload when present.
    pub scripts: Vec<ClientScript>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            dcs: 2,
            partitions: 4,
            replicas: 3,
            clients_per_dc: 40,
            local_prob: 1.0,
            write_prob: 0.5,
            read_level: ReadLevel::Eventual,
            write_level: WriteLevel::Eventual,
            hlc_mode: true,
            write_blocking: true,
            xdc_delay_ms: 7.5,
            xdc_jitter_ms: 0.0,
            xdc_fifo: true,
            intra_delay_ms: [0.2, 0.5],
            skew_ms: 0.0,
            drift: 0.0,
            dc_offsets_ms: Vec::new(),
            drop_prob: 0.0,
            dup_prob: 0.0,
            duration_ms: 0.0,
            ops: 5000,
            key_space: 1000,
            service_ms: 0.1,
            tick_ms: 1.0,
            client_timeout_ms: 500.0,
            park_timeout_ms: None,
            gc_window: 4,
            xc_retry_ms: 50.0,
            warmup_ms: 5.0,
            drain_limit_ms: 5000.0,
            crash_faults: false,
            fault_window_ms: 150.0,
            faults: Vec::new(),
            trace_raft: false,
            scripts: Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config encode: {0}")]
    Encode(#[from] toml::ser::Error),
    #[error("bad override {0:?}: expected key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: SimConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    /// Applies `key=value` where the value is TOML (bare words are taken as strings).
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("just parsed"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut table = toml::Table::try_from(&*self)?;
        if !table.contains_key(key) && !KNOWN_OPTIONAL.contains(&key) {
            return Err(ConfigError::Invalid(format!("unknown key {key:?}")));
        }
        table.insert(key.to_string(), value);
        let next: SimConfig = toml::Value::Table(table).try_into()?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.dcs == 0 || self.partitions == 0 || self.replicas == 0 {
            return bad("dcs, partitions and replicas must be positive".into());
        }
        for (name, p) in [
            ("local_prob", self.local_prob),
            ("write_prob", self.write_prob),
            ("drop_prob", self.drop_prob),
            ("dup_prob", self.dup_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name}={p} outside [0, 1]"));
            }
        }
        if self.intra_delay_ms[0] > self.intra_delay_ms[1] || self.intra_delay_ms[0] < 0.0 {
            return bad(format!("intra_delay_ms {:?} is not a range", self.intra_delay_ms));
        }
        if self.tick_ms <= 0.0 {
            return bad("tick_ms must be positive".into());
        }
        if self.key_space == 0 {
            return bad("key_space must be positive".into());
        }
        if self.ops == 0 && self.duration_ms <= 0.0 && self.scripts.is_empty() {
            return bad("either ops or duration_ms must bound the run".into());
        }
        if !self.dc_offsets_ms.is_empty() && self.dc_offsets_ms.len() != self.dcs as usize {
            return bad("dc_offsets_ms needs one entry per datacenter".into());
        }
        for s in &self.scripts {
            if s.home >= self.dcs || s.ops.iter().any(|o| o.dc >= self.dcs) {
                return bad("script names a datacenter outside the topology".into());
            }
        }
        Ok(())
    }

    pub fn topology(&self) -> Topology {
        Topology::new(self.dcs, self.partitions, self.replicas)
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config encodes"))
    }
}

const KNOWN_OPTIONAL: &[&str] = &["park_timeout_ms"];
