//! JSON configuration: schema, defaults, validation and digests.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manager::{Mode, Policy};
use crate::model::{MeshCoordinate, PeType, MAX_MESH_DIM};
use crate::pe::ServiceModelParams;
use crate::workload::{ArrivalSchedule, Mix, OperandModel, TaskTemplate};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Semantic(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub width: u8,
    pub height: u8,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self { width: 3, height: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrrConfig {
    pub node: MeshCoordinate,
    #[serde(default)]
    pub pe_type: Option<PeType>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    pub manager: MeshCoordinate,
    #[serde(default)]
    pub hosts: Vec<MeshCoordinate>,
    #[serde(default)]
    pub prrs: Vec<PrrConfig>,
}

impl Default for Roles {
    fn default() -> Self {
        let c = MeshCoordinate::new;
        Self {
            manager: c(0, 0),
            hosts: vec![c(0, 1), c(0, 2), c(1, 0), c(2, 0)],
            prrs: vec![
                PrrConfig { node: c(1, 1), pe_type: None },
                PrrConfig { node: c(2, 1), pe_type: Some(PeType::Gcd) },
                PrrConfig { node: c(1, 2), pe_type: Some(PeType::Rsa) },
                PrrConfig { node: c(2, 2), pe_type: None },
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub buffer_depth: usize,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self { buffer_depth: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub n_tasks: usize,
    pub mix: Mix,
    #[serde(alias = "R")]
    pub num_requests: u32,
    #[serde(alias = "C")]
    pub think_cycles: u64,
    pub arrival: ArrivalSchedule,
    pub operands: OperandModel,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            n_tasks: 4,
            mix: Mix::Mixed,
            num_requests: 16,
            think_cycles: 300,
            arrival: ArrivalSchedule::Simultaneous,
            operands: OperandModel::default(),
        }
    }
}

impl WorkloadConfig {
    pub fn template(&self) -> TaskTemplate {
        TaskTemplate { num_requests: self.num_requests, think_cycles: self.think_cycles }
    }
}

pub const DEFAULT_WATCHDOG: u64 = 50_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub mesh: MeshConfig,
    pub roles: Roles,
    pub mode: Mode,
    pub router: RouterConfig,
    pub service: ServiceModelParams,
    /// Per-slot request queue depth of every PE.
    pub pe_queue_capacity: usize,
    pub policy: Policy,
    pub workload: WorkloadConfig,
    pub seed: u64,
    pub watchdog: u64,
    pub trace: Option<String>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mesh: MeshConfig::default(),
            roles: Roles::default(),
            mode: Mode::Vnoc,
            router: RouterConfig::default(),
            service: ServiceModelParams::default(),
            pe_queue_capacity: 4,
            policy: Policy::default(),
            workload: WorkloadConfig::default(),
            seed: 1,
            watchdog: DEFAULT_WATCHDOG,
            trace: None,
        }
    }
}

impl SimConfig {
    pub fn with_mode(&self, mode: Mode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn with_tasks(&self, n_tasks: usize) -> Self {
        let mut c = self.clone();
        c.workload.n_tasks = n_tasks;
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Semantic(m));
        let (w, h) = (self.mesh.width, self.mesh.height);
        if w == 0 || h == 0 || w > MAX_MESH_DIM || h > MAX_MESH_DIM {
            return bad(format!("mesh {w}x{h} outside 1..={MAX_MESH_DIM}"));
        }
        let mut seen = BTreeSet::new();
        let nodes = std::iter::once(("manager", self.roles.manager))
            .chain(self.roles.hosts.iter().map(|&n| ("host", n)))
            .chain(self.roles.prrs.iter().map(|p| ("prr", p.node)));
        for (role, node) in nodes {
            if node.x >= w || node.y >= h {
                return bad(format!("{role} node {node} is outside the {w}x{h} mesh"));
            }
            if !seen.insert(node) {
                return bad(format!("node {node} has more than one role"));
            }
        }
        if self.roles.hosts.is_empty() {
            return bad("host list is empty".into());
        }
        if self.router.buffer_depth == 0 {
            return bad("router.buffer_depth must be at least 1".into());
        }
        if self.pe_queue_capacity == 0 {
            return bad("pe_queue_capacity must be at least 1".into());
        }
        if self.workload.n_tasks == 0 {
            return bad("workload.n_tasks must be at least 1".into());
        }
        if self.workload.num_requests == 0 {
            return bad("workload.num_requests must be at least 1".into());
        }
        if self.workload.operands.rsa_n == 0 {
            return bad("workload.operands.rsa_n must be nonzero".into());
        }
        if self.watchdog == 0 {
            return bad("watchdog must be positive".into());
        }
        Ok(())
    }

    /// FNV-1a 64 of the canonical JSON form, trace path excluded.
    pub fn digest(&self) -> u64 {
        let canonical = SimConfig { trace: None, ..self.clone() };
        fnv1a64(serde_json::to_string(&canonical).expect("config serializes").as_bytes())
    }

    /// Digest of everything except mode and trace path: two runs with equal
    /// workload digests are a valid baseline/vnoc pair.
    pub fn workload_digest(&self) -> u64 {
        SimConfig { mode: Mode::Vnoc, ..self.clone() }.digest()
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn parse_config(text: &str) -> Result<SimConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: SimConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = match e.path().to_string() {
            p if p == "?" || p == "." => "(document)".to_string(),
            p => p,
        };
        ConfigError::Schema { path, message: e.into_inner().to_string() }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config(r#"{"mesh": {"width": 3, "height": 3}, "mode": "vnoc", "workload": {"n_tasks": 4}}"#).unwrap();
        assert_eq!(cfg, SimConfig::default());
    }

    #[test]
    fn out_of_bounds_host() {
        let text = r#"{"roles": {"manager": {"x": 0, "y": 0}, "hosts": [{"x": 5, "y": 5}]}}"#;
        assert!(matches!(parse_config(text), Err(ConfigError::Semantic(_))));
    }

    #[test]
    fn overlapping_roles() {
        let text = r#"{"roles": {"manager": {"x": 0, "y": 0}, "hosts": [{"x": 0, "y": 1}],
            "prrs": [{"node": {"x": 0, "y": 1}, "pe_type": "GCD"}]}}"#;
        assert!(matches!(parse_config(text), Err(ConfigError::Semantic(m)) if m.contains("more than one role")));
    }

    #[test]
    fn missing_manager_and_empty_hosts() {
        let err = parse_config(r#"{"roles": {"hosts": [{"x": 0, "y": 1}]}}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Schema { .. }), "{err}");
        let err = parse_config(r#"{"roles": {"manager": {"x": 0, "y": 0}}}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Semantic(_)));
    }

    #[test]
    fn schema_errors_carry_a_path() {
        let err = parse_config(r#"{"workload": {"n_tasks": "four"}}"#).unwrap_err();
        let ConfigError::Schema { path, .. } = err else { panic!("{err}") };
        assert_eq!(path, "workload.n_tasks");
        let err = parse_config(r#"{"router": {"depth": 4}}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Schema { .. }));
        let err = parse_config("{bad").unwrap_err();
        assert!(matches!(err, ConfigError::Schema { ref path, .. } if path == "(document)"), "{err}");
    }

    #[test]
    fn digest_is_stable_and_mode_sensitive() {
        let text = r#"{"seed": 9}"#;
        let a = parse_config(text).unwrap();
        let b = parse_config(text).unwrap();
        assert_eq!(a.digest(), b.digest());
        let base = a.with_mode(Mode::Baseline);
        assert_ne!(a.digest(), base.digest());
        assert_eq!(a.workload_digest(), base.workload_digest());
        let traced = SimConfig { trace: Some("t.csv".into()), ..a.clone() };
        assert_eq!(traced.digest(), a.digest());
        assert_ne!(a.with_tasks(5).workload_digest(), a.workload_digest());
    }

    #[test]
    fn short_workload_aliases() {
        let cfg = parse_config(r#"{"workload": {"R": 3, "C": 0}}"#).unwrap();
        assert_eq!(cfg.workload.template(), TaskTemplate { num_requests: 3, think_cycles: 0 });
    }
}
