//! Per-cluster profiles: the hardware and software facts that make a launch
//! script non-portable.
//!
//! Profiles are plain data. The nine bundled clusters live in
//! `data/profiles.json`; new machines are added by extending that document (or
//! passing another one and merging it), never by touching code.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::kinds::{Launcher, ModuleSystem, PythonEnv, Scheduler};

const BUNDLED_PROFILES: &str = include_str!("../data/profiles.json");

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("profile document is malformed at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("profile `{record}` has invalid field `{field}`: {reason}")]
    InvalidField {
        record: String,
        field: &'static str,
        reason: String,
    },
    #[error("registry conflict: name `{name}` is claimed by both `{first}` and `{second}`")]
    Conflict {
        name: String,
        first: String,
        second: String,
    },
    #[error("unknown cluster `{name}`; valid clusters: {}", valid.join(", "))]
    UnknownCluster { name: String, valid: Vec<String> },
}

/// Facts about one machine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterProfile {
    pub id: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    pub scheduler: Scheduler,
    pub default_launcher: Launcher,
    pub gpus_per_node: u32,
    pub gpu_type: String,
    /// Whether the scheduler exports the submitting shell's environment to
    /// every allocated node.
    pub env_propagation: bool,
    pub module_system: ModuleSystem,
    pub python_env: PythonEnv,
    pub max_walltime_minutes: u32,
    #[serde(default)]
    pub known_faults: Vec<String>,
    /// Where the numbers came from, for values not observed first-hand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sources: Option<String>,
}

impl ClusterProfile {
    fn validate(&self) -> Result<(), RegistryError> {
        let invalid = |field, reason: &str| RegistryError::InvalidField {
            record: self.id.clone(),
            field,
            reason: reason.to_string(),
        };
        if self.id.is_empty() || self.id != self.id.to_lowercase() {
            return Err(invalid("id", "must be a non-empty lowercase name"));
        }
        if self.gpus_per_node == 0 {
            return Err(invalid("gpus_per_node", "must be at least 1"));
        }
        if self.max_walltime_minutes == 0 {
            return Err(invalid("max_walltime_minutes", "must be at least 1"));
        }
        if self.aliases.iter().any(|a| a.trim().is_empty()) {
            return Err(invalid("aliases", "aliases must be non-empty"));
        }
        Ok(())
    }
}

/// Immutable set of cluster profiles keyed by id, with a case-insensitive
/// alias index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProfileSet {
    profiles: BTreeMap<String, ClusterProfile>,
    /// Lowercased id or alias -> id.
    names: BTreeMap<String, String>,
}

impl ProfileSet {
    /// The nine bundled clusters.
    pub fn bundled() -> ProfileSet {
        load_profiles(BUNDLED_PROFILES).expect("bundled profile document is valid")
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ClusterProfile> {
        self.profiles.get(id)
    }

    /// Profiles in id order.
    pub fn iter(&self) -> impl Iterator<Item = &ClusterProfile> {
        self.profiles.values()
    }

    pub fn ids(&self) -> Vec<String> {
        self.profiles.keys().cloned().collect()
    }

    /// Every accepted name (ids and aliases), lowercased.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }

    /// Exact, case-insensitive lookup on id or alias. Prefixes are not matched.
    pub fn resolve(&self, name: &str) -> Result<&ClusterProfile, RegistryError> {
        self.names
            .get(&name.trim().to_lowercase())
            .and_then(|id| self.profiles.get(id))
            .ok_or_else(|| RegistryError::UnknownCluster {
                name: name.to_string(),
                valid: self.ids(),
            })
    }

    pub fn insert(&mut self, profile: ClusterProfile) -> Result<(), RegistryError> {
        profile.validate()?;
        let mut claimed = vec![profile.id.to_lowercase()];
        claimed.extend(profile.aliases.iter().map(|a| a.trim().to_lowercase()));
        for (i, name) in claimed.iter().enumerate() {
            if let Some(owner) = self.names.get(name) {
                return Err(RegistryError::Conflict {
                    name: name.clone(),
                    first: owner.clone(),
                    second: profile.id.clone(),
                });
            }
            if claimed[..i].contains(name) {
                return Err(RegistryError::Conflict {
                    name: name.clone(),
                    first: profile.id.clone(),
                    second: profile.id.clone(),
                });
            }
        }
        for name in claimed {
            self.names.insert(name, profile.id.clone());
        }
        self.profiles.insert(profile.id.clone(), profile);
        Ok(())
    }

    /// Adds every profile of `other`; fails on the first id or alias collision.
    pub fn merge(&mut self, other: ProfileSet) -> Result<(), RegistryError> {
        for profile in other.profiles.into_values() {
            self.insert(profile)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let records: Vec<&ClusterProfile> = self.profiles.values().collect();
        serde_json::to_string_pretty(&records).expect("profiles serialize")
    }
}

/// Parses a profile document: a JSON array of profile records.
///
/// A blank document is an empty set.
pub fn load_profiles(source: &str) -> Result<ProfileSet, RegistryError> {
    let mut set = ProfileSet::default();
    if source.trim().is_empty() {
        return Ok(set);
    }
    let records: Vec<ClusterProfile> =
        serde_json::from_str(source).map_err(|e| RegistryError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
    for record in records {
        set.insert(record)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, aliases: &[&str]) -> String {
        format!(
            r#"{{"id":"{id}","aliases":{aliases:?},"scheduler":"slurm","default_launcher":"torchrun",
               "gpus_per_node":4,"gpu_type":"A100","env_propagation":true,"module_system":"lmod",
               "python_env":"venv","max_walltime_minutes":60}}"#
        )
    }

    #[test]
    fn bundled_has_nine_clusters() {
        let set = ProfileSet::bundled();
        assert_eq!(set.len(), 9);
        assert_eq!(set.get("perlmutter").unwrap().gpus_per_node, 4);
        assert_eq!(set.get("lonestar6").unwrap().gpus_per_node, 3);
        assert!(!set.get("deltaai").unwrap().env_propagation);
        assert_eq!(set.get("aurora").unwrap().scheduler, Scheduler::Pbs);
    }

    #[test]
    fn empty_document_is_empty_set() {
        assert!(load_profiles("").unwrap().is_empty());
        assert!(load_profiles("  \n").unwrap().is_empty());
        assert!(load_profiles("[]").unwrap().is_empty());
    }

    #[test]
    fn resolve_by_alias_and_case() {
        let set = ProfileSet::bundled();
        assert_eq!(set.resolve("LS6").unwrap().id, "lonestar6");
        assert_eq!(set.resolve("perlmutter").unwrap().id, "perlmutter");
        assert_eq!(set.resolve("Bridges-2").unwrap().id, "bridges2");
    }

    #[test]
    fn resolve_rejects_unknown_and_prefixes() {
        let set = ProfileSet::bundled();
        match set.resolve("frontier") {
            Err(RegistryError::UnknownCluster { valid, .. }) => assert_eq!(valid.len(), 9),
            other => panic!("expected unknown-cluster, got {other:?}"),
        }
        assert!(set.resolve("perl").is_err());
    }

    #[test]
    fn duplicate_alias_is_conflict_naming_both() {
        let doc = format!("[{}, {}]", record("alpha", &["a1"]), record("beta", &["A1"]));
        match load_profiles(&doc) {
            Err(RegistryError::Conflict { first, second, .. }) => {
                assert_eq!(first, "alpha");
                assert_eq!(second, "beta");
            }
            other => panic!("expected conflict, got {other:?}"),
        }
    }

    #[test]
    fn alias_colliding_with_id_is_conflict() {
        let doc = format!("[{}, {}]", record("alpha", &[]), record("beta", &["alpha"]));
        assert!(matches!(load_profiles(&doc), Err(RegistryError::Conflict { .. })));
    }

    #[test]
    fn malformed_record_reports_location() {
        let doc = "[\n  {\"id\": \"x\", \"gpus_per_node\": \"four\"}\n]";
        match load_profiles(doc) {
            Err(RegistryError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn zero_gpus_is_invalid() {
        let doc = format!("[{}]", record("alpha", &[]).replace("\"gpus_per_node\":4", "\"gpus_per_node\":0"));
        assert!(matches!(
            load_profiles(&doc),
            Err(RegistryError::InvalidField { field: "gpus_per_node", .. })
        ));
    }

    #[test]
    fn every_id_resolves_and_round_trips() {
        let set = ProfileSet::bundled();
        for id in set.ids() {
            assert_eq!(set.resolve(&id).unwrap().id, id);
        }
        let reloaded = load_profiles(&set.to_json()).unwrap();
        assert_eq!(reloaded, set);
    }
}
