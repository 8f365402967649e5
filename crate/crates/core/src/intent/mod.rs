//! Turning user input into a validated [`JobSpec`].
//!
//! Input arrives as free text ([`extract`]), as an existing launch script
//! ([`parse_script`]) or as explicit flags. All three produce a
//! [`PartialJobSpec`]; [`missing_fields`] says what still has to be asked for
//! and [`finalize`] checks the result against a cluster profile.

mod extract;
mod numbers;
mod script;
pub mod shell;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::kinds::{Framework, Launcher, Provenance, Strategy};
use crate::registry::ClusterProfile;

pub use extract::{extract, Extractor, RuleExtractor};
pub use numbers::parse_count;
pub use script::parse_script;

/// Port used when neither the user nor the template names one.
pub const DEFAULT_MASTER_PORT: u16 = 29500;

#[derive(Debug, thiserror::Error)]
pub enum IntentError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("incomplete job description; missing: {}", missing.join(", "))]
    Incomplete { missing: Vec<&'static str> },
    #[error("inconsistent topology: {0}")]
    InconsistentTopology(String),
    #[error(
        "{requested} GPUs per node exceeds the {limit} GPUs per node available on {cluster}{}",
        suggestion_text(suggestions)
    )]
    Capacity {
        cluster: String,
        requested: u32,
        limit: u32,
        /// World-size-preserving (nodes, gpus_per_node) splits that fit.
        suggestions: Vec<(u32, u32)>,
    },
    #[error("job names cluster `{named}` but was finalized against `{profile}`")]
    ClusterMismatch { named: String, profile: String },
    #[error("invalid value for {field}: {reason}")]
    InvalidField { field: &'static str, reason: String },
}

fn suggestion_text(suggestions: &[(u32, u32)]) -> String {
    if suggestions.is_empty() {
        return String::new();
    }
    let options: Vec<String> = suggestions
        .iter()
        .map(|(n, g)| format!("nodes={n} x gpus_per_node={g}"))
        .collect();
    format!("; try {}", options.join(" or "))
}

/// Factorizations `nodes * per_node == world` with `per_node <= limit`,
/// largest per-node count first.
pub fn capacity_suggestions(world: u32, limit: u32) -> Vec<(u32, u32)> {
    (1..=limit.min(world))
        .rev()
        .filter(|g| world.is_multiple_of(*g))
        .map(|g| (world / g, g))
        .collect()
}

/// What is known about a job so far. Every present field is type-valid.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartialJobSpec {
    pub cluster: Option<String>,
    pub framework: Option<Framework>,
    pub strategy: Option<Strategy>,
    pub launcher: Option<Launcher>,
    pub nodes: Option<u32>,
    pub gpus_per_node: Option<u32>,
    pub total_gpus: Option<u32>,
    pub master_port: Option<u16>,
    pub entry_script: Option<String>,
    pub train_args: String,
    pub deepspeed_config: Option<String>,
}

/// Names used by [`missing_fields`], in prompting order.
pub const REQUIRED_FIELDS: [&str; 6] = [
    "cluster",
    "framework",
    "strategy",
    "nodes",
    "gpus_per_node",
    "entry_script",
];

impl PartialJobSpec {
    pub fn is_empty(&self) -> bool {
        *self == PartialJobSpec::default()
    }

    /// Fills every field that is absent here from `other`.
    pub fn fill_from(&mut self, other: &PartialJobSpec) {
        macro_rules! fill {
            ($($f:ident),*) => { $( if self.$f.is_none() { self.$f = other.$f.clone(); } )* };
        }
        fill!(
            cluster,
            framework,
            strategy,
            launcher,
            nodes,
            gpus_per_node,
            total_gpus,
            master_port,
            entry_script,
            deepspeed_config
        );
        if self.train_args.is_empty() {
            self.train_args = other.train_args.clone();
        }
    }

    /// Overwrites fields with every field present in `other`.
    pub fn override_with(&mut self, other: &PartialJobSpec) {
        let mut merged = other.clone();
        merged.fill_from(self);
        *self = merged;
    }

    /// Drops values that violate their type constraints, returning the names
    /// of the dropped fields.
    pub fn sanitize(&mut self) -> Vec<&'static str> {
        let mut dropped = Vec::new();
        let mut check_count = |v: &mut Option<u32>, name| {
            if *v == Some(0) {
                *v = None;
                dropped.push(name);
            }
        };
        check_count(&mut self.nodes, "nodes");
        check_count(&mut self.gpus_per_node, "gpus_per_node");
        check_count(&mut self.total_gpus, "total_gpus");
        if matches!(self.master_port, Some(p) if p < 1024) {
            self.master_port = None;
            dropped.push("master_port");
        }
        for (field, name) in [
            (&mut self.cluster, "cluster"),
            (&mut self.entry_script, "entry_script"),
            (&mut self.deepspeed_config, "deepspeed_config"),
        ] {
            if matches!(field, Some(s) if s.trim().is_empty()) {
                *field = None;
                dropped.push(name);
            }
        }
        dropped
    }

    /// Sets one field from its textual form, as typed at a prompt or given
    /// via `--answers`.
    pub fn set_field(&mut self, name: &str, value: &str) -> Result<(), IntentError> {
        let value = value.trim();
        let invalid = |field: &'static str, reason: String| IntentError::InvalidField { field, reason };
        match name {
            "cluster" => self.cluster = Some(value.to_lowercase()),
            "framework" => {
                self.framework = Some(value.parse().map_err(|e| invalid("framework", format!("{e}")))?)
            }
            "strategy" => {
                self.strategy = Some(value.parse().map_err(|e| invalid("strategy", format!("{e}")))?)
            }
            "launcher" => {
                self.launcher = Some(value.parse().map_err(|e| invalid("launcher", format!("{e}")))?)
            }
            "nodes" | "gpus_per_node" | "total_gpus" => {
                let n = parse_count(value)
                    .filter(|n| *n >= 1)
                    .ok_or_else(|| invalid("count", format!("`{value}` is not a positive count")))?;
                match name {
                    "nodes" => self.nodes = Some(n),
                    "gpus_per_node" => self.gpus_per_node = Some(n),
                    _ => self.total_gpus = Some(n),
                }
            }
            "master_port" => {
                let p: u16 = value
                    .parse()
                    .ok()
                    .filter(|p| *p >= 1024)
                    .ok_or_else(|| invalid("master_port", format!("`{value}` is not in 1024..=65535")))?;
                self.master_port = Some(p);
            }
            "entry_script" => self.entry_script = Some(value.to_string()),
            "train_args" => self.train_args = value.to_string(),
            "deepspeed_config" => self.deepspeed_config = Some(value.to_string()),
            other => {
                return Err(IntentError::InvalidField {
                    field: "name",
                    reason: format!("unknown field `{other}`"),
                })
            }
        }
        Ok(())
    }

    fn derived_framework(&self) -> Option<Framework> {
        self.framework
            .or_else(|| self.launcher.map(Launcher::implied_framework))
    }

    fn derived_strategy(&self) -> Option<Strategy> {
        self.strategy
            .or_else(|| self.derived_framework().map(|_| Strategy::Ddp))
    }
}

/// Required fields that are neither present nor derivable, in prompting order.
pub fn missing_fields(p: &PartialJobSpec) -> Vec<&'static str> {
    let mut missing = Vec::new();
    if p.cluster.is_none() {
        missing.push("cluster");
    }
    if p.derived_framework().is_none() {
        missing.push("framework");
    }
    if p.derived_strategy().is_none() {
        missing.push("strategy");
    }
    if p.nodes.is_none() && !(p.total_gpus.is_some() && p.gpus_per_node.is_some()) {
        missing.push("nodes");
    }
    if p.gpus_per_node.is_none() && !(p.total_gpus.is_some() && p.nodes.is_some()) {
        missing.push("gpus_per_node");
    }
    if p.entry_script.is_none() {
        missing.push("entry_script");
    }
    missing
}

/// A complete, validated job description bound to one cluster.
///
/// Fields are private so the topology invariants hold by construction; the
/// world size is always `nodes * gpus_per_node`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct JobSpec {
    cluster: String,
    framework: Framework,
    strategy: Strategy,
    launcher: Launcher,
    nodes: u32,
    gpus_per_node: u32,
    master_port: u16,
    master_port_source: Provenance,
    entry_script: String,
    train_args: String,
    deepspeed_config: Option<String>,
}

impl JobSpec {
    pub fn cluster(&self) -> &str {
        &self.cluster
    }
    pub fn framework(&self) -> Framework {
        self.framework
    }
    pub fn strategy(&self) -> Strategy {
        self.strategy
    }
    pub fn launcher(&self) -> Launcher {
        self.launcher
    }
    pub fn nodes(&self) -> u32 {
        self.nodes
    }
    pub fn gpus_per_node(&self) -> u32 {
        self.gpus_per_node
    }
    pub fn world_size(&self) -> u32 {
        self.nodes * self.gpus_per_node
    }
    pub fn master_port(&self) -> u16 {
        self.master_port
    }
    /// Whether the port came from the user rather than the default.
    pub fn master_port_source(&self) -> Provenance {
        self.master_port_source
    }
    pub fn entry_script(&self) -> &str {
        &self.entry_script
    }
    pub fn train_args(&self) -> &str {
        &self.train_args
    }
    pub fn deepspeed_config(&self) -> Option<&str> {
        self.deepspeed_config.as_deref()
    }

    /// Entry script followed by the training arguments, if any.
    pub fn command_tail(&self) -> String {
        if self.train_args.is_empty() {
            self.entry_script.clone()
        } else {
            format!("{} {}", self.entry_script, self.train_args)
        }
    }

    /// The partial spec that finalizes back to this one.
    pub fn to_partial(&self) -> PartialJobSpec {
        PartialJobSpec {
            cluster: Some(self.cluster.clone()),
            framework: Some(self.framework),
            strategy: Some(self.strategy),
            launcher: Some(self.launcher),
            nodes: Some(self.nodes),
            gpus_per_node: Some(self.gpus_per_node),
            total_gpus: None,
            master_port: (self.master_port_source == Provenance::User).then_some(self.master_port),
            entry_script: Some(self.entry_script.clone()),
            train_args: self.train_args.clone(),
            deepspeed_config: self.deepspeed_config.clone(),
        }
    }

    /// Short human-readable description used for similarity matching.
    pub fn description(&self) -> String {
        let mut text = format!(
            "{} {} {} {} {} nodes {} gpus per node {}",
            self.cluster,
            self.framework,
            self.strategy,
            self.launcher,
            self.nodes,
            self.gpus_per_node,
            self.entry_script
        );
        if !self.train_args.is_empty() {
            text.push(' ');
            text.push_str(&self.train_args);
        }
        text
    }
}

impl fmt::Display for JobSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{} {}x{} port {} {}",
            self.cluster,
            self.framework,
            self.strategy,
            self.launcher,
            self.nodes,
            self.gpus_per_node,
            self.master_port,
            self.command_tail()
        )
    }
}

fn names_profile(name: &str, profile: &ClusterProfile) -> bool {
    let name = name.trim().to_lowercase();
    name == profile.id || profile.aliases.iter().any(|a| a.to_lowercase() == name)
}

/// Completes `p` against `profile`, deriving counts and defaults.
pub fn finalize(p: &PartialJobSpec, profile: &ClusterProfile) -> Result<JobSpec, IntentError> {
    let missing = missing_fields(p);
    if !missing.is_empty() {
        return Err(IntentError::Incomplete { missing });
    }
    let named = p.cluster.as_deref().unwrap_or_default();
    if !names_profile(named, profile) {
        return Err(IntentError::ClusterMismatch {
            named: named.to_string(),
            profile: profile.id.clone(),
        });
    }

    let (nodes, per_node) = match (p.nodes, p.gpus_per_node, p.total_gpus) {
        (Some(n), Some(g), Some(t)) => {
            if n.checked_mul(g) != Some(t) {
                return Err(IntentError::InconsistentTopology(format!(
                    "{n} nodes x {g} GPUs per node is not {t} GPUs in total"
                )));
            }
            (n, g)
        }
        (Some(n), Some(g), None) => (n, g),
        (Some(n), None, Some(t)) => {
            if t % n != 0 {
                return Err(IntentError::InconsistentTopology(format!(
                    "{t} GPUs in total cannot be split evenly over {n} nodes"
                )));
            }
            (n, t / n)
        }
        (None, Some(g), Some(t)) => {
            if t % g != 0 {
                return Err(IntentError::InconsistentTopology(format!(
                    "{t} GPUs in total is not a multiple of {g} GPUs per node"
                )));
            }
            (t / g, g)
        }
        _ => unreachable!("missing_fields guarantees a derivable topology"),
    };
    if nodes.checked_mul(per_node).is_none() {
        return Err(IntentError::InconsistentTopology(format!(
            "{nodes} x {per_node} overflows"
        )));
    }
    if per_node > profile.gpus_per_node {
        return Err(IntentError::Capacity {
            cluster: profile.id.clone(),
            requested: per_node,
            limit: profile.gpus_per_node,
            suggestions: capacity_suggestions(nodes * per_node, profile.gpus_per_node),
        });
    }

    let framework = p.derived_framework().expect("checked by missing_fields");
    let strategy = p.derived_strategy().expect("checked by missing_fields");
    let launcher = p
        .launcher
        .or_else(|| framework.own_launcher())
        .unwrap_or(profile.default_launcher);
    let (master_port, master_port_source) = match p.master_port {
        Some(port) if port >= 1024 => (port, Provenance::User),
        Some(port) => {
            return Err(IntentError::InvalidField {
                field: "master_port",
                reason: format!("{port} is not in 1024..=65535"),
            })
        }
        None => (DEFAULT_MASTER_PORT, Provenance::Default),
    };

    Ok(JobSpec {
        cluster: profile.id.clone(),
        framework,
        strategy,
        launcher,
        nodes,
        gpus_per_node: per_node,
        master_port,
        master_port_source,
        entry_script: p.entry_script.clone().expect("checked by missing_fields"),
        train_args: p.train_args.trim().to_string(),
        deepspeed_config: p.deepspeed_config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::ProfileSet;

    fn table1() -> PartialJobSpec {
        PartialJobSpec {
            cluster: Some("perlmutter".into()),
            launcher: Some(Launcher::Torchrun),
            total_gpus: Some(8),
            nodes: Some(2),
            entry_script: Some("run_image_classification.py".into()),
            ..Default::default()
        }
    }

    #[test]
    fn launcher_implication_fills_framework_and_strategy() {
        assert!(missing_fields(&table1()).is_empty());
    }

    #[test]
    fn empty_spec_misses_everything_in_order() {
        assert_eq!(missing_fields(&PartialJobSpec::default()), REQUIRED_FIELDS);
    }

    #[test]
    fn counts_only() {
        let p = PartialJobSpec {
            nodes: Some(2),
            total_gpus: Some(8),
            ..Default::default()
        };
        assert_eq!(
            missing_fields(&p),
            ["cluster", "framework", "strategy", "entry_script"]
        );
    }

    #[test]
    fn finalize_derives_per_node_and_defaults_port() {
        let profiles = ProfileSet::bundled();
        let spec = finalize(&table1(), profiles.get("perlmutter").unwrap()).unwrap();
        assert_eq!(spec.gpus_per_node(), 4);
        assert_eq!(spec.world_size(), 8);
        assert_eq!(spec.master_port(), 29500);
        assert_eq!(spec.master_port_source(), Provenance::Default);
        assert_eq!(spec.framework(), Framework::Pytorch);
        assert_eq!(spec.strategy(), Strategy::Ddp);
    }

    #[test]
    fn indivisible_total_is_inconsistent() {
        let profiles = ProfileSet::bundled();
        let mut p = table1();
        p.total_gpus = Some(7);
        assert!(matches!(
            finalize(&p, profiles.get("perlmutter").unwrap()),
            Err(IntentError::InconsistentTopology(_))
        ));
    }

    #[test]
    fn capacity_error_names_limit() {
        let profiles = ProfileSet::bundled();
        let mut p = table1();
        p.cluster = Some("lonestar6".into());
        p.total_gpus = None;
        p.gpus_per_node = Some(4);
        match finalize(&p, profiles.get("lonestar6").unwrap()) {
            Err(IntentError::Capacity { limit, suggestions, .. }) => {
                assert_eq!(limit, 3);
                assert_eq!(suggestions, vec![(4, 2), (8, 1)]);
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn missing_entry_is_incomplete() {
        let profiles = ProfileSet::bundled();
        let mut p = table1();
        p.entry_script = None;
        match finalize(&p, profiles.get("perlmutter").unwrap()) {
            Err(IntentError::Incomplete { missing }) => assert_eq!(missing, ["entry_script"]),
            other => panic!("expected incomplete, got {other:?}"),
        }
    }

    #[test]
    fn alias_names_profile_and_mismatch_is_rejected() {
        let profiles = ProfileSet::bundled();
        let mut p = table1();
        p.cluster = Some("LS6".into());
        p.total_gpus = Some(6);
        let spec = finalize(&p, profiles.get("lonestar6").unwrap()).unwrap();
        assert_eq!(spec.cluster(), "lonestar6");
        assert!(matches!(
            finalize(&p, profiles.get("vista").unwrap()),
            Err(IntentError::ClusterMismatch { .. })
        ));
    }

    #[test]
    fn launcher_falls_back_to_framework_then_profile() {
        let profiles = ProfileSet::bundled();
        let mut p = table1();
        p.launcher = None;
        p.framework = Some(Framework::Pytorch);
        p.cluster = Some("aurora".into());
        let spec = finalize(&p, profiles.get("aurora").unwrap()).unwrap();
        assert_eq!(spec.launcher(), Launcher::Mpiexec);
        p.framework = Some(Framework::Accelerate);
        let spec = finalize(&p, profiles.get("aurora").unwrap()).unwrap();
        assert_eq!(spec.launcher(), Launcher::Accelerate);
    }

    #[test]
    fn suggestions_preserve_world_size() {
        assert_eq!(capacity_suggestions(8, 3), vec![(4, 2), (8, 1)]);
        assert_eq!(capacity_suggestions(12, 4), vec![(3, 4), (4, 3), (6, 2), (12, 1)]);
        assert_eq!(capacity_suggestions(7, 6), vec![(7, 1)]);
    }

    #[test]
    fn to_partial_round_trips() {
        let profiles = ProfileSet::bundled();
        let mut p = table1();
        p.master_port = Some(29400);
        let spec = finalize(&p, profiles.get("perlmutter").unwrap()).unwrap();
        let again = finalize(&spec.to_partial(), profiles.get("perlmutter").unwrap()).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn sanitize_drops_invalid_values() {
        let mut p = PartialJobSpec {
            nodes: Some(0),
            master_port: Some(80),
            entry_script: Some(" ".into()),
            ..Default::default()
        };
        assert_eq!(p.sanitize(), ["nodes", "master_port", "entry_script"]);
        assert!(p.is_empty());
    }

    #[test]
    fn set_field_parses_text_forms() {
        let mut p = PartialJobSpec::default();
        p.set_field("nodes", "two").unwrap();
        p.set_field("framework", "DeepSpeed").unwrap();
        p.set_field("master_port", "29400").unwrap();
        assert_eq!(p.nodes, Some(2));
        assert_eq!(p.framework, Some(Framework::Deepspeed));
        assert!(p.set_field("master_port", "80").is_err());
        assert!(p.set_field("bogus", "1").is_err());
    }
}
