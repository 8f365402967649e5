//! A deterministic stand-in for a real cluster.
//!
//! Submitting a script reads its launch topology, replays the first matching
//! fault rule, and otherwise prints the transcript of a mini-app that runs
//! one allreduce and one allgather over every rank.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::intent::{parse_script, JobSpec};
use crate::kinds::{ActionKind, Category, Launcher, Strategy};
use crate::registry::{ClusterProfile, ProfileSet};
use crate::synthesis::RenderedScript;
use crate::templates::placeholder_spans;

const BUNDLED_RULES: &str = include_str!("../data/fault_rules.json");

/// Cluster field value matching every cluster.
pub const ANY_CLUSTER: &str = "*";

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("fault rule document is malformed: {0}")]
    Parse(String),
    #[error("fault rule #{index} is invalid: {reason}")]
    InvalidRule { index: usize, reason: String },
}

/// One trigger condition. A rule fires when all of its atoms hold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Atom {
    ClusterIs(String),
    StrategyIs(Strategy),
    /// Holds when either the job's launcher or the one found in the script matches.
    LauncherIs(Launcher),
    ScriptContains(String),
    ScriptLacks(String),
    NodesGt(u32),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultRule {
    pub id: String,
    /// Cluster id, or `*`.
    pub cluster: String,
    pub trigger: Vec<Atom>,
    pub stderr_template: String,
    pub category_hint: Category,
    /// Repair kinds that disarm this rule; empty means it cannot be repaired.
    #[serde(default)]
    pub clearable_by: Vec<ActionKind>,
}

impl FaultRule {
    pub fn is_clearable(&self) -> bool {
        !self.clearable_by.is_empty()
    }

    fn holds(&self, atom: &Atom, text: &str, spec: &JobSpec, detected: Option<Launcher>) -> bool {
        match atom {
            Atom::ClusterIs(c) => c == spec.cluster(),
            Atom::StrategyIs(s) => *s == spec.strategy(),
            Atom::LauncherIs(l) => *l == spec.launcher() || Some(*l) == detected,
            Atom::ScriptContains(s) => text.contains(s.as_str()),
            Atom::ScriptLacks(s) => !text.contains(s.as_str()),
            Atom::NodesGt(n) => spec.nodes() > *n,
        }
    }

    /// Whether this rule fires for `text` submitted as `spec`.
    pub fn matches(&self, text: &str, spec: &JobSpec) -> bool {
        if self.cluster != ANY_CLUSTER && self.cluster != spec.cluster() {
            return false;
        }
        let detected = parse_script(text).launcher;
        self.trigger.iter().all(|a| self.holds(a, text, spec, detected))
    }
}

/// Ordered fault rules; the first match wins.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FaultRuleSet {
    rules: Vec<FaultRule>,
}

impl FaultRuleSet {
    pub fn bundled(profiles: &ProfileSet) -> FaultRuleSet {
        load_fault_rules(BUNDLED_RULES, profiles).expect("bundled fault rules are valid")
    }

    pub fn rules(&self) -> &[FaultRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&FaultRule> {
        self.rules.iter().find(|r| r.id == id)
    }

    pub fn first_match(&self, text: &str, spec: &JobSpec) -> Option<&FaultRule> {
        self.rules.iter().find(|r| r.matches(text, spec))
    }
}

/// Parses a fault-rule document. Cluster names must exist in `profiles`.
pub fn load_fault_rules(source: &str, profiles: &ProfileSet) -> Result<FaultRuleSet, SimError> {
    if source.trim().is_empty() {
        return Ok(FaultRuleSet::default());
    }
    let raw: Vec<serde_json::Value> =
        serde_json::from_str(source).map_err(|e| SimError::Parse(e.to_string()))?;
    let mut rules = Vec::with_capacity(raw.len());
    for (index, value) in raw.into_iter().enumerate() {
        let invalid = |reason: String| SimError::InvalidRule { index, reason };
        let rule: FaultRule = serde_json::from_value(value).map_err(|e| invalid(e.to_string()))?;
        if rule.id.trim().is_empty() {
            return Err(invalid("empty id".into()));
        }
        if rules.iter().any(|r: &FaultRule| r.id == rule.id) {
            return Err(invalid(format!("duplicate id `{}`", rule.id)));
        }
        let mut clusters = vec![rule.cluster.as_str()];
        clusters.extend(rule.trigger.iter().filter_map(|a| match a {
            Atom::ClusterIs(c) => Some(c.as_str()),
            _ => None,
        }));
        for c in clusters {
            if c != ANY_CLUSTER && profiles.get(c).is_none() {
                return Err(invalid(format!("unknown cluster `{c}`")));
            }
        }
        rules.push(rule);
    }
    Ok(FaultRuleSet { rules })
}

/// Launch layout recovered from a submitted script.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Topology {
    pub nodes: u32,
    pub per_node: u32,
    pub world: u32,
    pub ranks: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExecutionResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub parsed_topology: Option<Topology>,
    pub fault_fired: Option<String>,
}

impl ExecutionResult {
    pub fn succeeded(&self) -> bool {
        self.exit_code == 0
    }
}

/// Anything that can run a rendered script and report what happened.
pub trait Harness {
    fn submit(&self, r: &RenderedScript, spec: &JobSpec, profile: &ClusterProfile) -> ExecutionResult;
}

/// The mock cluster driven by a fault-rule set.
#[derive(Clone, Debug, Default)]
pub struct SimCluster {
    pub rules: FaultRuleSet,
}

impl SimCluster {
    pub fn new(rules: FaultRuleSet) -> SimCluster {
        SimCluster { rules }
    }
}

impl Harness for SimCluster {
    fn submit(&self, r: &RenderedScript, spec: &JobSpec, profile: &ClusterProfile) -> ExecutionResult {
        submit(r, spec, profile, &self.rules)
    }
}

/// Works out (nodes, per-node, world) from the script, taking whatever the
/// script leaves open from the allocation described by `spec`.
fn topology(text: &str, spec: &JobSpec, profile: &ClusterProfile) -> Result<Topology, String> {
    let p = parse_script(text);
    if p.launcher.is_none() {
        return Err("no launcher invocation found in script".into());
    }
    let nodes = p
        .nodes
        .or_else(|| match (p.total_gpus, p.gpus_per_node) {
            (Some(t), Some(g)) if g > 0 && t % g == 0 => Some(t / g),
            _ => None,
        })
        .unwrap_or(spec.nodes());
    let per_node = p
        .gpus_per_node
        .or_else(|| p.total_gpus.filter(|t| nodes > 0 && t % nodes == 0).map(|t| t / nodes))
        .unwrap_or(spec.gpus_per_node());
    let world = p.total_gpus.unwrap_or(nodes * per_node);
    if nodes * per_node != world {
        return Err(format!(
            "world size {world} is not {nodes} nodes x {per_node} processes per node"
        ));
    }
    if nodes != spec.nodes() {
        return Err(format!(
            "script launches on {nodes} nodes but the allocation has {}",
            spec.nodes()
        ));
    }
    if per_node > profile.gpus_per_node {
        return Err(format!(
            "{per_node} processes per node but {} has {} GPUs per node",
            profile.id, profile.gpus_per_node
        ));
    }
    Ok(Topology {
        nodes,
        per_node,
        world,
        ranks: (0..world).collect(),
    })
}

fn instantiate(template: &str, spec: &JobSpec, profile: &ClusterProfile) -> String {
    let values: BTreeMap<&str, String> = BTreeMap::from([
        ("cluster", profile.id.clone()),
        ("gpu_type", profile.gpu_type.clone()),
        ("nodes", spec.nodes().to_string()),
        ("gpus_per_node", spec.gpus_per_node().to_string()),
        ("world_size", spec.world_size().to_string()),
        ("last_rank", (spec.world_size() - 1).to_string()),
        ("launcher", spec.launcher().to_string()),
        ("strategy", spec.strategy().to_string()),
        ("entry_script", spec.entry_script().to_string()),
        ("deepspeed_config", spec.deepspeed_config().unwrap_or_default().to_string()),
    ]);
    let mut out = String::with_capacity(template.len());
    let mut last = 0;
    for ph in placeholder_spans(template) {
        if let Some(v) = values.get(ph.name) {
            out.push_str(&template[last..ph.span.start]);
            out.push_str(v);
            last = ph.span.end;
        }
    }
    out.push_str(&template[last..]);
    out
}

/// Runs `r` on the mock cluster.
pub fn submit(
    r: &RenderedScript,
    spec: &JobSpec,
    profile: &ClusterProfile,
    rules: &FaultRuleSet,
) -> ExecutionResult {
    if let Some(rule) = rules.first_match(&r.text, spec) {
        return ExecutionResult {
            exit_code: 1,
            stdout: String::new(),
            stderr: instantiate(&rule.stderr_template, spec, profile),
            parsed_topology: None,
            fault_fired: Some(rule.id.clone()),
        };
    }
    match topology(&r.text, spec, profile) {
        Ok(t) => {
            let mut stdout = String::new();
            for rank in &t.ranks {
                stdout.push_str(&format!("rank {rank}/{} ok\n", t.world));
            }
            stdout.push_str("allreduce ok\nallgather ok");
            ExecutionResult {
                exit_code: 0,
                stdout,
                stderr: String::new(),
                parsed_topology: Some(t),
                fault_fired: None,
            }
        }
        Err(reason) => ExecutionResult {
            exit_code: 2,
            stdout: String::new(),
            stderr: format!("launch failed: {reason}"),
            parsed_topology: None,
            fault_fired: None,
        },
    }
}
