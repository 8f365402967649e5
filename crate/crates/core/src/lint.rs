//! Cheap checks on a rendered script before anything is submitted.

use std::fmt;
use std::ops::Range;
use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;

use crate::intent::{parse_script, JobSpec};
use crate::kinds::{Launcher, Scheduler};
use crate::registry::ClusterProfile;
use crate::synthesis::RenderedScript;
use crate::templates::placeholder_spans;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Error => "error",
            Severity::Warning => "warning",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FindingCode {
    UnresolvedPlaceholder,
    LaunchSchedConflict,
    TopologyMismatch,
    GpuCapacityExceeded,
    PortOutOfRange,
    EnvPropagationRisk,
}

/// One entry of the published finding catalog.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CatalogEntry {
    pub code: FindingCode,
    pub severity: Severity,
    pub remediation: &'static str,
}

/// Every code `lint` can emit, in check order.
pub const CATALOG: &[CatalogEntry] = &[
    CatalogEntry {
        code: FindingCode::UnresolvedPlaceholder,
        severity: Severity::Error,
        remediation: "bind every template parameter before rendering",
    },
    CatalogEntry {
        code: FindingCode::LaunchSchedConflict,
        severity: Severity::Error,
        remediation: "use the scheduler's native launcher (mpiexec under PBS)",
    },
    CatalogEntry {
        code: FindingCode::TopologyMismatch,
        severity: Severity::Error,
        remediation: "make launcher counts agree with nodes x GPUs per node",
    },
    CatalogEntry {
        code: FindingCode::GpuCapacityExceeded,
        severity: Severity::Error,
        remediation: "lower GPUs per node to the profile limit and add nodes",
    },
    CatalogEntry {
        code: FindingCode::PortOutOfRange,
        severity: Severity::Error,
        remediation: "choose a master port in 1024..=65535",
    },
    CatalogEntry {
        code: FindingCode::EnvPropagationRisk,
        severity: Severity::Warning,
        remediation: "export PYTHONPATH and LD_LIBRARY_PATH inside the per-node command",
    },
];

impl FindingCode {
    pub fn as_str(self) -> &'static str {
        match self {
            FindingCode::UnresolvedPlaceholder => "UNRESOLVED_PLACEHOLDER",
            FindingCode::LaunchSchedConflict => "LAUNCH_SCHED_CONFLICT",
            FindingCode::TopologyMismatch => "TOPOLOGY_MISMATCH",
            FindingCode::GpuCapacityExceeded => "GPU_CAPACITY_EXCEEDED",
            FindingCode::PortOutOfRange => "PORT_OUT_OF_RANGE",
            FindingCode::EnvPropagationRisk => "ENV_PROPAGATION_RISK",
        }
    }

    pub fn severity(self) -> Severity {
        CATALOG
            .iter()
            .find(|e| e.code == self)
            .map(|e| e.severity)
            .expect("every code is catalogued")
    }
}

impl fmt::Display for FindingCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub severity: Severity,
    pub code: FindingCode,
    pub message: String,
    pub span: Option<Range<usize>>,
}

impl Finding {
    fn new(code: FindingCode, message: String, span: Option<Range<usize>>) -> Finding {
        Finding {
            severity: code.severity(),
            code,
            message,
            span,
        }
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", self.severity, self.code, self.message)
    }
}

pub fn error_count(findings: &[Finding]) -> usize {
    findings.iter().filter(|f| f.severity == Severity::Error).count()
}

struct Patterns {
    pbs_foreign: Regex,
    port: Regex,
    exports: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        pbs_foreign: Regex::new(r"\baccelerate\s+launch\b|(?:^|[\s;&|(])srun\s").expect("valid"),
        port: Regex::new(
            r"(?:--master[_-]port[= ]|MASTER_PORT[= ]|--main[_-]process[_-]port[= ]|rdzv[_-]endpoint=[^\s:']+:)(\d+)",
        )
        .expect("valid"),
        exports: Regex::new(r"export\s+(?:PYTHONPATH|LD_LIBRARY_PATH)=").expect("valid"),
    })
}

/// Lints `r` for `spec` on `profile`. Findings come in check order; an empty
/// list means the script is clean.
pub fn lint(r: &RenderedScript, spec: &JobSpec, profile: &ClusterProfile) -> Vec<Finding> {
    let text = r.text.as_str();
    let p = patterns();
    let mut findings = Vec::new();

    for ph in placeholder_spans(text) {
        findings.push(Finding::new(
            FindingCode::UnresolvedPlaceholder,
            format!("placeholder `{{{}}}` was never substituted", ph.name),
            Some(ph.span),
        ));
    }

    if profile.scheduler == Scheduler::Pbs {
        let spec_conflict = matches!(spec.launcher(), Launcher::Accelerate | Launcher::Srun);
        let found = p.pbs_foreign.find(text);
        if spec_conflict || found.is_some() {
            findings.push(Finding::new(
                FindingCode::LaunchSchedConflict,
                format!(
                    "{} launches cannot run under the PBS scheduler on {}",
                    if spec_conflict { spec.launcher().as_str() } else { "this script's" },
                    profile.id
                ),
                found.map(|m| m.range()),
            ));
        }
    }

    let parsed = parse_script(text);
    let mut topology = Vec::new();
    if let (Some(n), Some(g), Some(t)) = (parsed.nodes, parsed.gpus_per_node, parsed.total_gpus) {
        if n.checked_mul(g) != Some(t) {
            topology.push(format!("script runs {t} workers on {n} nodes x {g} GPUs"));
        }
    }
    if let Some(n) = parsed.nodes.filter(|n| *n != spec.nodes()) {
        topology.push(format!("script uses {n} nodes, job asks for {}", spec.nodes()));
    }
    if let Some(g) = parsed.gpus_per_node.filter(|g| *g != spec.gpus_per_node()) {
        topology.push(format!(
            "script uses {g} GPUs per node, job asks for {}",
            spec.gpus_per_node()
        ));
    }
    if let Some(t) = parsed.total_gpus.filter(|t| *t != spec.world_size()) {
        topology.push(format!(
            "script starts {t} workers, job world size is {}",
            spec.world_size()
        ));
    }
    for message in topology {
        findings.push(Finding::new(FindingCode::TopologyMismatch, message, None));
    }

    let per_node = spec.gpus_per_node().max(parsed.gpus_per_node.unwrap_or(0));
    if per_node > profile.gpus_per_node {
        findings.push(Finding::new(
            FindingCode::GpuCapacityExceeded,
            format!(
                "{per_node} GPUs per node exceeds the {} available on {}",
                profile.gpus_per_node, profile.id
            ),
            None,
        ));
    }

    for c in p.port.captures_iter(text) {
        let m = c.get(1).expect("group 1");
        let ok = m.as_str().parse::<u32>().is_ok_and(|v| (1024..=65535).contains(&v));
        if !ok {
            findings.push(Finding::new(
                FindingCode::PortOutOfRange,
                format!("port {} is outside 1024..=65535", m.as_str()),
                Some(m.range()),
            ));
        }
    }

    if spec.nodes() > 1 && !profile.env_propagation && !p.exports.is_match(text) {
        findings.push(Finding::new(
            FindingCode::EnvPropagationRisk,
            format!(
                "{} does not propagate the environment to other nodes and the script exports neither PYTHONPATH nor LD_LIBRARY_PATH",
                profile.id
            ),
            None,
        ));
    }

    findings
}
