//! Binding a job to a template and rendering the final script.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::intent::JobSpec;
use crate::kinds::{Provenance, Scheduler};
use crate::registry::ClusterProfile;
use crate::templates::{placeholder_spans, placeholders, ParamValue, Template};

#[derive(Debug, thiserror::Error)]
pub enum SynthesisError {
    #[error("template `{template}` needs parameter `{param}` but nothing can fill it")]
    UnboundParameter { template: String, param: String },
    #[error("template `{template}` parameter `{param}`: {reason}")]
    InvalidValue {
        template: String,
        param: String,
        reason: String,
    },
    #[error("value for `{param}` contains placeholder `{{{placeholder}}}`")]
    PlaceholderInValue { param: String, placeholder: String },
    #[error("template `{template}` targets `{template_cluster}`, job targets `{spec_cluster}`")]
    ClusterMismatch {
        template: String,
        template_cluster: String,
        spec_cluster: String,
    },
    #[error("walltime of {requested} minutes violates the {cluster} policy (limit {limit} minutes)")]
    PolicyViolation {
        cluster: String,
        requested: u32,
        limit: u32,
    },
}

/// One bound parameter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bound {
    pub value: ParamValue,
    pub provenance: Provenance,
}

/// Values for a template's parameters, each with where it came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBinding {
    pub values: BTreeMap<String, Bound>,
    /// Digest of the job the binding was made from; empty for hand-made bindings.
    #[serde(default)]
    pub spec_digest: String,
}

impl ParamBinding {
    pub fn new() -> ParamBinding {
        ParamBinding::default()
    }

    pub fn with(mut self, name: &str, value: impl Into<ParamValue>, provenance: Provenance) -> Self {
        self.values.insert(
            name.to_string(),
            Bound {
                value: value.into(),
                provenance,
            },
        );
        self
    }

    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.values.get(name).map(|b| &b.value)
    }

    pub fn integer(&self, name: &str) -> Option<u64> {
        match self.get(name)? {
            ParamValue::Integer(n) => Some(*n),
            ParamValue::Text(s) => s.parse().ok(),
        }
    }
}

impl From<u64> for ParamValue {
    fn from(n: u64) -> Self {
        ParamValue::Integer(n)
    }
}

impl From<u32> for ParamValue {
    fn from(n: u32) -> Self {
        ParamValue::Integer(n.into())
    }
}

impl From<u16> for ParamValue {
    fn from(n: u16) -> Self {
        ParamValue::Integer(n.into())
    }
}

impl From<&str> for ParamValue {
    fn from(s: &str) -> Self {
        ParamValue::Text(s.to_string())
    }
}

impl From<String> for ParamValue {
    fn from(s: String) -> Self {
        ParamValue::Text(s)
    }
}

/// A fully substituted script.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RenderedScript {
    pub text: String,
    pub template_id: String,
    pub binding: ParamBinding,
    pub spec_digest: String,
}

/// Hex SHA-256 of the job's canonical JSON form.
pub fn spec_digest(spec: &JobSpec) -> String {
    let canonical = serde_json::to_vec(spec).expect("job spec serializes");
    hex::encode(Sha256::digest(&canonical))
}

/// Fills `t`'s parameters from `spec`.
///
/// When the user did not choose a port, the template's own default port wins
/// over the global default.
pub fn bind(
    spec: &JobSpec,
    t: &Template,
    profile: &ClusterProfile,
) -> Result<ParamBinding, SynthesisError> {
    if t.cluster != spec.cluster() || profile.id != spec.cluster() {
        return Err(SynthesisError::ClusterMismatch {
            template: t.id.clone(),
            template_cluster: t.cluster.clone(),
            spec_cluster: spec.cluster().to_string(),
        });
    }
    let mut binding = ParamBinding {
        spec_digest: spec_digest(spec),
        ..Default::default()
    };
    for decl in &t.params {
        let from_spec: Option<(ParamValue, Provenance)> = match decl.name.as_str() {
            "nodes" => Some((spec.nodes().into(), Provenance::User)),
            "each_node_gpus" | "gpus_per_node" => Some((spec.gpus_per_node().into(), Provenance::User)),
            "world_size" => Some((spec.world_size().into(), Provenance::Derived)),
            "master_port" => match (spec.master_port_source(), &decl.default) {
                (Provenance::User, _) | (_, None) => {
                    Some((spec.master_port().into(), spec.master_port_source()))
                }
                (_, Some(_)) => None,
            },
            "your_script" => Some((spec.command_tail().into(), Provenance::User)),
            "deepspeed_config" => spec
                .deepspeed_config()
                .map(|c| (c.into(), Provenance::User)),
            _ => None,
        };
        let bound = from_spec.or_else(|| decl.default.clone().map(|d| (d, Provenance::Default)));
        let Some((value, provenance)) = bound else {
            if decl.required {
                return Err(SynthesisError::UnboundParameter {
                    template: t.id.clone(),
                    param: decl.name.clone(),
                });
            }
            continue;
        };
        value
            .check(decl.kind)
            .map_err(|reason| SynthesisError::InvalidValue {
                template: t.id.clone(),
                param: decl.name.clone(),
                reason,
            })?;
        binding.values.insert(decl.name.clone(), Bound { value, provenance });
    }
    Ok(binding)
}

/// Substitutes every placeholder in `t.body`; all other bytes are copied
/// unchanged.
pub fn render(t: &Template, b: &ParamBinding) -> Result<RenderedScript, SynthesisError> {
    let mut text = String::with_capacity(t.body.len() + 64);
    let mut last = 0;
    for ph in placeholder_spans(&t.body) {
        let value = b.get(ph.name).ok_or_else(|| SynthesisError::UnboundParameter {
            template: t.id.clone(),
            param: ph.name.to_string(),
        })?;
        let rendered = value.to_string();
        if let Some(inner) = placeholders(&rendered).into_iter().next() {
            return Err(SynthesisError::PlaceholderInValue {
                param: ph.name.to_string(),
                placeholder: inner,
            });
        }
        text.push_str(&t.body[last..ph.span.start]);
        text.push_str(&rendered);
        last = ph.span.end;
    }
    text.push_str(&t.body[last..]);
    Ok(RenderedScript {
        text,
        template_id: t.id.clone(),
        binding: b.clone(),
        spec_digest: b.spec_digest.clone(),
    })
}

fn hms(minutes: u32) -> String {
    format!("{:02}:{:02}:00", minutes / 60, minutes % 60)
}

/// Node count for batch headers: the bound node count, else world size over
/// per-node GPUs, else one.
fn header_nodes(b: &ParamBinding) -> u64 {
    if let Some(n) = b.integer("nodes") {
        return n;
    }
    match (b.integer("world_size"), b.integer("each_node_gpus")) {
        (Some(w), Some(g)) if g > 0 => w.div_ceil(g),
        _ => 1,
    }
}

/// Prepends the scheduler's batch header to the rendered script.
pub fn wrap_batch(
    r: &RenderedScript,
    profile: &ClusterProfile,
    walltime_minutes: u32,
    account: &str,
) -> Result<String, SynthesisError> {
    if walltime_minutes == 0 || walltime_minutes > profile.max_walltime_minutes {
        return Err(SynthesisError::PolicyViolation {
            cluster: profile.id.clone(),
            requested: walltime_minutes,
            limit: profile.max_walltime_minutes,
        });
    }
    let nodes = header_nodes(&r.binding);
    let time = hms(walltime_minutes);
    let header = match profile.scheduler {
        Scheduler::Slurm => format!(
            "#!/bin/bash\n#SBATCH --nodes={nodes}\n#SBATCH --time={time}\n#SBATCH --account={account}\n"
        ),
        Scheduler::Pbs => format!(
            "#!/bin/bash\n#PBS -l select={nodes}\n#PBS -l walltime={time}\n#PBS -A {account}\n"
        ),
    };
    Ok(format!("{header}{}", r.text))
}
