//! End-to-end flows: generate, port, and the cluster x strategy matrix.

use serde::Serialize;

use crate::debug::{
    load_fingerprints, load_repair_table, Debugger, FingerprintSet, LoopOutcome, LoopStatus,
    RepairTable, DEFAULT_MAX_ITER,
};
use crate::intent::{finalize, parse_script, IntentError, JobSpec, PartialJobSpec};
use crate::kinds::{Framework, Strategy};
use crate::lint::{lint, Finding};
use crate::registry::{load_profiles, ClusterProfile, ProfileSet, RegistryError};
use crate::retrieval::{candidates, Embedder, RankedCandidate, RetrievalError};
use crate::sim::{load_fault_rules, FaultRuleSet, Harness, SimCluster, SimError};
use crate::synthesis::{bind, render, RenderedScript};
use crate::templates::{load_repository, Template, TemplateError, TemplateSet};

const EXTRA_PROFILES: &str = include_str!("../data/extra/polaris.profiles.json");
const EXTRA_TEMPLATES: &str = include_str!("../data/extra/polaris.templates.json");

/// Candidates tried per job unless told otherwise.
pub const DEFAULT_K: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Intent(#[from] IntentError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Debug(#[from] crate::debug::DebugError),
    #[error("no template targets cluster `{0}`")]
    NoTemplateForCluster(String),
    #[error("no launcher invocation found in the script")]
    NotALaunchScript,
}

/// Every document the pipeline reads, loaded and cross-checked.
#[derive(Clone, Debug)]
pub struct Toolkit {
    pub profiles: ProfileSet,
    pub templates: TemplateSet,
    pub rules: FaultRuleSet,
    pub fingerprints: FingerprintSet,
    pub repairs: RepairTable,
}

impl Toolkit {
    /// The nine bundled clusters with their templates and fault rules.
    pub fn bundled() -> Toolkit {
        let profiles = ProfileSet::bundled();
        Toolkit {
            rules: FaultRuleSet::bundled(&profiles),
            profiles,
            templates: TemplateSet::bundled(),
            fingerprints: FingerprintSet::bundled(),
            repairs: RepairTable::bundled(),
        }
    }

    /// Adds the bundled extra documents: a PBS/mpiexec A100 machine
    /// (`polaris`) and its data-parallel template.
    pub fn with_extras(mut self) -> Result<Toolkit, PipelineError> {
        self.add_profiles(EXTRA_PROFILES)?;
        self.add_templates(EXTRA_TEMPLATES)?;
        Ok(self)
    }

    pub fn add_profiles(&mut self, source: &str) -> Result<(), PipelineError> {
        self.profiles.merge(load_profiles(source)?)?;
        Ok(())
    }

    pub fn add_templates(&mut self, source: &str) -> Result<(), PipelineError> {
        let extra = load_repository(source)?;
        for t in extra.iter() {
            self.profiles.resolve(&t.cluster)?;
        }
        self.templates = self.templates.merge(&extra)?;
        Ok(())
    }

    /// Replaces the fault rules.
    pub fn set_rules(&mut self, source: &str) -> Result<(), PipelineError> {
        self.rules = load_fault_rules(source, &self.profiles)?;
        Ok(())
    }

    pub fn set_fingerprints(&mut self, source: &str) -> Result<(), PipelineError> {
        self.fingerprints = load_fingerprints(source)?;
        Ok(())
    }

    pub fn set_repairs(&mut self, source: &str) -> Result<(), PipelineError> {
        self.repairs = load_repair_table(source)?;
        Ok(())
    }

    pub fn debugger(&self) -> Debugger<'static> {
        Debugger {
            fingerprints: self.fingerprints.clone(),
            repairs: self.repairs.clone(),
            templates: self.templates.clone(),
            ..Debugger::default()
        }
    }

    pub fn simulator(&self) -> SimCluster {
        SimCluster::new(self.rules.clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GenerateOptions {
    pub k: usize,
    pub max_iter: u32,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            k: DEFAULT_K,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// One candidate template carried through bind, render, lint and the loop.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Attempt {
    pub template_id: String,
    pub score: f64,
    pub exact: bool,
    /// Findings on the first rendering, before any repair.
    pub findings: Vec<Finding>,
    /// Absent when the template could not be bound to the job.
    pub outcome: Option<LoopOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerateReport {
    pub spec: JobSpec,
    pub candidates: Vec<RankedCandidate>,
    pub attempts: Vec<Attempt>,
    pub status: LoopStatus,
}

impl GenerateReport {
    /// The verified script, if an attempt succeeded.
    pub fn script(&self) -> Option<&RenderedScript> {
        self.success().map(|o| &o.final_script)
    }

    pub fn success(&self) -> Option<&LoopOutcome> {
        self.attempts
            .iter()
            .filter_map(|a| a.outcome.as_ref())
            .find(|o| o.status == LoopStatus::Success)
    }
}

/// Ranks templates for `spec`, then tries the best `k` on `spec`'s cluster
/// until one passes verification.
pub fn generate(
    spec: &JobSpec,
    toolkit: &Toolkit,
    debugger: &Debugger<'_>,
    harness: &dyn Harness,
    embedder: Option<&dyn Embedder>,
    opts: GenerateOptions,
) -> Result<GenerateReport, PipelineError> {
    let profile = toolkit.profiles.resolve(spec.cluster())?;
    let ranked = candidates(spec, &toolkit.templates, embedder)?;
    let same_cluster: Vec<RankedCandidate> = ranked
        .into_iter()
        .filter(|c| {
            toolkit
                .templates
                .get(&c.template_id)
                .is_some_and(|t| t.cluster == profile.id)
        })
        .collect();
    if same_cluster.is_empty() {
        return Err(PipelineError::NoTemplateForCluster(profile.id.clone()));
    }
    let mut report = GenerateReport {
        spec: spec.clone(),
        candidates: same_cluster.clone(),
        attempts: Vec::new(),
        status: LoopStatus::Unresolved,
    };
    for c in same_cluster.iter().take(opts.k.max(1)) {
        let t = toolkit.templates.get(&c.template_id).expect("candidate ids come from the set");
        let attempt = try_template(spec, t, profile, debugger, harness, opts.max_iter, c);
        let done = attempt.outcome.as_ref().is_some_and(|o| o.status == LoopStatus::Success);
        report.attempts.push(attempt);
        if done {
            report.status = LoopStatus::Success;
            break;
        }
    }
    Ok(report)
}

fn try_template(
    spec: &JobSpec,
    t: &Template,
    profile: &ClusterProfile,
    debugger: &Debugger<'_>,
    harness: &dyn Harness,
    max_iter: u32,
    c: &RankedCandidate,
) -> Attempt {
    let mut attempt = Attempt {
        template_id: t.id.clone(),
        score: c.score,
        exact: c.exact,
        findings: Vec::new(),
        outcome: None,
        error: None,
    };
    let first = bind(spec, t, profile).and_then(|b| render(t, &b));
    match first {
        Ok(r) => attempt.findings = lint(&r, spec, profile),
        Err(e) => {
            attempt.error = Some(e.to_string());
            return attempt;
        }
    }
    match debugger.run_loop(spec, t, profile, harness, max_iter) {
        Ok(o) => attempt.outcome = Some(o),
        Err(e) => attempt.error = Some(e.to_string()),
    }
    attempt
}

/// Reads the job out of an existing launch script and re-targets it.
///
/// A launcher tied to a framework (deepspeed, accelerate) is kept; generic
/// launchers are dropped so the target's own default applies.
pub fn port_spec(script: &str, target: &ClusterProfile) -> Result<JobSpec, PipelineError> {
    let parsed = parse_script(script);
    let Some(launcher) = parsed.launcher else {
        return Err(PipelineError::NotALaunchScript);
    };
    let framework = parsed.framework.unwrap_or(launcher.implied_framework());
    let strategy = parsed.strategy.or(match framework {
        Framework::Deepspeed => Some(Strategy::Zero3),
        _ => None,
    });
    let p = PartialJobSpec {
        cluster: Some(target.id.clone()),
        framework: Some(framework),
        strategy,
        launcher: framework.own_launcher(),
        ..parsed
    };
    Ok(finalize(&p, target)?)
}

/// The four strategy columns of the support matrix.
pub const MATRIX_COLUMNS: [(&str, Framework, Strategy); 4] = [
    ("DDP", Framework::Pytorch, Strategy::Ddp),
    ("FSDP", Framework::Pytorch, Strategy::Fsdp),
    ("ZeRO-3", Framework::Deepspeed, Strategy::Zero3),
    ("Acc-DDP", Framework::Accelerate, Strategy::Ddp),
];

/// The standard matrix job: two full nodes running a GPT-2 training script.
pub fn matrix_spec(
    profile: &ClusterProfile,
    framework: Framework,
    strategy: Strategy,
) -> Result<JobSpec, IntentError> {
    finalize(
        &PartialJobSpec {
            cluster: Some(profile.id.clone()),
            framework: Some(framework),
            strategy: Some(strategy),
            nodes: Some(2),
            gpus_per_node: Some(profile.gpus_per_node),
            entry_script: Some("train_gpt2.py".into()),
            deepspeed_config: Some("ds_config.json".into()),
            ..Default::default()
        },
        profile,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatrixCell {
    pub cluster: String,
    pub column: &'static str,
    pub template_id: String,
    pub status: LoopStatus,
    pub iterations_used: u32,
    pub fault: Option<String>,
}

/// Runs the verification loop on the best template of every cell.
pub fn matrix(
    toolkit: &Toolkit,
    clusters: &[String],
    debugger: &Debugger<'_>,
    harness: &dyn Harness,
) -> Result<Vec<MatrixCell>, PipelineError> {
    let opts = GenerateOptions {
        k: 1,
        max_iter: DEFAULT_MAX_ITER,
    };
    let mut cells = Vec::new();
    for id in clusters {
        let profile = toolkit.profiles.resolve(id)?;
        for (column, framework, strategy) in MATRIX_COLUMNS {
            let spec = matrix_spec(profile, framework, strategy)?;
            let report = generate(&spec, toolkit, debugger, harness, None, opts)?;
            let attempt = &report.attempts[0];
            let outcome = attempt.outcome.as_ref();
            cells.push(MatrixCell {
                cluster: profile.id.clone(),
                column,
                template_id: attempt.template_id.clone(),
                status: report.status,
                iterations_used: outcome.map_or(0, |o| o.iterations_used),
                fault: outcome
                    .and_then(|o| o.history.first())
                    .and_then(|h| h.result.fault_fired.clone()),
            });
        }
    }
    Ok(cells)
}

/// A job built to trip one fault rule on its first submission.
#[derive(Clone, Debug)]
pub struct FaultCase {
    pub rule_id: &'static str,
    pub spec: JobSpec,
    pub template: Template,
}

struct CaseDef {
    rule: &'static str,
    template: &'static str,
    prefix: &'static str,
    /// Replaced in the body before the prefix is added.
    swap: (&'static str, &'static str),
    entry: &'static str,
    args: &'static str,
    config: &'static str,
    framework: Option<Framework>,
}

const CASES: &[CaseDef] = &[
    CaseDef { rule: "PBS_ACCELERATE_CONFLICT", template: "aurora-ddp", prefix: "", swap: ("", ""), entry: "train_gpt2.py", args: "", config: "ds_config.json", framework: Some(Framework::Accelerate) },
    CaseDef { rule: "APEX_GH200_VISTA", template: "vista-zero3", prefix: "", swap: ("", ""), entry: "train_gpt2.py", args: "", config: "ds_config.json", framework: None },
    CaseDef { rule: "APEX_GH200_DELTAAI", template: "deltaai-zero3", prefix: "", swap: ("", ""), entry: "train_gpt2.py", args: "", config: "ds_config.json", framework: None },
    CaseDef { rule: "ENV_NOT_PROPAGATED", template: "deltaai-ddp", prefix: "", swap: ("", ""), entry: "train_gpt2.py", args: "", config: "ds_config.json", framework: None },
    CaseDef { rule: "DRIVER_LIB_MISMATCH", template: "stampede3-ddp", prefix: "", swap: ("impi/21.11", "impi/21.9"), entry: "train_gpt2.py", args: "", config: "ds_config.json", framework: None },
    CaseDef { rule: "SYCL_COMPILER_CONFLICT", template: "aurora-ddp", prefix: "module load oneapi\n", swap: ("", ""), entry: "train_gpt2.py", args: "", config: "ds_config.json", framework: None },
    CaseDef { rule: "GCC_CUDA_MISMATCH", template: "perlmutter-ddp", prefix: "module load gcc\n", swap: ("", ""), entry: "train_gpt2.py", args: "", config: "ds_config.json", framework: None },
    CaseDef { rule: "MISSING_DATASET_ARG", template: "delta-ddp", prefix: "", swap: ("", ""), entry: "run_glue.py", args: "--model_name_or_path bert-base-cased", config: "ds_config.json", framework: None },
    CaseDef { rule: "HF_AUTH_MISSING", template: "anvil-fsdp", prefix: "", swap: ("", ""), entry: "run_clm.py", args: "--model_name_or_path meta-llama/Llama-3.2-1B", config: "ds_config.json", framework: None },
    CaseDef { rule: "BAD_CONFIG_PATH", template: "delta-zero3", prefix: "", swap: ("", ""), entry: "train_gpt2.py", args: "", config: "ds_config", framework: None },
    CaseDef { rule: "XPU_SCRIPT_UNSUPPORTED_STAMPEDE3", template: "stampede3-ddp", prefix: "", swap: ("", ""), entry: "examples/pytorch/language-modeling/run_clm.py", args: "--do_train", config: "ds_config.json", framework: None },
    CaseDef { rule: "XPU_SCRIPT_UNSUPPORTED_AURORA", template: "aurora-fsdp", prefix: "", swap: ("", ""), entry: "examples/pytorch/language-modeling/run_clm.py", args: "--do_train", config: "ds_config.json", framework: None },
];

/// One injected job per bundled fault rule.
pub fn fault_corpus(toolkit: &Toolkit) -> Result<Vec<FaultCase>, PipelineError> {
    CASES
        .iter()
        .map(|c| {
            let mut template = toolkit
                .templates
                .get(c.template)
                .cloned()
                .ok_or_else(|| PipelineError::NoTemplateForCluster(c.template.to_string()))?;
            if !c.swap.0.is_empty() {
                template.body = template.body.replace(c.swap.0, c.swap.1);
            }
            template.body = format!("{}{}", c.prefix, template.body);
            let profile = toolkit.profiles.resolve(&template.cluster)?;
            let framework = c.framework.unwrap_or(template.framework);
            let spec = finalize(
                &PartialJobSpec {
                    cluster: Some(profile.id.clone()),
                    framework: Some(framework),
                    strategy: Some(template.strategy),
                    launcher: framework.own_launcher().or(Some(template.launcher)),
                    nodes: Some(2),
                    gpus_per_node: Some(profile.gpus_per_node),
                    entry_script: Some(c.entry.into()),
                    train_args: c.args.into(),
                    deepspeed_config: Some(c.config.into()),
                    ..Default::default()
                },
                profile,
            )?;
            Ok(FaultCase {
                rule_id: c.rule,
                spec,
                template,
            })
        })
        .collect()
}
