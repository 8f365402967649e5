//! Diagnosing failed runs and repairing them with typed edits.

mod proposal;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::intent::{finalize, IntentError, JobSpec};
use crate::kinds::{ActionKind, Category};
use crate::lint::{error_count, lint};
use crate::registry::ClusterProfile;
use crate::sim::{ExecutionResult, Harness};
use crate::synthesis::{bind, render, RenderedScript, SynthesisError};
use crate::templates::{placeholder_spans, Template, TemplateSet};

pub use proposal::parse_proposal;

const BUNDLED_FINGERPRINTS: &str = include_str!("../../data/fingerprints.json");
const BUNDLED_REPAIRS: &str = include_str!("../../data/repairs.json");

/// Repairs tried before giving up.
pub const DEFAULT_MAX_ITER: u32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum DebugError {
    #[error("{what} document is malformed: {message}")]
    Parse { what: &'static str, message: String },
    #[error("fingerprint `{id}` has an invalid pattern: {message}")]
    BadPattern { id: String, message: String },
    #[error("diagnose called on a successful run")]
    NotAFailure,
    #[error("no repair available: {0}")]
    NoRepairAvailable(String),
    #[error("cannot apply repair: {0}")]
    Apply(String),
    #[error(transparent)]
    Intent(#[from] IntentError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    High,
    Low,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Diagnosis {
    pub category: Category,
    pub fingerprint_id: Option<String>,
    pub explanation: String,
    pub confidence: Confidence,
}

/// Error-output pattern: a literal substring, or a regular expression when it
/// starts with `^` (matched per line).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fingerprint {
    pub id: String,
    pub pattern: String,
    pub category: Category,
    pub explanation: String,
    #[serde(skip)]
    regex: Option<Regex>,
}

impl Fingerprint {
    pub fn matches(&self, stderr: &str) -> bool {
        match &self.regex {
            Some(re) => re.is_match(stderr),
            None => stderr.contains(&self.pattern),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FingerprintSet {
    fingerprints: Vec<Fingerprint>,
}

impl FingerprintSet {
    pub fn bundled() -> FingerprintSet {
        load_fingerprints(BUNDLED_FINGERPRINTS).expect("bundled fingerprints are valid")
    }

    pub fn iter(&self) -> impl Iterator<Item = &Fingerprint> {
        self.fingerprints.iter()
    }

    pub fn len(&self) -> usize {
        self.fingerprints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fingerprints.is_empty()
    }
}

pub fn load_fingerprints(source: &str) -> Result<FingerprintSet, DebugError> {
    if source.trim().is_empty() {
        return Ok(FingerprintSet::default());
    }
    let mut fingerprints: Vec<Fingerprint> =
        serde_json::from_str(source).map_err(|e| DebugError::Parse {
            what: "fingerprint",
            message: e.to_string(),
        })?;
    for fp in &mut fingerprints {
        if fp.pattern.starts_with('^') {
            let re = Regex::new(&format!("(?m){}", fp.pattern)).map_err(|e| DebugError::BadPattern {
                id: fp.id.clone(),
                message: e.to_string(),
            })?;
            fp.regex = Some(re);
        }
    }
    Ok(FingerprintSet { fingerprints })
}

/// A typed edit to a job, its template choice, or its script text.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Edit {
    SetParam {
        field: String,
        value: String,
    },
    PrependLine {
        line: String,
    },
    ExportEnv {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<String>,
    },
    AddModuleLoad {
        module: String,
    },
    PinVersion {
        package: String,
        /// A release, `nightly`, or absent for the latest release.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        version: Option<String>,
    },
    SwitchTemplate {
        template_id: String,
    },
    AddArg {
        args: String,
    },
}

impl Edit {
    pub fn kind(&self) -> ActionKind {
        match self {
            Edit::SetParam { .. } => ActionKind::SetParam,
            Edit::PrependLine { .. } => ActionKind::PrependLine,
            Edit::ExportEnv { .. } => ActionKind::ExportEnv,
            Edit::AddModuleLoad { .. } => ActionKind::AddModuleLoad,
            Edit::PinVersion { .. } => ActionKind::PinVersion,
            Edit::SwitchTemplate { .. } => ActionKind::SwitchTemplate,
            Edit::AddArg { .. } => ActionKind::AddArg,
        }
    }

    fn is_text_edit(&self) -> bool {
        matches!(
            self,
            Edit::PrependLine { .. }
                | Edit::ExportEnv { .. }
                | Edit::AddModuleLoad { .. }
                | Edit::PinVersion { .. }
        )
    }

    fn map_strings(&self, f: impl Fn(&str) -> String) -> Edit {
        match self {
            Edit::SetParam { field, value } => Edit::SetParam {
                field: field.clone(),
                value: f(value),
            },
            Edit::PrependLine { line } => Edit::PrependLine { line: f(line) },
            Edit::ExportEnv { name, value } => Edit::ExportEnv {
                name: name.clone(),
                value: value.as_deref().map(&f),
            },
            Edit::AddModuleLoad { module } => Edit::AddModuleLoad { module: f(module) },
            Edit::PinVersion { package, version } => Edit::PinVersion {
                package: package.clone(),
                version: version.as_deref().map(&f),
            },
            Edit::SwitchTemplate { template_id } => Edit::SwitchTemplate {
                template_id: f(template_id),
            },
            Edit::AddArg { args } => Edit::AddArg { args: f(args) },
        }
    }
}

impl fmt::Display for Edit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Edit::SetParam { field, value } => write!(f, "set {field} = {value}"),
            Edit::PrependLine { line } => write!(f, "prepend `{line}`"),
            Edit::ExportEnv { name, value } => {
                write!(f, "export {name}={}", value.clone().unwrap_or_else(|| format!("${name}")))
            }
            Edit::AddModuleLoad { module } => write!(f, "module load {module}"),
            Edit::PinVersion { package, version } => match version {
                Some(v) => write!(f, "pin {package} {v}"),
                None => write!(f, "upgrade {package}"),
            },
            Edit::SwitchTemplate { template_id } => write!(f, "switch to template {template_id}"),
            Edit::AddArg { args } => write!(f, "add arguments `{args}`"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RepairAction {
    #[serde(flatten)]
    pub edit: Edit,
    #[serde(default)]
    pub rationale: String,
}

impl RepairAction {
    pub fn new(edit: Edit, rationale: impl Into<String>) -> RepairAction {
        RepairAction {
            edit,
            rationale: rationale.into(),
        }
    }

    pub fn kind(&self) -> ActionKind {
        self.edit.kind()
    }
}

impl fmt::Display for RepairAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.edit)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RepairEntry {
    fingerprint: String,
    actions: Vec<RepairAction>,
}

/// Fingerprint id -> ordered repair actions. String payloads may contain
/// `{name}` slots filled from the job and the answers given by the user.
#[derive(Clone, Debug, Default)]
pub struct RepairTable {
    entries: BTreeMap<String, Vec<RepairAction>>,
}

impl RepairTable {
    pub fn bundled() -> RepairTable {
        load_repair_table(BUNDLED_REPAIRS).expect("bundled repair table is valid")
    }

    pub fn actions(&self, fingerprint: &str) -> &[RepairAction] {
        self.entries.get(fingerprint).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn fingerprints(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

pub fn load_repair_table(source: &str) -> Result<RepairTable, DebugError> {
    if source.trim().is_empty() {
        return Ok(RepairTable::default());
    }
    let entries: Vec<RepairEntry> = serde_json::from_str(source).map_err(|e| DebugError::Parse {
        what: "repair table",
        message: e.to_string(),
    })?;
    let mut table = RepairTable::default();
    for e in entries {
        table.entries.entry(e.fingerprint).or_default().extend(e.actions);
    }
    Ok(table)
}

/// Classifies a failed run by the first fingerprint matching its error output.
pub fn diagnose(
    res: &ExecutionResult,
    profile: &ClusterProfile,
    fingerprints: &FingerprintSet,
) -> Result<Diagnosis, DebugError> {
    if res.succeeded() {
        return Err(DebugError::NotAFailure);
    }
    let text = if res.stderr.is_empty() { &res.stdout } else { &res.stderr };
    Ok(match fingerprints.iter().find(|fp| fp.matches(text)) {
        Some(fp) => Diagnosis {
            category: fp.category,
            fingerprint_id: Some(fp.id.clone()),
            explanation: format!("on {}: {}", profile.id, fp.explanation),
            confidence: Confidence::High,
        },
        None => Diagnosis {
            category: Category::Unknown,
            fingerprint_id: None,
            explanation: format!(
                "no known pattern matches the error output on {}: {}",
                profile.id,
                text.lines().last().unwrap_or("").trim()
            ),
            confidence: Confidence::Low,
        },
    })
}

/// What a remote repair service is shown.
#[derive(Clone, Debug, Serialize)]
pub struct RepairContext {
    pub stderr: String,
    pub script: String,
    pub spec: serde_json::Value,
    pub profile_summary: String,
}

/// Remote source of free-text repair proposals. Failures yield no proposals.
pub trait RemoteRepair {
    fn remote_repair(&self, ctx: &RepairContext) -> Vec<String>;
}

/// Category implied by the repair kinds a remote service proposes.
fn category_of(actions: &[RepairAction]) -> Category {
    match actions.first().map(RepairAction::kind) {
        Some(ActionKind::PinVersion) => Category::Framework,
        Some(ActionKind::SetParam | ActionKind::AddArg | ActionKind::SwitchTemplate) => Category::User,
        Some(_) => Category::Env,
        None => Category::Unknown,
    }
}

/// Where the loop stands: a job, a template and the text edits made so far.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoopState {
    pub spec: JobSpec,
    pub template: Template,
    pub text_edits: Vec<Edit>,
}

impl LoopState {
    pub fn new(spec: JobSpec, template: Template) -> LoopState {
        LoopState {
            spec,
            template,
            text_edits: Vec::new(),
        }
    }

    /// Renders the template for the job, then replays the text edits.
    pub fn script(&self, profile: &ClusterProfile) -> Result<RenderedScript, SynthesisError> {
        let mut r = render(&self.template, &bind(&self.spec, &self.template, profile)?)?;
        for edit in &self.text_edits {
            r.text = apply_text(&r.text, edit);
        }
        Ok(r)
    }
}

fn leading_block_end(text: &str, is_setup: impl Fn(&str) -> bool) -> usize {
    let mut end = 0;
    for line in text.split_inclusive('\n') {
        if is_setup(line.trim_start()) {
            end += line.len();
        } else {
            break;
        }
    }
    end
}

fn insert_line(text: &str, at: usize, line: &str) -> String {
    let mut out = String::with_capacity(text.len() + line.len() + 1);
    out.push_str(&text[..at]);
    if at > 0 && !text[..at].ends_with('\n') {
        out.push('\n');
    }
    out.push_str(line);
    out.push('\n');
    out.push_str(&text[at..]);
    out
}

/// Applies a text edit to script text.
pub fn apply_text(text: &str, edit: &Edit) -> String {
    match edit {
        Edit::PrependLine { line } => insert_line(text, 0, line),
        Edit::ExportEnv { name, value } => {
            let value = value.clone().unwrap_or_else(|| format!("${name}"));
            const INNER: &str = "bash -c '";
            match text.find(INNER) {
                Some(pos) => {
                    let at = pos + INNER.len();
                    format!("{}export {name}={value}; {}", &text[..at], &text[at..])
                }
                None => insert_line(text, 0, &format!("export {name}={value}")),
            }
        }
        Edit::AddModuleLoad { module } => {
            let at = leading_block_end(text, |l| l.starts_with("module "));
            insert_line(text, at, &format!("module load {module}"))
        }
        Edit::PinVersion { package, version } => {
            let line = match version.as_deref() {
                Some("nightly") => format!("pip install --pre --upgrade {package}"),
                Some(v) => format!("pip install --upgrade {package}=={v}"),
                None => format!("pip install --upgrade {package}"),
            };
            let at = leading_block_end(text, |l| {
                l.starts_with("module ") || l.starts_with("source ") || l.starts_with("pip install ")
            });
            insert_line(text, at, &line)
        }
        Edit::SetParam { .. } | Edit::SwitchTemplate { .. } | Edit::AddArg { .. } => text.to_string(),
    }
}

/// Applies `action` to `state`, producing the next state.
pub fn apply(
    action: &RepairAction,
    state: &LoopState,
    profile: &ClusterProfile,
    templates: &TemplateSet,
) -> Result<LoopState, DebugError> {
    let mut next = state.clone();
    match &action.edit {
        Edit::SetParam { field, value } => {
            let mut partial = state.spec.to_partial();
            partial.set_field(field, value)?;
            next.spec = finalize(&partial, profile)?;
        }
        Edit::AddArg { args } => {
            let mut partial = state.spec.to_partial();
            partial.train_args = if partial.train_args.is_empty() {
                args.clone()
            } else {
                format!("{} {args}", partial.train_args)
            };
            next.spec = finalize(&partial, profile)?;
        }
        Edit::SwitchTemplate { template_id } => {
            let t = templates
                .get(template_id)
                .ok_or_else(|| DebugError::Apply(format!("unknown template `{template_id}`")))?;
            if t.cluster != state.spec.cluster() {
                return Err(DebugError::Apply(format!(
                    "template `{template_id}` targets {}, not {}",
                    t.cluster,
                    state.spec.cluster()
                )));
            }
            next.template = t.clone();
        }
        edit => {
            debug_assert!(edit.is_text_edit());
            next.text_edits.push(edit.clone());
        }
    }
    next.script(profile)?;
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopStatus {
    Success,
    Unresolved,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct HistoryEntry {
    pub diagnosis: Diagnosis,
    /// The repair applied in response; absent when none was left to try.
    pub action: Option<RepairAction>,
    pub result: ExecutionResult,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LoopOutcome {
    pub status: LoopStatus,
    pub final_script: RenderedScript,
    pub final_spec: JobSpec,
    pub final_result: ExecutionResult,
    /// Repairs applied, at most `max_iter`.
    pub iterations_used: u32,
    pub history: Vec<HistoryEntry>,
}

/// The repair loop with its data: fingerprints, repair table, the templates
/// it may switch between, and answers for repair slots such as `task_name`.
pub struct Debugger<'a> {
    pub fingerprints: FingerprintSet,
    pub repairs: RepairTable,
    pub templates: TemplateSet,
    pub hints: BTreeMap<String, String>,
    pub remote: Option<&'a dyn RemoteRepair>,
}

impl Default for Debugger<'_> {
    fn default() -> Self {
        Debugger {
            fingerprints: FingerprintSet::bundled(),
            repairs: RepairTable::bundled(),
            templates: TemplateSet::bundled(),
            hints: BTreeMap::new(),
            remote: None,
        }
    }
}

impl<'a> Debugger<'a> {
    fn slot_values(&self, spec: &JobSpec, profile: &ClusterProfile) -> BTreeMap<String, String> {
        let config = spec.deepspeed_config().unwrap_or("ds_config").to_string();
        let stem = config.strip_suffix(".json").unwrap_or(&config).to_string();
        let mut values = BTreeMap::from([
            ("cluster".to_string(), profile.id.clone()),
            ("gpu_type".to_string(), profile.gpu_type.clone()),
            ("entry_script".to_string(), spec.entry_script().to_string()),
            ("deepspeed_config".to_string(), config),
            ("deepspeed_config_stem".to_string(), stem),
            ("task_name".to_string(), "$TASK_NAME".to_string()),
            ("dataset_path".to_string(), "$DATASET_PATH".to_string()),
        ]);
        values.extend(self.hints.iter().map(|(k, v)| (k.clone(), v.clone())));
        values
    }

    /// Ordered repairs for a diagnosis, slots filled in.
    pub fn propose(
        &self,
        d: &Diagnosis,
        spec: &JobSpec,
        profile: &ClusterProfile,
    ) -> Result<Vec<RepairAction>, DebugError> {
        let Some(fp) = d.fingerprint_id.as_deref() else {
            return Err(DebugError::NoRepairAvailable(d.explanation.clone()));
        };
        let values = self.slot_values(spec, profile);
        let fill = |s: &str| {
            let mut out = String::new();
            let mut last = 0;
            for ph in placeholder_spans(s) {
                if let Some(v) = values.get(ph.name) {
                    out.push_str(&s[last..ph.span.start]);
                    out.push_str(v);
                    last = ph.span.end;
                }
            }
            out.push_str(&s[last..]);
            out
        };
        Ok(self
            .repairs
            .actions(fp)
            .iter()
            .map(|a| RepairAction::new(a.edit.map_strings(fill), a.rationale.clone()))
            .collect())
    }

    /// Diagnoses, forwarding unknown failures to the remote service if any.
    /// Returns the diagnosis and the remote's parsed actions.
    fn diagnose_full(
        &self,
        res: &ExecutionResult,
        script: &RenderedScript,
        spec: &JobSpec,
        profile: &ClusterProfile,
    ) -> Result<(Diagnosis, Vec<RepairAction>), DebugError> {
        let mut d = diagnose(res, profile, &self.fingerprints)?;
        let mut remote_actions = Vec::new();
        if d.fingerprint_id.is_none() {
            if let Some(remote) = self.remote {
                let ctx = RepairContext {
                    stderr: res.stderr.clone(),
                    script: script.text.clone(),
                    spec: serde_json::to_value(spec).expect("job spec serializes"),
                    profile_summary: format!(
                        "{} ({} scheduler, {} x {} per node)",
                        profile.id, profile.scheduler, profile.gpus_per_node, profile.gpu_type
                    ),
                };
                remote_actions = remote
                    .remote_repair(&ctx)
                    .iter()
                    .filter_map(|p| parse_proposal(p))
                    .collect();
                if !remote_actions.is_empty() {
                    d.category = category_of(&remote_actions);
                    d.explanation = format!("remote repair suggested {} action(s); {}", remote_actions.len(), d.explanation);
                }
            }
        }
        Ok((d, remote_actions))
    }

    /// Submit, diagnose, repair, resubmit; at most `max_iter` repairs.
    ///
    /// Each repair is the first proposed action not yet tried for the same
    /// fingerprint. Actions that fail to apply or add lint errors are skipped.
    pub fn run_loop(
        &self,
        spec: &JobSpec,
        t: &Template,
        profile: &ClusterProfile,
        harness: &dyn Harness,
        max_iter: u32,
    ) -> Result<LoopOutcome, DebugError> {
        let mut state = LoopState::new(spec.clone(), t.clone());
        let mut script = state.script(profile)?;
        let mut tried: BTreeSet<(String, RepairAction)> = BTreeSet::new();
        let mut history = Vec::new();
        let mut iterations = 0;
        loop {
            let result = harness.submit(&script, &state.spec, profile);
            let finish = |status, history, result| LoopOutcome {
                status,
                final_script: script.clone(),
                final_spec: state.spec.clone(),
                final_result: result,
                iterations_used: iterations,
                history,
            };
            if result.succeeded() {
                return Ok(finish(LoopStatus::Success, history, result));
            }
            let (diagnosis, remote_actions) = self.diagnose_full(&result, &script, &state.spec, profile)?;
            if iterations >= max_iter {
                history.push(HistoryEntry {
                    diagnosis,
                    action: None,
                    result: result.clone(),
                });
                return Ok(finish(LoopStatus::Unresolved, history, result));
            }
            let mut actions = match self.propose(&diagnosis, &state.spec, profile) {
                Ok(a) => a,
                Err(DebugError::NoRepairAvailable(_)) => Vec::new(),
                Err(e) => return Err(e),
            };
            actions.extend(remote_actions);

            let key = diagnosis.fingerprint_id.clone().unwrap_or_default();
            let errors_before = error_count(&lint(&script, &state.spec, profile));
            let mut chosen = None;
            for action in actions {
                if !tried.insert((key.clone(), action.clone())) {
                    continue;
                }
                let Ok(next) = apply(&action, &state, profile, &self.templates) else {
                    log::debug!("repair {action} does not apply");
                    continue;
                };
                let next_script = next.script(profile)?;
                if error_count(&lint(&next_script, &next.spec, profile)) > errors_before {
                    log::debug!("repair {action} adds lint errors; reverted");
                    continue;
                }
                chosen = Some((action, next, next_script));
                break;
            }
            let Some((action, next, next_script)) = chosen else {
                history.push(HistoryEntry {
                    diagnosis,
                    action: None,
                    result: result.clone(),
                });
                return Ok(finish(LoopStatus::Unresolved, history, result));
            };
            history.push(HistoryEntry {
                diagnosis,
                action: Some(action),
                result,
            });
            state = next;
            script = next_script;
            iterations += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intent::PartialJobSpec;
    use crate::kinds::{Launcher, Strategy};
    use crate::registry::ProfileSet;
    use crate::sim::{FaultRuleSet, SimCluster};

    fn spec(cluster: &str, strategy: Strategy, launcher: Launcher, nodes: u32) -> JobSpec {
        let profiles = ProfileSet::bundled();
        let p = profiles.get(cluster).unwrap();
        finalize(
            &PartialJobSpec {
                cluster: Some(cluster.into()),
                strategy: Some(strategy),
                launcher: Some(launcher),
                nodes: Some(nodes),
                gpus_per_node: Some(p.gpus_per_node),
                entry_script: Some("train_gpt2.py".into()),
                deepspeed_config: Some("ds_config.json".into()),
                ..Default::default()
            },
            p,
        )
        .unwrap()
    }

    fn run(template: &str, s: &JobSpec) -> LoopOutcome {
        let profiles = ProfileSet::bundled();
        let sim = SimCluster::new(FaultRuleSet::bundled(&profiles));
        let t = TemplateSet::bundled().get(template).unwrap().clone();
        Debugger::default()
            .run_loop(s, &t, profiles.get(s.cluster()).unwrap(), &sim, DEFAULT_MAX_ITER)
            .unwrap()
    }

    fn failed(stderr: &str) -> ExecutionResult {
        ExecutionResult {
            exit_code: 1,
            stdout: String::new(),
            stderr: stderr.into(),
            parsed_topology: None,
            fault_fired: None,
        }
    }

    #[test]
    fn diagnose_examples() {
        let profiles = ProfileSet::bundled();
        let fps = FingerprintSet::bundled();
        let d = diagnose(
            &failed("[rank7]: Traceback\nModuleNotFoundError: No module named 'x'"),
            profiles.get("deltaai").unwrap(),
            &fps,
        )
        .unwrap();
        assert_eq!(d.category, Category::Env);
        assert_eq!(d.fingerprint_id.as_deref(), Some("ENV_NOT_PROPAGATED"));
        assert_eq!(d.confidence, Confidence::High);

        let d = diagnose(&failed("Apex compilation failed on GH200"), profiles.get("vista").unwrap(), &fps).unwrap();
        assert_eq!((d.category, d.fingerprint_id.as_deref()), (Category::Framework, Some("APEX_GH200")));

        let d = diagnose(&failed("segfault in custom kernel xyz"), profiles.get("vista").unwrap(), &fps).unwrap();
        assert_eq!((d.category, d.fingerprint_id, d.confidence), (Category::Unknown, None, Confidence::Low));
    }

    #[test]
    fn diagnose_rejects_success() {
        let mut ok = failed("");
        ok.exit_code = 0;
        let profiles = ProfileSet::bundled();
        assert!(matches!(
            diagnose(&ok, profiles.get("vista").unwrap(), &FingerprintSet::bundled()),
            Err(DebugError::NotAFailure)
        ));
    }

    #[test]
    fn anchored_pattern_needs_line_start() {
        let fps = FingerprintSet::bundled();
        let env = fps.iter().find(|f| f.id == "ENV_NOT_PROPAGATED").unwrap();
        assert!(env.matches("x\nModuleNotFoundError: No module named 'a'"));
        assert!(!env.matches("wrapped ModuleNotFoundError: No module named 'a'"));
    }

    #[test]
    fn propose_examples() {
        let profiles = ProfileSet::bundled();
        let dbg = Debugger::default();
        let s = spec("perlmutter", Strategy::Ddp, Launcher::Torchrun, 2);
        let p = profiles.get("perlmutter").unwrap();
        let diag = |id: &str| Diagnosis {
            category: Category::Env,
            fingerprint_id: Some(id.into()),
            explanation: String::new(),
            confidence: Confidence::High,
        };
        let names: Vec<_> = dbg.propose(&diag("ENV_NOT_PROPAGATED"), &s, p).unwrap().into_iter().map(|a| a.edit).collect();
        assert_eq!(
            names,
            [
                Edit::ExportEnv { name: "PYTHONPATH".into(), value: None },
                Edit::ExportEnv { name: "LD_LIBRARY_PATH".into(), value: None }
            ]
        );
        let mods: Vec<_> = dbg.propose(&diag("GCC_CUDA_MISMATCH"), &s, p).unwrap().into_iter().map(|a| a.edit).collect();
        assert_eq!(
            mods,
            [
                Edit::AddModuleLoad { module: "gcc/13.2.0".into() },
                Edit::AddModuleLoad { module: "cuda/12.4".into() }
            ]
        );
        let args = dbg.propose(&diag("MISSING_DATASET_ARG"), &s, p).unwrap();
        assert_eq!(args[0].edit, Edit::AddArg { args: "--task_name $TASK_NAME --train_file $DATASET_PATH".into() });
        let mut hinted = Debugger::default();
        hinted.hints.insert("task_name".into(), "mrpc".into());
        let args = hinted.propose(&diag("MISSING_DATASET_ARG"), &s, p).unwrap();
        assert_eq!(args[0].edit, Edit::AddArg { args: "--task_name mrpc --train_file $DATASET_PATH".into() });

        let unknown = Diagnosis { fingerprint_id: None, category: Category::Unknown, ..diag("") };
        assert!(matches!(dbg.propose(&unknown, &s, p), Err(DebugError::NoRepairAvailable(_))));
    }

    #[test]
    fn text_edits() {
        let srun = "srun -N 2 bash -c 'torchrun t.py'";
        assert_eq!(
            apply_text(srun, &Edit::ExportEnv { name: "PYTHONPATH".into(), value: None }),
            "srun -N 2 bash -c 'export PYTHONPATH=$PYTHONPATH; torchrun t.py'"
        );
        assert_eq!(
            apply_text("mpiexec -n 2 python t.py", &Edit::ExportEnv { name: "HF_TOKEN".into(), value: None }),
            "export HF_TOKEN=$HF_TOKEN\nmpiexec -n 2 python t.py"
        );
        assert_eq!(
            apply_text("module load a\nsource env\nsrun x", &Edit::AddModuleLoad { module: "b".into() }),
            "module load a\nmodule load b\nsource env\nsrun x"
        );
        assert_eq!(
            apply_text("srun x", &Edit::AddModuleLoad { module: "b".into() }),
            "module load b\nsrun x"
        );
        assert_eq!(
            apply_text("module load a\nsrun x", &Edit::PinVersion { package: "torch".into(), version: Some("nightly".into()) }),
            "module load a\npip install --pre --upgrade torch\nsrun x"
        );
        assert_eq!(
            apply_text("srun x", &Edit::PinVersion { package: "p".into(), version: Some("1.2".into()) }),
            "pip install --upgrade p==1.2\nsrun x"
        );
        assert_eq!(apply_text("srun x", &Edit::PrependLine { line: "set -e".into() }), "set -e\nsrun x");
    }

    #[test]
    fn deltaai_ddp_two_nodes_is_repaired() {
        let out = run("deltaai-ddp", &spec("deltaai", Strategy::Ddp, Launcher::Torchrun, 2));
        assert_eq!(out.status, LoopStatus::Success);
        assert!((1..=2).contains(&out.iterations_used));
        assert!(out.final_script.text.contains("export PYTHONPATH=$PYTHONPATH; "));
        assert_eq!(out.final_result.exit_code, 0);
    }

    #[test]
    fn vista_zero3_exhausts_iterations() {
        let out = run("vista-zero3", &spec("vista", Strategy::Zero3, Launcher::Deepspeed, 2));
        assert_eq!(out.status, LoopStatus::Unresolved);
        assert_eq!(out.iterations_used, DEFAULT_MAX_ITER);
        assert_eq!(out.history.len(), DEFAULT_MAX_ITER as usize + 1);
        assert!(out.history.last().unwrap().action.is_none());
    }

    #[test]
    fn fault_free_run_uses_no_iterations() {
        let out = run("perlmutter-ddp", &spec("perlmutter", Strategy::Ddp, Launcher::Torchrun, 2));
        assert_eq!(out.status, LoopStatus::Success);
        assert_eq!(out.iterations_used, 0);
        assert!(out.history.is_empty());
    }

    #[test]
    fn set_param_and_switch_template_edit_the_job() {
        let profiles = ProfileSet::bundled();
        let p = profiles.get("delta").unwrap();
        let set = TemplateSet::bundled();
        let s = spec("delta", Strategy::Zero3, Launcher::Deepspeed, 2);
        let state = LoopState::new(s, set.get("delta-zero3").unwrap().clone());
        let next = apply(
            &RepairAction::new(Edit::SetParam { field: "deepspeed_config".into(), value: "z.json".into() }, ""),
            &state,
            p,
            &set,
        )
        .unwrap();
        assert_eq!(next.spec.deepspeed_config(), Some("z.json"));
        let next = apply(
            &RepairAction::new(Edit::SwitchTemplate { template_id: "delta-ddp".into() }, ""),
            &state,
            p,
            &set,
        )
        .unwrap();
        assert_eq!(next.template.id, "delta-ddp");
        assert!(apply(
            &RepairAction::new(Edit::SwitchTemplate { template_id: "vista-ddp".into() }, ""),
            &state,
            p,
            &set
        )
        .is_err());
    }

    #[test]
    fn action_json_shape() {
        let a = RepairAction::new(Edit::ExportEnv { name: "PYTHONPATH".into(), value: None }, "why");
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, r#"{"kind":"export_env","name":"PYTHONPATH","rationale":"why"}"#);
        let back: RepairAction = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn every_repair_table_entry_has_a_fingerprint() {
        let fps = FingerprintSet::bundled();
        let table = RepairTable::bundled();
        for id in table.fingerprints() {
            assert!(fps.iter().any(|f| f.id == id), "{id}");
        }
        assert_eq!(fps.len(), 10);
    }

    struct Canned(Vec<&'static str>);
    impl RemoteRepair for Canned {
        fn remote_repair(&self, _: &RepairContext) -> Vec<String> {
            self.0.iter().map(|s| s.to_string()).collect()
        }
    }

    #[test]
    fn remote_proposals_handle_unknown_failures() {
        let profiles = ProfileSet::bundled();
        let p = profiles.get("delta").unwrap();
        let rules = crate::sim::load_fault_rules(
            r#"[{"id":"ODD","cluster":"delta","trigger":[{"script_lacks":"NCCL_DEBUG"}],
                "stderr_template":"segfault in custom kernel xyz","category_hint":"env","clearable_by":["export_env"]}]"#,
            &profiles,
        )
        .unwrap();
        let sim = SimCluster::new(rules);
        let s = spec("delta", Strategy::Ddp, Launcher::Torchrun, 2);
        let t = TemplateSet::bundled().get("delta-ddp").unwrap().clone();

        let offline = Debugger::default().run_loop(&s, &t, p, &sim, 5).unwrap();
        assert_eq!(offline.status, LoopStatus::Unresolved);
        assert_eq!(offline.history[0].diagnosis.category, Category::Unknown);

        let remote = Canned(vec!["reinstall the universe", "export NCCL_DEBUG=INFO"]);
        let dbg = Debugger { remote: Some(&remote), ..Debugger::default() };
        let out = dbg.run_loop(&s, &t, p, &sim, 5).unwrap();
        assert_eq!(out.status, LoopStatus::Success);
        assert_eq!(out.history[0].diagnosis.category, Category::Env);
        assert_eq!(out.history[0].diagnosis.confidence, Confidence::Low);
    }
}
