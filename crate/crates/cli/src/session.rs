//! Loading documents, assembling a job, and running the pipeline for one invocation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};

use anyhow::{anyhow, bail, Context};
use clap::Args;
use clusterport::bridge::{load_bridge_config, BridgeClient, BridgeExtractor, Capability};
use clusterport::debug::{Debugger, LoopStatus, RemoteRepair};
use clusterport::intent::{extract, finalize, missing_fields, JobSpec, PartialJobSpec, RuleExtractor};
use clusterport::kinds::{Framework, Launcher, Strategy};
use clusterport::pipeline::{self, Toolkit};
use clusterport::retrieval::Embedder;
use clusterport::synthesis::wrap_batch;

use crate::{report, Cli, Outcome, RunFlags};

/// Answer keys that are not job fields but fill repair slots.
const HINT_KEYS: [&str; 2] = ["task_name", "dataset_path"];

#[derive(Args, Debug, Clone, Default)]
pub struct JobFlags {
    #[arg(long)]
    pub cluster: Option<String>,
    #[arg(long)]
    pub framework: Option<String>,
    /// ddp, fsdp, zero3, or acc-ddp (Accelerate with DDP).
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub launcher: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub nodes: Option<u32>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub gpus_per_node: Option<u32>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub total_gpus: Option<u32>,
    #[arg(long, value_parser = clap::value_parser!(u16).range(1024..))]
    pub port: Option<u16>,
    /// Training script.
    #[arg(long)]
    pub entry: Option<String>,
    /// Arguments passed to the training script.
    #[arg(long, allow_hyphen_values = true)]
    pub args: Option<String>,
    #[arg(long)]
    pub deepspeed_config: Option<String>,
    /// FIELD=VALUE answers to prompts, for scripted use (repeatable).
    #[arg(long = "answers", value_name = "FIELD=VALUE")]
    pub answers: Vec<String>,
}

impl JobFlags {
    fn to_partial(&self) -> anyhow::Result<PartialJobSpec> {
        let mut p = PartialJobSpec {
            cluster: self.cluster.clone(),
            nodes: self.nodes,
            gpus_per_node: self.gpus_per_node,
            total_gpus: self.total_gpus,
            master_port: self.port,
            entry_script: self.entry.clone(),
            train_args: self.args.clone().unwrap_or_default(),
            deepspeed_config: self.deepspeed_config.clone(),
            ..Default::default()
        };
        if let Some(f) = &self.framework {
            p.framework = Some(f.parse::<Framework>().map_err(|e| anyhow!("{e}"))?);
        }
        if let Some(s) = &self.strategy {
            let (framework, strategy) = crate::parse_strategy(s)?;
            p.strategy = Some(strategy);
            p.framework = p.framework.or(framework);
        }
        if let Some(l) = &self.launcher {
            p.launcher = Some(crate::parse_launcher(l)?);
        }
        Ok(p)
    }
}

pub struct Session {
    pub toolkit: Toolkit,
    bridge: Option<BridgeClient>,
    interactive: bool,
    report: bool,
    hints: BTreeMap<String, String>,
}

fn read(path: &std::path::Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

impl Session {
    pub fn open(cli: &Cli) -> anyhow::Result<Session> {
        let mut toolkit = Toolkit::bundled();
        if let Some(p) = &cli.profiles {
            if p.exists() {
                toolkit.add_profiles(&read(p)?).with_context(|| format!("in {}", p.display()))?;
            }
        }
        if let Some(p) = &cli.templates {
            if p.exists() {
                toolkit.add_templates(&read(p)?).with_context(|| format!("in {}", p.display()))?;
            }
        }
        if let Some(p) = &cli.rules {
            toolkit.set_rules(&read(p)?).with_context(|| format!("in {}", p.display()))?;
        }
        if let Some(p) = &cli.fingerprints {
            toolkit.set_fingerprints(&read(p)?).with_context(|| format!("in {}", p.display()))?;
        }
        if let Some(p) = &cli.repairs {
            toolkit.set_repairs(&read(p)?).with_context(|| format!("in {}", p.display()))?;
        }
        let bridge = match &cli.bridge_config {
            Some(p) => Some(BridgeClient::new(load_bridge_config(&read(p)?)?)?),
            None => None,
        };
        Ok(Session {
            toolkit,
            bridge,
            interactive: !cli.non_interactive,
            report: cli.report,
            hints: BTreeMap::new(),
        })
    }

    pub fn debugger(&self) -> Debugger<'_> {
        let mut d = self.toolkit.debugger();
        d.hints = self.hints.clone();
        d.remote = self
            .bridge
            .as_ref()
            .filter(|b| b.config().enabled(Capability::Repair))
            .map(|b| b as &dyn RemoteRepair);
        d
    }

    fn embedder(&self) -> Option<&dyn Embedder> {
        self.bridge
            .as_ref()
            .filter(|b| b.config().enabled(Capability::Embed))
            .map(|b| b as &dyn Embedder)
    }

    /// Description, then flags, then `--answers`, then prompts.
    pub fn job_from_description(&mut self, text: &str, flags: &JobFlags) -> anyhow::Result<JobSpec> {
        let rules = RuleExtractor::new(&self.toolkit.profiles);
        let mut partial = if text.trim().is_empty() {
            PartialJobSpec::default()
        } else {
            match &self.bridge {
                Some(client) => extract(text, &BridgeExtractor { client, fallback: rules })?,
                None => extract(text, &rules)?,
            }
        };
        let from_flags = flags.to_partial()?;
        if let (Some(f), Some(l), None) = (from_flags.framework, partial.launcher, from_flags.launcher) {
            if l.implied_framework() != f {
                log::info!("described launcher {l} does not run {f}; using the {f} default");
                partial.launcher = None;
            }
        }
        partial.override_with(&from_flags);

        let mut answers = PartialJobSpec::default();
        for a in &flags.answers {
            let (key, value) = a
                .split_once('=')
                .ok_or_else(|| anyhow!("answer `{a}` is not FIELD=VALUE"))?;
            let key = key.trim();
            if HINT_KEYS.contains(&key) {
                self.hints.insert(key.to_string(), value.trim().to_string());
            } else {
                answers.set_field(key, value)?;
            }
        }
        partial.fill_from(&answers);

        loop {
            let missing = missing_fields(&partial);
            let Some(field) = missing.first() else { break };
            if !self.interactive {
                bail!("missing required fields: {}", missing.join(", "));
            }
            let answer = prompt(field, &self.toolkit)?
                .ok_or_else(|| anyhow!("missing required fields: {}", missing.join(", ")))?;
            if *field == "cluster" {
                if let Err(e) = self.toolkit.profiles.resolve(&answer) {
                    eprintln!("{e}");
                    continue;
                }
            }
            if let Err(e) = partial.set_field(field, &answer) {
                eprintln!("{e}");
            }
        }
        let profile = self.toolkit.profiles.resolve(partial.cluster.as_deref().unwrap_or_default())?;
        partial.cluster = Some(profile.id.clone());
        Ok(finalize(&partial, profile)?)
    }

    pub fn finish(&self, spec: &JobSpec, run: &RunFlags) -> anyhow::Result<Outcome> {
        let debugger = self.debugger();
        let harness = self.toolkit.simulator();
        let r = pipeline::generate(spec, &self.toolkit, &debugger, &harness, self.embedder(), run.options())?;
        if self.report {
            eprint!("{}", report::generate_report(&r));
        }
        match (r.status, r.script()) {
            (LoopStatus::Success, Some(script)) => {
                let text = if run.batch {
                    let profile = self.toolkit.profiles.resolve(spec.cluster())?;
                    wrap_batch(script, profile, run.walltime, run.account.as_deref().unwrap_or_default())?
                } else {
                    script.text.clone()
                };
                let mut out = io::stdout().lock();
                writeln!(out, "{text}")?;
                Ok(Outcome::Done)
            }
            _ => {
                eprint!("{}", report::unresolved_summary(&r));
                Ok(Outcome::Unresolved)
            }
        }
    }
}

fn question(field: &str, toolkit: &Toolkit) -> String {
    let list = |items: Vec<String>| items.join(", ");
    match field {
        "cluster" => format!("Which cluster? ({})", list(toolkit.profiles.ids())),
        "framework" => format!(
            "Which framework? ({})",
            list(Framework::ALL.iter().map(|f| f.to_string()).collect())
        ),
        "strategy" => format!(
            "Which parallel strategy? ({})",
            list(Strategy::ALL.iter().map(|s| s.to_string()).collect())
        ),
        "launcher" => format!(
            "Which launcher? ({})",
            list(Launcher::ALL.iter().map(|l| l.to_string()).collect())
        ),
        "nodes" => "How many nodes?".into(),
        "gpus_per_node" => "How many GPUs per node?".into(),
        "entry_script" => "Which training script should run?".into(),
        other => format!("{other}?"),
    }
}

/// Asks for one field on standard error; `None` at end of input.
fn prompt(field: &str, toolkit: &Toolkit) -> anyhow::Result<Option<String>> {
    eprint!("{} ", question(field, toolkit));
    io::stderr().flush()?;
    let mut line = String::new();
    if io::stdin().lock().read_line(&mut line)? == 0 {
        eprintln!();
        return Ok(None);
    }
    Ok(Some(line.trim().to_string()))
}
