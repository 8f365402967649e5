//! `clusterport`: generate, verify and port distributed-training launch scripts.

mod report;
mod session;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use clusterport::debug::DEFAULT_MAX_ITER;
use clusterport::kinds::{Framework, Launcher};
use clusterport::pipeline::{self, GenerateOptions, DEFAULT_K};
use clusterport::registry::load_profiles;
use clusterport::templates::{load_repository, TemplateSet};

use crate::session::{JobFlags, Session};

/// Exit statuses.
const EXIT_USAGE: u8 = 1;
const EXIT_UNRESOLVED: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "clusterport", version, about = "Generate, verify and port launch scripts for distributed training on HPC clusters")]
struct Cli {
    /// Extra cluster profiles (JSON); the target document for `clusters add`.
    #[arg(long, global = true)]
    profiles: Option<PathBuf>,
    /// Extra templates (JSON); the target document for `templates add`.
    #[arg(long, global = true)]
    templates: Option<PathBuf>,
    /// Fault rules replacing the bundled ones.
    #[arg(long, global = true)]
    rules: Option<PathBuf>,
    /// Error fingerprints replacing the bundled ones.
    #[arg(long, global = true)]
    fingerprints: Option<PathBuf>,
    /// Repair table replacing the bundled one.
    #[arg(long, global = true)]
    repairs: Option<PathBuf>,
    /// Remote model service configuration; offline when absent.
    #[arg(long, global = true)]
    bridge_config: Option<PathBuf>,
    /// Never prompt; missing fields are an error.
    #[arg(long, global = true)]
    non_interactive: bool,
    /// Print lint findings and the repair history on standard error.
    #[arg(long, global = true)]
    report: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a verified launch script from a description and/or flags.
    Generate {
        /// Free-text job description.
        description: Vec<String>,
        #[command(flatten)]
        job: JobFlags,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Rewrite an existing launch script for another cluster.
    Port {
        script: PathBuf,
        /// Target cluster.
        #[arg(long)]
        to: String,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Inspect or extend the template repository.
    #[command(subcommand)]
    Templates(TemplatesCmd),
    /// Inspect or extend the cluster registry.
    #[command(subcommand)]
    Clusters(ClustersCmd),
    /// Run every cluster x strategy cell through the simulated cluster.
    Matrix {
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Debug, Clone)]
struct RunFlags {
    /// Candidate templates tried.
    #[arg(long, default_value_t = DEFAULT_K as u64, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    /// Repair iterations per candidate.
    #[arg(long, default_value_t = DEFAULT_MAX_ITER, value_parser = clap::value_parser!(u32).range(1..=5))]
    max_iter: u32,
    /// Prepend the scheduler's batch header.
    #[arg(long, requires = "account")]
    batch: bool,
    /// Batch walltime in minutes.
    #[arg(long, default_value_t = 30)]
    walltime: u32,
    /// Allocation account for the batch header.
    #[arg(long)]
    account: Option<String>,
}

impl RunFlags {
    fn options(&self) -> GenerateOptions {
        GenerateOptions {
            k: self.k as usize,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Subcommand, Debug)]
enum TemplatesCmd {
    List {
        #[arg(long)]
        cluster: Option<String>,
    },
    Validate { file: PathBuf },
    /// Validate templates and append them to the `--templates` document.
    Add { file: PathBuf },
}

#[derive(Subcommand, Debug)]
enum ClustersCmd {
    List,
    Validate { file: PathBuf },
    /// Validate profiles and append them to the `--profiles` document.
    Add { file: PathBuf },
}

enum Outcome {
    Done,
    Unresolved,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Unresolved) => ExitCode::from(EXIT_UNRESOLVED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn read(path: &PathBuf) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match &cli.command {
        Command::Generate { description, job, run } => {
            let mut session = Session::open(&cli)?;
            let spec = session.job_from_description(&description.join(" "), job)?;
            session.finish(&spec, run)
        }
        Command::Port { script, to, run } => {
            let session = Session::open(&cli)?;
            let text = read(script)?;
            let target = session.toolkit.profiles.resolve(to)?;
            let spec = pipeline::port_spec(&text, target)?;
            session.finish(&spec, run)
        }
        Command::Templates(cmd) => templates(&cli, cmd),
        Command::Clusters(cmd) => clusters(&cli, cmd),
        Command::Matrix { json } => {
            let session = Session::open(&cli)?;
            let tk = &session.toolkit;
            let ids: Vec<String> = tk
                .profiles
                .ids()
                .into_iter()
                .filter(|id| tk.templates.iter().any(|t| &t.cluster == id))
                .collect();
            let cells = pipeline::matrix(tk, &ids, &session.debugger(), &tk.simulator())?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&cells)?);
            } else {
                print!("{}", report::matrix_table(&cells));
            }
            Ok(Outcome::Done)
        }
    }
}

fn templates(cli: &Cli, cmd: &TemplatesCmd) -> anyhow::Result<Outcome> {
    match cmd {
        TemplatesCmd::List { cluster } => {
            let session = Session::open(cli)?;
            let filter = cluster
                .as_deref()
                .map(|c| session.toolkit.profiles.resolve(c).map(|p| p.id.clone()))
                .transpose()?;
            let rows = session
                .toolkit
                .templates
                .iter()
                .filter(|t| filter.as_ref().is_none_or(|c| &t.cluster == c));
            print!("{}", report::template_table(rows));
            Ok(Outcome::Done)
        }
        TemplatesCmd::Validate { file } => {
            let set = load_repository(&read(file)?)?;
            let session = Session::open(cli)?;
            for t in set.iter() {
                session.toolkit.profiles.resolve(&t.cluster)?;
            }
            println!("{}: {} valid template(s)", file.display(), set.len());
            Ok(Outcome::Done)
        }
        TemplatesCmd::Add { file } => {
            let target = cli
                .templates
                .as_ref()
                .ok_or_else(|| anyhow!("`templates add` needs --templates <repository> to write to"))?;
            let session = Session::open(cli)?;
            let incoming = load_repository(&read(file)?)?;
            let mut repo = if target.exists() { load_repository(&read(target)?)? } else { TemplateSet::default() };
            let mut all = session.toolkit.templates.clone();
            for t in incoming.iter() {
                session.toolkit.profiles.resolve(&t.cluster)?;
                all = all.add_template(t.clone())?;
                repo = repo.add_template(t.clone())?;
            }
            fs::write(target, repo.to_json() + "\n").with_context(|| format!("cannot write {}", target.display()))?;
            println!("added {} template(s) to {}", incoming.len(), target.display());
            Ok(Outcome::Done)
        }
    }
}

fn clusters(cli: &Cli, cmd: &ClustersCmd) -> anyhow::Result<Outcome> {
    match cmd {
        ClustersCmd::List => {
            let session = Session::open(cli)?;
            print!("{}", report::cluster_table(session.toolkit.profiles.iter()));
            Ok(Outcome::Done)
        }
        ClustersCmd::Validate { file } => {
            let set = load_profiles(&read(file)?)?;
            println!("{}: {} valid profile(s)", file.display(), set.len());
            Ok(Outcome::Done)
        }
        ClustersCmd::Add { file } => {
            let target = cli
                .profiles
                .as_ref()
                .ok_or_else(|| anyhow!("`clusters add` needs --profiles <document> to write to"))?;
            let session = Session::open(cli)?;
            let incoming = load_profiles(&read(file)?)?;
            let mut doc = if target.exists() { load_profiles(&read(target)?)? } else { Default::default() };
            let mut all = session.toolkit.profiles.clone();
            all.merge(incoming.clone())?;
            doc.merge(incoming.clone())?;
            fs::write(target, doc.to_json() + "\n").with_context(|| format!("cannot write {}", target.display()))?;
            println!("added {} profile(s) to {}", incoming.len(), target.display());
            Ok(Outcome::Done)
        }
    }
}

/// `--strategy` also takes the matrix column names, which fix the framework too.
fn parse_strategy(s: &str) -> anyhow::Result<(Option<Framework>, clusterport::kinds::Strategy)> {
    let lowered = s.trim().to_ascii_lowercase();
    match lowered.as_str() {
        "acc-ddp" | "accelerate-ddp" => Ok((Some(Framework::Accelerate), clusterport::kinds::Strategy::Ddp)),
        other => match other.parse() {
            Ok(strategy) => Ok((None, strategy)),
            Err(e) => bail!("{e}"),
        },
    }
}

fn parse_launcher(s: &str) -> anyhow::Result<Launcher> {
    s.parse().map_err(|e| anyhow!("{e}"))
}
