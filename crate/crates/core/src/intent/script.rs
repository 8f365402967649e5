//! Recovering a job description from an existing launch script.

use std::sync::OnceLock;

use regex::Regex;

use super::shell::{join_words, split_commands};
use super::PartialJobSpec;
use crate::kinds::Launcher;

/// Best-effort reading of a launch script. Unknown constructs are skipped.
///
/// The innermost launcher wins: for `srun ... bash -c 'torchrun ...'` the
/// launcher is torchrun and srun only contributes the node count.
pub fn parse_script(script: &str) -> PartialJobSpec {
    let mut found = Found::default();
    for command in split_commands(script) {
        visit(&command, &mut found, 0);
        if found.done {
            break;
        }
    }
    let mut spec = found.spec;
    if spec.master_port.is_none() {
        spec.master_port = found.exported_port;
    }
    if spec.launcher.is_some() && spec.gpus_per_node.is_none() {
        spec.gpus_per_node = slots_hint(script);
    }
    spec.sanitize();
    spec
}

#[derive(Default)]
struct Found {
    spec: PartialJobSpec,
    exported_port: Option<u16>,
    done: bool,
}

fn slots_hint(script: &str) -> Option<u32> {
    static SLOTS: OnceLock<Regex> = OnceLock::new();
    SLOTS
        .get_or_init(|| Regex::new(r"\bslots=(\d+)").expect("valid"))
        .captures(script)
        .and_then(|c| c[1].parse().ok())
}

fn is_assignment(word: &str) -> bool {
    match word.split_once('=') {
        Some((name, _)) => {
            !name.is_empty()
                && name.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
                && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        }
        None => false,
    }
}

fn basename(word: &str) -> &str {
    word.rsplit('/').next().unwrap_or(word)
}

fn is_python(word: &str) -> bool {
    let b = basename(word);
    b == "python" || (b.starts_with("python") && b[6..].chars().all(|c| c.is_ascii_digit() || c == '.'))
}

fn launcher_of(word: &str) -> Option<Launcher> {
    match basename(word) {
        "torchrun" => Some(Launcher::Torchrun),
        "mpiexec" | "mpirun" | "mpiexec.hydra" => Some(Launcher::Mpiexec),
        "deepspeed" => Some(Launcher::Deepspeed),
        "accelerate" => Some(Launcher::Accelerate),
        "srun" => Some(Launcher::Srun),
        _ => None,
    }
}

fn note_export(words: &[String], found: &mut Found) {
    for w in words {
        if let Some(v) = w.strip_prefix("MASTER_PORT=") {
            found.exported_port = v.parse().ok().or(found.exported_port);
        }
    }
}

fn visit(words: &[String], found: &mut Found, depth: usize) {
    if depth > 4 || found.done {
        return;
    }
    let mut i = 0;
    if words.first().map(String::as_str) == Some("export") {
        note_export(&words[1..], found);
        return;
    }
    while i < words.len() && is_assignment(&words[i]) {
        note_export(&words[i..=i], found);
        i += 1;
    }
    let rest = &words[i..];
    let Some(head) = rest.first() else { return };
    let head = head.as_str();
    if matches!(basename(head), "bash" | "sh") {
        if let Some(pos) = rest.iter().position(|w| w == "-c") {
            if let Some(body) = rest.get(pos + 1) {
                for inner in split_commands(body) {
                    visit(&inner, found, depth + 1);
                }
            }
        }
        return;
    }
    if is_python(head) && rest.get(1).map(String::as_str) == Some("-m") {
        if let Some(module) = rest.get(2) {
            if module == "torch.distributed.run" || module == "torch.distributed.launch" {
                torchrun(&rest[3..], found);
            }
        }
        return;
    }
    match launcher_of(head) {
        Some(Launcher::Srun) => srun(&rest[1..], found, depth),
        Some(Launcher::Torchrun) => torchrun(&rest[1..], found),
        Some(Launcher::Mpiexec) => mpiexec(&rest[1..], found, depth),
        Some(Launcher::Deepspeed) => deepspeed(&rest[1..], found),
        Some(Launcher::Accelerate) if rest.get(1).map(String::as_str) == Some("launch") => {
            accelerate(&rest[2..], found)
        }
        _ => {}
    }
}

/// Launcher options before the program, as (name, value) pairs.
struct Options {
    pairs: Vec<(String, Option<String>)>,
}

impl Options {
    fn get(&self, names: &[&str]) -> Option<&str> {
        self.pairs
            .iter()
            .rev()
            .find(|(n, _)| names.contains(&n.as_str()))
            .and_then(|(_, v)| v.as_deref())
    }

    fn count(&self, names: &[&str]) -> Option<u32> {
        let v = self.get(names)?;
        // elastic ranges such as 1:4 take the upper bound
        v.rsplit(':').next().and_then(|x| x.parse().ok())
    }
}

/// Splits launcher words into options and the program that follows them.
///
/// `two_valued` options consume two words; `flags` consume none.
fn split_options<'a>(
    words: &'a [String],
    flags: &[&str],
    two_valued: &[&str],
    is_program: impl Fn(&str) -> bool,
) -> (Options, &'a [String]) {
    let mut pairs = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let w = words[i].as_str();
        if !w.starts_with('-') || w == "-" || is_program(w) {
            break;
        }
        if let Some((name, value)) = w.split_once('=').filter(|_| w.starts_with("--")) {
            pairs.push((name.to_string(), Some(value.to_string())));
            i += 1;
        } else if two_valued.contains(&w) {
            let value = words.get(i + 1..i + 3).map(|v| v.join(" "));
            pairs.push((w.to_string(), value));
            i += 3;
        } else if let Some((name, value)) = short_attached(w) {
            pairs.push((name, Some(value)));
            i += 1;
        } else if flags.contains(&w)
            || words.get(i + 1).is_none_or(|n| n.starts_with('-') || is_program(n))
        {
            pairs.push((w.to_string(), None));
            i += 1;
        } else {
            pairs.push((w.to_string(), Some(words[i + 1].clone())));
            i += 2;
        }
    }
    (Options { pairs }, &words[i.min(words.len())..])
}

/// `-N2` style short options with the value attached.
fn short_attached(w: &str) -> Option<(String, String)> {
    let rest = w.strip_prefix('-')?;
    if rest.starts_with('-') || rest.len() < 2 {
        return None;
    }
    let (name, value) = rest.split_at(1);
    value
        .chars()
        .all(|c| c.is_ascii_digit())
        .then(|| (format!("-{name}"), value.to_string()))
}

fn is_script(word: &str) -> bool {
    word.ends_with(".py")
}

/// Reads `[python [-u ...]] script.py args...` into entry and train args.
fn program(words: &[String], found: &mut Found) {
    let mut i = 0;
    if words.first().is_some_and(|w| is_python(w)) {
        i = 1;
        while i < words.len() && words[i].starts_with('-') {
            i += 1;
        }
    }
    if let Some(script) = words.get(i) {
        found.spec.entry_script = Some(script.clone());
        let args: Vec<String> = words[i + 1..].to_vec();
        found.spec.train_args = join_words(&args);
    }
}

fn set_port(found: &mut Found, value: Option<&str>) {
    if let Some(p) = value.and_then(|v| v.rsplit(':').next()).and_then(|v| v.parse().ok()) {
        found.spec.master_port = Some(p);
    }
}

fn srun(words: &[String], found: &mut Found, depth: usize) {
    let program_start = |w: &str| launcher_of(w).is_some() || is_python(w) || is_script(w) || matches!(basename(w), "bash" | "sh");
    let (opts, rest) = split_options(
        words,
        &["--exclusive", "--overlap", "-l", "--label", "-u", "--unbuffered"],
        &[],
        program_start,
    );
    let nodes = opts.count(&["-N", "--nodes"]);
    let tasks = opts.count(&["-n", "--ntasks"]);
    let gpus = opts.count(&["--gpus-per-node", "--gpus-per-task"]);

    let before = found.spec.launcher;
    if rest.first().is_some_and(|w| launcher_of(w).is_some() || matches!(basename(w), "bash" | "sh") || (is_python(w) && rest.get(1).map(String::as_str) == Some("-m"))) {
        visit(rest, found, depth + 1);
    }
    let inner = found.spec.launcher.is_some() && found.spec.launcher != before;
    if found.spec.nodes.is_none() {
        found.spec.nodes = nodes;
    }
    if !inner {
        found.spec.launcher = Some(Launcher::Srun);
        found.spec.total_gpus = tasks;
        found.spec.gpus_per_node = gpus;
        program(rest, found);
    }
    found.done = true;
}

fn torchrun(words: &[String], found: &mut Found) {
    let (opts, rest) = split_options(
        words,
        &["--standalone", "--no_python", "--no-python", "--module", "-m", "--run_path"],
        &[],
        is_script,
    );
    found.spec.launcher = Some(Launcher::Torchrun);
    found.spec.nodes = opts.count(&["--nnodes"]);
    found.spec.gpus_per_node = opts.count(&["--nproc_per_node", "--nproc-per-node"]);
    set_port(found, opts.get(&["--master_port", "--master-port"]));
    if found.spec.master_port.is_none() {
        set_port(found, opts.get(&["--rdzv_endpoint", "--rdzv-endpoint"]));
    }
    program(rest, found);
    found.done = true;
}

fn mpiexec(words: &[String], found: &mut Found, depth: usize) {
    let program_start = |w: &str| is_python(w) || is_script(w) || launcher_of(w).is_some();
    let (opts, rest) = split_options(
        words,
        &["--no-transfer", "-l", "--label"],
        &["-genv", "-env", "--env", "--genv"],
        program_start,
    );
    found.spec.launcher = Some(Launcher::Mpiexec);
    found.spec.total_gpus = opts.count(&["-n", "-np", "--np"]);
    found.spec.gpus_per_node = opts.count(&["-ppn", "--ppn", "-npernode", "--npernode"]);
    for (name, value) in &opts.pairs {
        let Some(value) = value else { continue };
        let port = match name.as_str() {
            "-genv" | "-env" | "--env" | "--genv" => value.strip_prefix("MASTER_PORT "),
            "-x" => value.strip_prefix("MASTER_PORT="),
            _ => None,
        };
        if port.is_some() {
            set_port(found, port);
        }
    }
    if rest.first().is_some_and(|w| launcher_of(w).is_some()) {
        let outer = found.spec.clone();
        visit(rest, found, depth + 1);
        if found.spec.nodes.is_none() {
            found.spec.nodes = outer.nodes;
        }
    } else {
        program(rest, found);
    }
    found.done = true;
}

fn strip_config(found: &mut Found) {
    let args = split_commands(&found.spec.train_args).into_iter().next().unwrap_or_default();
    let mut kept: Vec<String> = Vec::new();
    let mut config = None;
    let mut i = 0;
    while i < args.len() {
        if args[i] == "--deepspeed_config" || args[i] == "--deepspeed-config" {
            config = args.get(i + 1).cloned();
            i += 2;
            continue;
        }
        if let Some(v) = args[i].strip_prefix("--deepspeed_config=") {
            config = Some(v.to_string());
            i += 1;
            continue;
        }
        kept.push(args[i].clone());
        i += 1;
    }
    if config.is_none() {
        if let Some(pos) = kept.iter().rposition(|a| a.ends_with(".json") && !a.starts_with('-')) {
            let prev_is_flag = pos > 0 && kept[pos - 1].starts_with("--") && !kept[pos - 1].contains('=');
            if !prev_is_flag {
                config = Some(kept.remove(pos));
            }
        }
    }
    if config.is_some() {
        found.spec.deepspeed_config = config;
        found.spec.train_args = join_words(&kept);
    }
}

fn deepspeed(words: &[String], found: &mut Found) {
    let (opts, rest) = split_options(
        words,
        &["--no_python", "--no_local_rank", "--force_multi", "--autotuning"],
        &[],
        is_script,
    );
    found.spec.launcher = Some(Launcher::Deepspeed);
    found.spec.nodes = opts.count(&["--num_nodes", "--num-nodes"]);
    found.spec.gpus_per_node = opts.count(&["--num_gpus", "--num-gpus"]);
    set_port(found, opts.get(&["--master_port", "--master-port"]));
    program(rest, found);
    strip_config(found);
    found.done = true;
}

fn accelerate(words: &[String], found: &mut Found) {
    let (opts, rest) = split_options(
        words,
        &["--multi_gpu", "--use_deepspeed", "--use_fsdp", "--cpu", "-m", "--module"],
        &[],
        is_script,
    );
    found.spec.launcher = Some(Launcher::Accelerate);
    found.spec.nodes = opts.count(&["--num_machines", "--num-machines"]);
    found.spec.total_gpus = opts.count(&["--num_processes", "--num-processes"]);
    set_port(found, opts.get(&["--main_process_port", "--main-process-port"]));
    program(rest, found);
    found.done = true;
}
