//! Rule-based extraction of job fields from free text.

use std::sync::OnceLock;

use regex::{Captures, Regex};

use super::numbers::{count_word_pattern, parse_count};
use super::{IntentError, PartialJobSpec};
use crate::kinds::{Framework, Launcher, Strategy};
use crate::registry::ProfileSet;

/// Something that turns a free-text request into a partial job spec.
///
/// Extraction never fails; absent information stays absent.
pub trait Extractor {
    fn extract(&self, text: &str) -> PartialJobSpec;
}

/// Runs `extractor` on `text`, rejecting empty input.
pub fn extract(text: &str, extractor: &dyn Extractor) -> Result<PartialJobSpec, IntentError> {
    if text.trim().is_empty() {
        return Err(IntentError::EmptyInput);
    }
    let mut spec = extractor.extract(text);
    spec.sanitize();
    Ok(spec)
}

/// Deterministic extractor built from regular expressions and the cluster
/// names known to a registry.
#[derive(Clone, Debug)]
pub struct RuleExtractor {
    /// (lowercased name, profile id), longest names first.
    cluster_names: Vec<(String, String)>,
}

impl RuleExtractor {
    pub fn new(profiles: &ProfileSet) -> RuleExtractor {
        let mut cluster_names: Vec<(String, String)> = Vec::new();
        for profile in profiles.iter() {
            cluster_names.push((profile.id.to_lowercase(), profile.id.clone()));
            for alias in &profile.aliases {
                // two-letter aliases such as "pm" are too ambiguous in prose
                if alias.chars().count() > 2 {
                    cluster_names.push((alias.to_lowercase(), profile.id.clone()));
                }
            }
        }
        cluster_names.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        RuleExtractor { cluster_names }
    }

    fn cluster(&self, lower: &str) -> Option<String> {
        if let Some(c) = patterns().cluster_flag.captures(lower) {
            let named = c[1].to_string();
            return Some(
                self.cluster_names
                    .iter()
                    .find(|(n, _)| *n == named)
                    .map(|(_, id)| id.clone())
                    .unwrap_or(named),
            );
        }
        let mut best: Option<(usize, usize, &str)> = None;
        for (name, id) in &self.cluster_names {
            for (start, _) in lower.match_indices(name.as_str()) {
                let end = start + name.len();
                let before = lower[..start].chars().next_back();
                let after = lower[end..].chars().next();
                let boundary = |c: Option<char>| !c.is_some_and(|c| c.is_alphanumeric() || c == '_');
                if !(boundary(before) && boundary(after)) {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((s, len, _)) => start < s || (start == s && name.len() > len),
                };
                if better {
                    best = Some((start, name.len(), id));
                }
            }
        }
        best.map(|(_, _, id)| id.to_string())
    }
}

impl Extractor for RuleExtractor {
    fn extract(&self, text: &str) -> PartialJobSpec {
        let p = patterns();
        let lower = text.to_lowercase();
        let mut spec = PartialJobSpec {
            cluster: self.cluster(&lower),
            ..Default::default()
        };

        spec.framework = p
            .framework_flag
            .captures(&lower)
            .and_then(|c| c[1].parse().ok())
            .or_else(|| first_of(&lower, &p.frameworks));
        spec.strategy = p
            .strategy_flag
            .captures(&lower)
            .and_then(|c| c[1].parse().ok())
            .or_else(|| first_of(&lower, &p.strategies));
        spec.launcher = p
            .launcher_flag
            .captures(&lower)
            .and_then(|c| c[1].parse().ok())
            .or_else(|| first_of(&lower, &p.launchers));
        if spec.framework.is_none() && spec.launcher.is_none() {
            spec.framework = match spec.strategy {
                Some(Strategy::Zero3) => Some(Framework::Deepspeed),
                Some(Strategy::Fsdp) => Some(Framework::Pytorch),
                _ => None,
            };
        }

        extract_counts(text, &lower, &mut spec);

        spec.master_port = p
            .port
            .iter()
            .find_map(|re| re.captures(&lower))
            .and_then(|c| c[1].parse::<u16>().ok());
        spec.entry_script = p.entry.find(text).map(|m| m.as_str().to_string());
        spec.deepspeed_config = p.json.find(text).map(|m| m.as_str().to_string());

        spec.train_args = if let Some(c) = p.train_args.captures(text) {
            trim_sentence_end(c[1].trim()).to_string()
        } else if let Some(m) = p.entry.find(text) {
            flag_tail(&text[m.end()..])
        } else {
            String::new()
        };
        if spec.train_args.is_empty() && spec == PartialJobSpec::default() {
            spec.train_args = text.trim().to_string();
        }
        spec
    }
}

fn trim_sentence_end(s: &str) -> &str {
    match s.strip_suffix('.') {
        Some(rest) if !rest.ends_with('.') => rest,
        _ => s,
    }
}

/// Leading `-`-prefixed flags (each with at most one value) after the entry script.
fn flag_tail(rest: &str) -> String {
    let mut out: Vec<&str> = Vec::new();
    let mut expecting_value = false;
    for token in rest.split_whitespace() {
        if token.starts_with('-') && token.len() > 1 {
            let cleaned = token.trim_end_matches([',', ';']);
            out.push(cleaned);
            expecting_value = !cleaned.contains('=') && cleaned.len() == token.len();
        } else if expecting_value {
            let cleaned = token.trim_end_matches([',', ';']);
            out.push(trim_sentence_end(cleaned));
            expecting_value = false;
            if cleaned.len() != token.len() {
                break;
            }
        } else {
            break;
        }
    }
    out.join(" ")
}

fn first_of<T: Copy>(lower: &str, table: &[(Regex, T)]) -> Option<T> {
    table.iter().find(|(re, _)| re.is_match(lower)).map(|(_, v)| *v)
}

fn count(c: &Captures<'_>) -> Option<u32> {
    c.name("n").and_then(|m| parse_count(m.as_str()))
}

/// Finds the first match among `res` in `text`, blanks it out so later, more
/// general patterns cannot reuse it, and returns the captured count.
fn take(text: &mut String, res: &[Regex]) -> Option<u32> {
    for re in res {
        let found = re.captures(text).and_then(|c| {
            let whole = c.get(0).expect("group 0");
            count(&c).map(|n| (n, whole.range()))
        });
        if let Some((n, range)) = found {
            let blank = " ".repeat(range.len());
            text.replace_range(range, &blank);
            return Some(n);
        }
    }
    None
}

fn extract_counts(original: &str, lower: &str, spec: &mut PartialJobSpec) {
    let p = patterns();
    let flag = |res: &[Regex], src: &str| {
        res.iter()
            .find_map(|re| re.captures(src).and_then(|c| count(&c)))
    };
    let flag_nodes = flag(&p.nodes_flags_cs, original).or_else(|| flag(&p.nodes_flags, lower));
    let flag_per_node = flag(&p.per_node_flags, lower);
    let flag_total = flag(&p.total_flags_cs, original).or_else(|| flag(&p.total_flags, lower));

    let mut rest = p.flag_strip.replace_all(lower, " ").into_owned();
    let per_node = take(&mut rest, &p.per_node);
    let total = take(&mut rest, &p.total);
    let nodes = take(&mut rest, &p.nodes);
    let bare_total = take(&mut rest, &p.bare_total);

    spec.nodes = flag_nodes.or(nodes);
    spec.gpus_per_node = flag_per_node.or(per_node);
    spec.total_gpus = flag_total.or(total).or(bare_total);
    if spec.nodes.is_none()
        && spec.gpus_per_node.is_none()
        && flag_total.is_none()
        && total.is_none()
        && bare_total.is_some()
    {
        spec.nodes = Some(1);
    }
}

struct Patterns {
    cluster_flag: Regex,
    framework_flag: Regex,
    strategy_flag: Regex,
    launcher_flag: Regex,
    frameworks: Vec<(Regex, Framework)>,
    strategies: Vec<(Regex, Strategy)>,
    launchers: Vec<(Regex, Launcher)>,
    nodes_flags_cs: Vec<Regex>,
    nodes_flags: Vec<Regex>,
    per_node_flags: Vec<Regex>,
    total_flags_cs: Vec<Regex>,
    total_flags: Vec<Regex>,
    flag_strip: Regex,
    per_node: Vec<Regex>,
    total: Vec<Regex>,
    nodes: Vec<Regex>,
    bare_total: Vec<Regex>,
    port: Vec<Regex>,
    entry: Regex,
    json: Regex,
    train_args: Regex,
}

fn patterns() -> &'static Patterns {
    static PATTERNS: OnceLock<Patterns> = OnceLock::new();
    PATTERNS.get_or_init(build_patterns)
}

fn build_patterns() -> Patterns {
    let re = |s: &str| Regex::new(s).unwrap_or_else(|e| panic!("bad pattern {s}: {e}"));
    let n = format!(r"(?P<n>\d+|{})", count_word_pattern());
    let gpu = r"(?:gpus?|gpu cards?|graphics cards?|cards|accelerators?|devices|gcds?|tiles)";
    let model = r"(?:(?:nvidia|amd|intel|[a-z]+\d+[a-z0-9]*)[- ]){0,2}";
    let node = r"(?:compute[- ])?(?:nodes?|servers?|machines?|hosts?)";
    let assign = r"\s*(?:[:=]|is|are|of|should be|set to|to)?\s*";
    let fill = |s: &str| {
        s.replace("{n}", &n)
            .replace("{gpu}", gpu)
            .replace("{model}", model)
            .replace("{node}", node)
            .replace("{assign}", assign)
    };
    let word = |s: &str| re(&format!(r"\b(?:{s})\b"));

    let flag_value = r"(?:\s*=\s*|\s+)(?P<n>\d+)";
    Patterns {
        cluster_flag: re(r"--(?:cluster|machine|system)(?:\s*=\s*|\s+)([a-z0-9][a-z0-9_-]*)"),
        framework_flag: re(r"--framework(?:\s*=\s*|\s+)([a-z0-9.-]+)"),
        strategy_flag: re(r"--strategy(?:\s*=\s*|\s+)([a-z0-9.-]+)"),
        launcher_flag: re(r"--launcher(?:\s*=\s*|\s+)([a-z0-9.-]+)"),
        frameworks: vec![
            (word(r"deep ?speed"), Framework::Deepspeed),
            (word(r"accelerate|hf accelerate"), Framework::Accelerate),
            (word(r"pytorch|torch"), Framework::Pytorch),
        ],
        strategies: vec![
            (
                word(r"zero[- ]?(?:stage[- ]?)?3|zero3|zero stage three|zero-three"),
                Strategy::Zero3,
            ),
            (word(r"fsdp|fully[- ]sharded(?: data[- ]parallel)?"), Strategy::Fsdp),
            (word(r"ddp|distributed data[- ]parallel|data[- ]parallel"), Strategy::Ddp),
        ],
        launchers: vec![
            (word(r"torchrun|torch\.distributed\.(?:run|launch)"), Launcher::Torchrun),
            (word(r"accelerate launch(?:er)?"), Launcher::Accelerate),
            (word(r"deepspeed launcher|deepspeed --"), Launcher::Deepspeed),
            (word(r"mpiexec|mpirun"), Launcher::Mpiexec),
            (word(r"srun"), Launcher::Srun),
        ],
        nodes_flags_cs: vec![re(&format!(r"(?:^|\s)-N{flag_value}\b"))],
        nodes_flags: vec![re(&format!(
            r"--(?:nodes|nnodes|num[_-]nodes|num[_-]machines){flag_value}\b"
        ))],
        per_node_flags: vec![
            re(&format!(
                r"--(?:gpus[_-]per[_-]node|nproc[_-]per[_-]node|ppn|num[_-]gpus){flag_value}\b"
            )),
            re(&format!(r"(?:^|\s)-ppn{flag_value}\b")),
        ],
        total_flags_cs: vec![re(&format!(r"(?:^|\s)-(?:n|np){flag_value}\b"))],
        total_flags: vec![re(&format!(
            r"--(?:total[_-]gpus|world[_-]size|ntasks|num[_-]processes){flag_value}\b"
        ))],
        flag_strip: re(r"(?:^|\s)--?[a-z][a-z0-9_-]*(?:\s*=\s*|\s+)\d+\b"),
        per_node: vec![
            re(&fill(
                r"\b{n}\s*(?:x\s*)?{model}(?:{gpu}\s*)?(?:per|/|a|on each|in each|for each|on every|in every)\s*{node}\b",
            )),
            re(&fill(r"\b{n}\s*{model}{gpu}\s+each\b")),
            re(&fill(
                r"\b(?:each|every|per)\s+(?:{node}\s*)?(?:has|with|having|uses|using|gets|runs|of|:)\s*{n}\s*{model}{gpu}\b",
            )),
            re(&fill(r"\b{gpu}[ _-]?(?:per|/|on each|each)[ _-]?{node}{assign}{n}\b")),
            re(&fill(r"\b{n}-gpu {node}\b")),
        ],
        total: vec![
            re(&fill(
                r"\b{n}\s*{model}{gpu}\s*(?:in total|total|overall|altogether|combined|in all)\b",
            )),
            re(&fill(r"\b(?:a total of|total of|total|overall)\s+{n}\s*{model}{gpu}\b")),
            re(&fill(
                r"\b(?:world[ _-]size|total[ _-]gpus?(?: count)?|gpu count|number of gpus|num[ _-]gpus){assign}{n}\b",
            )),
        ],
        nodes: vec![
            re(&fill(r"\b{n}\s*(?:x\s*)?(?:gpu |worker |physical )?{node}\b")),
            re(&fill(
                r"\b(?:number of nodes|node count|num[ _-]nodes|nodes?)\s*(?:[:=]|is|are|of|should be|set to)\s*{n}\b",
            )),
        ],
        bare_total: vec![re(&fill(r"\b{n}\s*(?:x\s*)?{model}{gpu}\b"))],
        port: vec![
            re(r"rdzv[_-]endpoint\s*=\s*[^\s:]+:(\d+)"),
            re(r"(?:master|main[ _-]process|rendezvous|rdzv)[ _-]?port(?:\s*number)?\s*(?:[:=]|is|of|to|at|should be|set to)?\s*(\d+)\b"),
            re(r"\bport(?:\s*number)?\s*(?:[:=]|is|of|at|should be|set to)?\s*(\d{4,5})\b"),
        ],
        entry: re(r"[A-Za-z0-9_~./-]*[A-Za-z0-9_]\.py\b"),
        json: re(r"[A-Za-z0-9_~./-]*[A-Za-z0-9_]\.json\b"),
        train_args: re(r"(?i)training (?:arguments?|args)\s*(?:is|are|:|=)\s*(.+?)\s*$"),
    }
}
