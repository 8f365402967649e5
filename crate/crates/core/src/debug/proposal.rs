//! Free-text repair proposals turned into typed actions.

use std::sync::OnceLock;

use regex::Regex;

use super::{Edit, RepairAction};

struct Grammar {
    export: Regex,
    module: Regex,
    pip: Regex,
    pin: Regex,
    nightly: Regex,
    add_arg: Regex,
    set: Regex,
    switch: Regex,
    prepend: Regex,
}

fn grammar() -> &'static Grammar {
    static G: OnceLock<Grammar> = OnceLock::new();
    G.get_or_init(|| {
        let r = |p: &str| Regex::new(p).expect("proposal pattern compiles");
        Grammar {
            export: r(r"^(?i:export)\s+([A-Za-z_][A-Za-z0-9_]*)(?:=(\S.*))?$"),
            module: r(r"^(?i:module\s+load)\s+(\S+)$"),
            pip: r(r"^(?i:pip\s+install)\s+(?:(?:-U|--upgrade|--pre)\s+)*([A-Za-z0-9_.\-]+)(?:==(\S+))?$"),
            pin: r(r"^(?i:pin)\s+([A-Za-z0-9_.\-]+)(?:\s+(?:to\s+)?(\S+))?$"),
            nightly: r(r"(?i)\bnightly\b.*\b(?:pytorch|torch)\b|\b(?:pytorch|torch)\b.*\bnightly\b"),
            add_arg: r(r"^(?i:add\s+args?)\s+(.+)$"),
            set: r(r"^(?i:set)\s+([a-z_]+)\s*(?:=|\s)\s*(\S.*)$"),
            switch: r(r"^(?i:(?:switch\s+to|switch|use)\s+template)\s+(\S+)$"),
            prepend: r(r"^(?i:prepend)\s+(.+)$"),
        }
    })
}

fn unquote(s: &str) -> String {
    let s = s.trim();
    for q in ['`', '"', '\''] {
        if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
            return s[1..s.len() - 1].to_string();
        }
    }
    s.to_string()
}

/// Parses one proposal line. Lines outside the grammar are dropped.
pub fn parse_proposal(text: &str) -> Option<RepairAction> {
    let line = unquote(text.trim().trim_end_matches('.'));
    let g = grammar();
    let edit = if let Some(c) = g.export.captures(&line) {
        Edit::ExportEnv {
            name: c[1].to_string(),
            value: c.get(2).map(|m| m.as_str().trim().to_string()),
        }
    } else if let Some(c) = g.module.captures(&line) {
        Edit::AddModuleLoad { module: c[1].to_string() }
    } else if let Some(c) = g.pip.captures(&line) {
        Edit::PinVersion {
            package: c[1].to_string(),
            version: c.get(2).map(|m| m.as_str().to_string()),
        }
    } else if let Some(c) = g.pin.captures(&line) {
        Edit::PinVersion {
            package: c[1].to_string(),
            version: c.get(2).map(|m| m.as_str().to_string()),
        }
    } else if g.nightly.is_match(&line) {
        Edit::PinVersion {
            package: "torch".into(),
            version: Some("nightly".into()),
        }
    } else if let Some(c) = g.add_arg.captures(&line) {
        Edit::AddArg { args: unquote(&c[1]) }
    } else if let Some(c) = g.switch.captures(&line) {
        Edit::SwitchTemplate { template_id: c[1].to_string() }
    } else if let Some(c) = g.set.captures(&line) {
        Edit::SetParam {
            field: c[1].to_string(),
            value: unquote(&c[2]),
        }
    } else if let Some(c) = g.prepend.captures(&line) {
        Edit::PrependLine { line: unquote(&c[1]) }
    } else {
        log::warn!("dropping unparseable repair proposal: {text}");
        return None;
    };
    Some(RepairAction::new(edit, format!("remote proposal: {}", text.trim())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edit(s: &str) -> Option<Edit> {
        parse_proposal(s).map(|a| a.edit)
    }

    #[test]
    fn grammar_examples() {
        assert_eq!(
            edit("export NCCL_DEBUG=INFO"),
            Some(Edit::ExportEnv { name: "NCCL_DEBUG".into(), value: Some("INFO".into()) })
        );
        assert_eq!(edit("`export PYTHONPATH`"), Some(Edit::ExportEnv { name: "PYTHONPATH".into(), value: None }));
        assert_eq!(edit("module load cuda/12.4."), Some(Edit::AddModuleLoad { module: "cuda/12.4".into() }));
        assert_eq!(
            edit("pip install --upgrade deepspeed==0.15.4"),
            Some(Edit::PinVersion { package: "deepspeed".into(), version: Some("0.15.4".into()) })
        );
        assert_eq!(
            edit("Try the nightly PyTorch build"),
            Some(Edit::PinVersion { package: "torch".into(), version: Some("nightly".into()) })
        );
        assert_eq!(edit("add args --bf16"), Some(Edit::AddArg { args: "--bf16".into() }));
        assert_eq!(
            edit("set master_port 29600"),
            Some(Edit::SetParam { field: "master_port".into(), value: "29600".into() })
        );
        assert_eq!(
            edit("switch to template delta-fsdp"),
            Some(Edit::SwitchTemplate { template_id: "delta-fsdp".into() })
        );
        assert_eq!(edit("prepend \"set -x\""), Some(Edit::PrependLine { line: "set -x".into() }));
    }

    #[test]
    fn prose_is_dropped() {
        assert_eq!(edit("reinstall the universe"), None);
        assert_eq!(edit(""), None);
    }
}
