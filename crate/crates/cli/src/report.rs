//! Plain-text tables and reports.

use std::fmt::Write;

use clusterport::debug::LoopStatus;
use clusterport::pipeline::{GenerateReport, MatrixCell, MATRIX_COLUMNS};
use clusterport::registry::ClusterProfile;
use clusterport::templates::Template;

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        out.push_str(padded.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec());
    for row in rows {
        line(row.iter().map(String::as_str).collect());
    }
    out
}

pub fn template_table<'a>(templates: impl Iterator<Item = &'a Template>) -> String {
    let rows: Vec<Vec<String>> = templates
        .map(|t| {
            vec![
                t.id.clone(),
                t.cluster.clone(),
                t.framework.to_string(),
                t.strategy.to_string(),
                t.launcher.to_string(),
                if t.verified { "yes" } else { "no" }.to_string(),
            ]
        })
        .collect();
    table(&["ID", "CLUSTER", "FRAMEWORK", "STRATEGY", "LAUNCHER", "VERIFIED"], &rows)
}

pub fn cluster_table<'a>(profiles: impl Iterator<Item = &'a ClusterProfile>) -> String {
    let rows: Vec<Vec<String>> = profiles
        .map(|p| {
            vec![
                p.id.clone(),
                p.scheduler.to_string(),
                p.default_launcher.to_string(),
                p.gpus_per_node.to_string(),
                p.gpu_type.clone(),
                if p.env_propagation { "yes" } else { "no" }.to_string(),
                p.max_walltime_minutes.to_string(),
            ]
        })
        .collect();
    table(
        &["ID", "SCHEDULER", "LAUNCHER", "GPUS/NODE", "GPU", "ENV-PROPAGATION", "MAX-WALLTIME-MIN"],
        &rows,
    )
}

pub fn matrix_table(cells: &[MatrixCell]) -> String {
    let mut header = vec!["CLUSTER"];
    header.extend(MATRIX_COLUMNS.iter().map(|(name, _, _)| *name));
    let mut rows: Vec<Vec<String>> = Vec::new();
    for cell in cells {
        if rows.last().is_none_or(|r| r[0] != cell.cluster) {
            rows.push(vec![cell.cluster.clone()]);
        }
        let mark = match cell.status {
            LoopStatus::Success if cell.iterations_used == 0 => "pass".to_string(),
            LoopStatus::Success => format!("pass ({} fix)", cell.iterations_used),
            LoopStatus::Unresolved => "FAIL".to_string(),
        };
        rows.last_mut().expect("row pushed above").push(mark);
    }
    let passed = cells.iter().filter(|c| c.status == LoopStatus::Success).count();
    let mut out = table(&header, &rows);
    let _ = writeln!(out, "{passed}/{} cells verified", cells.len());
    out
}

pub fn generate_report(r: &GenerateReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "job: {}", r.spec);
    let _ = writeln!(out, "candidates:");
    for c in &r.candidates {
        let _ = writeln!(
            out,
            "  {:<20} {:.3}{}",
            c.template_id,
            c.score,
            if c.exact { "  exact" } else { "" }
        );
    }
    for a in &r.attempts {
        let _ = writeln!(out, "attempt {}:", a.template_id);
        if let Some(e) = &a.error {
            let _ = writeln!(out, "  error: {e}");
        }
        for f in &a.findings {
            let _ = writeln!(out, "  lint: {f}");
        }
        if let Some(o) = &a.outcome {
            for (i, h) in o.history.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "  submission {}: exit {} [{}] {}",
                    i + 1,
                    h.result.exit_code,
                    h.diagnosis.category,
                    h.diagnosis.fingerprint_id.as_deref().unwrap_or("no fingerprint")
                );
                let _ = writeln!(out, "    {}", h.diagnosis.explanation);
                match &h.action {
                    Some(a) => {
                        let _ = writeln!(out, "    repair: {a} ({})", a.rationale);
                    }
                    None => {
                        let _ = writeln!(out, "    no untried repair left");
                    }
                }
            }
            let _ = writeln!(
                out,
                "  status: {:?} after {} repair(s)",
                o.status, o.iterations_used
            );
        }
    }
    out
}

pub fn unresolved_summary(r: &GenerateReport) -> String {
    let mut out = format!("unresolved: no candidate passed verification for {}\n", r.spec);
    for a in &r.attempts {
        let last = a.outcome.as_ref().and_then(|o| o.history.last());
        match (last, &a.error) {
            (Some(h), _) => {
                let _ = writeln!(
                    out,
                    "  {}: {} ({})",
                    a.template_id,
                    h.diagnosis.fingerprint_id.as_deref().unwrap_or("unknown failure"),
                    h.diagnosis.explanation
                );
            }
            (None, Some(e)) => {
                let _ = writeln!(out, "  {}: {e}", a.template_id);
            }
            (None, None) => {}
        }
    }
    out
}
