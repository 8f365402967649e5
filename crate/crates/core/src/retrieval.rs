//! Ranking templates against a job.
//!
//! Metadata decides first: cluster, framework, strategy and launcher matches
//! carry fixed weights. Text similarity only breaks in when nothing matches
//! closely, and can never lift a partial match above a full one.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::intent::JobSpec;
use crate::templates::{Template, TemplateSet};

pub const CLUSTER_WEIGHT: f64 = 0.4;
pub const FRAMEWORK_WEIGHT: f64 = 0.25;
pub const STRATEGY_WEIGHT: f64 = 0.25;
pub const LAUNCHER_WEIGHT: f64 = 0.1;
pub const SIMILARITY_WEIGHT: f64 = 0.1;
/// Metadata score at or above which similarity is not consulted.
pub const CLOSE_MATCH: f64 = 0.9;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("the template repository is empty; nothing to rank")]
    NoCandidates,
    #[error("k must be at least 1")]
    ZeroK,
}

/// Produces vectors for text. Returning `None` falls back to word overlap.
pub trait Embedder {
    fn embed(&self, text: &str) -> Option<Vec<f64>>;
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ScoreBreakdown {
    pub cluster: f64,
    pub framework: f64,
    pub strategy: f64,
    pub launcher: f64,
    /// Raw similarity in [0,1]; zero when similarity was not consulted.
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedCandidate {
    pub template_id: String,
    pub score: f64,
    pub breakdown: ScoreBreakdown,
    /// All four key fields match.
    pub exact: bool,
}

fn metadata(spec: &JobSpec, t: &Template) -> ScoreBreakdown {
    let w = |hit: bool, weight: f64| if hit { weight } else { 0.0 };
    ScoreBreakdown {
        cluster: w(t.cluster == spec.cluster(), CLUSTER_WEIGHT),
        framework: w(t.framework == spec.framework(), FRAMEWORK_WEIGHT),
        strategy: w(t.strategy == spec.strategy(), STRATEGY_WEIGHT),
        launcher: w(t.launcher == spec.launcher(), LAUNCHER_WEIGHT),
        similarity: 0.0,
    }
}

fn meta_sum(b: &ScoreBreakdown) -> f64 {
    // summed in hundredths so a full match is exactly 1.0
    let hundredths = [b.cluster, b.framework, b.strategy, b.launcher]
        .iter()
        .map(|x| (x * 100.0).round() as i64)
        .sum::<i64>();
    hundredths as f64 / 100.0
}

fn words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Jaccard index of the lowercase word sets of `a` and `b`.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let (a, b) = (words(a), words(b));
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Cosine similarity clamped to [0,1].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() || a.is_empty() {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

fn template_text(t: &Template) -> String {
    format!("{}\n{}", t.notes, t.body)
}

/// Ranks every template in `set` for `spec`, best first, ties by id.
pub fn candidates(
    spec: &JobSpec,
    set: &TemplateSet,
    embedder: Option<&dyn Embedder>,
) -> Result<Vec<RankedCandidate>, RetrievalError> {
    if set.is_empty() {
        return Err(RetrievalError::NoCandidates);
    }
    let mut ranked: Vec<RankedCandidate> = set
        .iter()
        .map(|t| {
            let breakdown = metadata(spec, t);
            let score = meta_sum(&breakdown);
            RankedCandidate {
                template_id: t.id.clone(),
                exact: score >= 1.0,
                score,
                breakdown,
            }
        })
        .collect();

    let close = ranked.iter().any(|c| c.score >= CLOSE_MATCH);
    if !close {
        let description = spec.description();
        let query = embedder.and_then(|e| e.embed(&description));
        for c in &mut ranked {
            let t = set.get(&c.template_id).expect("ranked ids come from the set");
            let text = template_text(t);
            let sim = match (&query, embedder) {
                (Some(q), Some(e)) => match e.embed(&text) {
                    Some(v) => cosine(q, &v),
                    None => jaccard(&description, &text),
                },
                _ => jaccard(&description, &text),
            };
            c.breakdown.similarity = sim;
            c.score = (c.score + SIMILARITY_WEIGHT * sim) / (1.0 + SIMILARITY_WEIGHT);
        }
    }
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.template_id.cmp(&b.template_id))
    });
    Ok(ranked)
}

/// The first `k` candidates, order preserved.
pub fn select(cands: &[RankedCandidate], k: usize) -> Result<Vec<RankedCandidate>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    Ok(cands.iter().take(k).cloned().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intent::{finalize, PartialJobSpec};
    use crate::kinds::{Framework, Launcher, Strategy};
    use crate::registry::ProfileSet;
    use crate::templates::load_repository;

    fn spec(cluster: &str, framework: Framework, strategy: Strategy, launcher: Launcher) -> JobSpec {
        let profiles = ProfileSet::bundled();
        finalize(
            &PartialJobSpec {
                cluster: Some(cluster.into()),
                framework: Some(framework),
                strategy: Some(strategy),
                launcher: Some(launcher),
                nodes: Some(1),
                gpus_per_node: Some(1),
                entry_script: Some("train.py".into()),
                ..Default::default()
            },
            profiles.get(cluster).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn exact_match_ranks_first_with_full_score() {
        let s = spec("perlmutter", Framework::Pytorch, Strategy::Ddp, Launcher::Torchrun);
        let c = candidates(&s, &TemplateSet::bundled(), None).unwrap();
        assert_eq!(c[0].template_id, "perlmutter-ddp");
        assert_eq!(c[0].score, 1.0);
        assert!(c[0].exact);
        assert!(c[1].score < 1.0);
    }

    #[test]
    fn absent_cell_is_non_exact() {
        let s = spec("aurora", Framework::Accelerate, Strategy::Ddp, Launcher::Accelerate);
        let c = candidates(&s, &TemplateSet::bundled(), None).unwrap();
        assert!(c[0].score < 1.0);
        assert!(!c[0].exact);
        assert!(c.iter().all(|x| !x.exact));
    }

    #[test]
    fn empty_set_has_no_candidates() {
        let s = spec("delta", Framework::Pytorch, Strategy::Ddp, Launcher::Torchrun);
        assert!(matches!(
            candidates(&s, &TemplateSet::default(), None),
            Err(RetrievalError::NoCandidates)
        ));
    }

    #[test]
    fn singleton_set_ranks_its_template() {
        let s = spec("delta", Framework::Pytorch, Strategy::Ddp, Launcher::Torchrun);
        let set = TemplateSet::bundled();
        let only = load_repository(&format!("[{}]", serde_json::to_string(set.get("vista-fsdp").unwrap()).unwrap())).unwrap();
        assert_eq!(candidates(&s, &only, None).unwrap()[0].template_id, "vista-fsdp");
    }

    #[test]
    fn select_truncates_and_rejects_zero() {
        let s = spec("delta", Framework::Pytorch, Strategy::Ddp, Launcher::Torchrun);
        let c = candidates(&s, &TemplateSet::bundled(), None).unwrap();
        assert_eq!(select(&c, 1).unwrap().len(), 1);
        assert_eq!(select(&c[..2], 5).unwrap().len(), 2);
        assert!(select(&c, 0).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let mut a = RankedCandidate {
            template_id: "a-y".into(),
            score: 0.65,
            breakdown: ScoreBreakdown::default(),
            exact: false,
        };
        let mut v = vec![a.clone()];
        a.template_id = "a-x".into();
        v.push(a);
        v.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.template_id.cmp(&b.template_id)));
        assert_eq!(v[0].template_id, "a-x");
    }

    #[test]
    fn similarity_helpers() {
        assert_eq!(jaccard("a b", "b c"), 1.0 / 3.0);
        assert_eq!(jaccard("", ""), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]), 0.0);
    }

    struct Fixed;
    impl Embedder for Fixed {
        fn embed(&self, text: &str) -> Option<Vec<f64>> {
            Some(vec![text.len() as f64, 1.0])
        }
    }

    #[test]
    fn embedder_path_is_used_when_no_close_match() {
        let s = spec("aurora", Framework::Accelerate, Strategy::Ddp, Launcher::Accelerate);
        let set = TemplateSet::bundled();
        let with = candidates(&s, &set, Some(&Fixed)).unwrap();
        assert!(with.iter().all(|c| c.breakdown.similarity > 0.0));
        assert!(with.iter().all(|c| (0.0..=1.0).contains(&c.score)));
    }
}
