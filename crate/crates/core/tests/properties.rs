use clusterport::intent::{finalize, parse_script, JobSpec, PartialJobSpec};
use clusterport::kinds::Provenance;
use clusterport::registry::{ClusterProfile, ProfileSet};
use clusterport::retrieval::candidates;
use clusterport::synthesis::{bind, render, ParamBinding};
use clusterport::templates::{Template, TemplateSet};
use proptest::prelude::*;

const ENTRIES: [&str; 4] = ["train.py", "run_clm.py", "src/train_gpt2.py", "examples/vit/run_image_classification.py"];
const ARGS: [&str; 3] = ["", "--lr 1e-4", "--epochs 3 --bf16"];

fn verified() -> Vec<Template> {
    TemplateSet::bundled().iter().filter(|t| t.verified).cloned().collect()
}

fn spec_for(t: &Template, p: &ClusterProfile, nodes: u32, per: u32, port: Option<u16>, entry: usize, args: usize) -> JobSpec {
    finalize(
        &PartialJobSpec {
            cluster: Some(t.cluster.clone()),
            framework: Some(t.framework),
            strategy: Some(t.strategy),
            launcher: Some(t.launcher),
            nodes: Some(nodes),
            gpus_per_node: Some(per.min(p.gpus_per_node)),
            master_port: port,
            entry_script: Some(ENTRIES[entry].into()),
            train_args: ARGS[args].into(),
            deepspeed_config: Some("ds_config.json".into()),
            ..Default::default()
        },
        p,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn world_size_is_nodes_times_per_node(
        t in prop::sample::select(verified()),
        nodes in 1u32..=64,
        per in 1u32..=8,
        use_total in any::<bool>(),
    ) {
        let profiles = ProfileSet::bundled();
        let p = profiles.get(&t.cluster).unwrap();
        let per = per.min(p.gpus_per_node);
        let partial = PartialJobSpec {
            cluster: Some(t.cluster.clone()),
            framework: Some(t.framework),
            nodes: Some(nodes),
            gpus_per_node: (!use_total).then_some(per),
            total_gpus: use_total.then_some(nodes * per),
            entry_script: Some("train.py".into()),
            ..Default::default()
        };
        let s = finalize(&partial, p).unwrap();
        prop_assert_eq!(s.world_size(), s.nodes() * s.gpus_per_node());
        prop_assert_eq!((s.nodes(), s.gpus_per_node()), (nodes, per));
    }

    #[test]
    fn parse_recovers_what_was_rendered(
        t in prop::sample::select(verified()),
        nodes in 1u32..=32,
        per in 1u32..=8,
        port in prop::option::of(1024u16..=65535),
        entry in 0usize..ENTRIES.len(),
        args in 0usize..ARGS.len(),
    ) {
        let profiles = ProfileSet::bundled();
        let p = profiles.get(&t.cluster).unwrap();
        let s = spec_for(&t, p, nodes, per, port, entry, args);
        let binding = bind(&s, &t, p).unwrap();
        let r = render(&t, &binding).unwrap();
        let mut parsed = parse_script(&r.text);
        parsed.cluster = Some(t.cluster.clone());
        parsed.framework = Some(t.framework);
        parsed.strategy = Some(t.strategy);
        let back = finalize(&parsed, p).unwrap();
        prop_assert_eq!(back.nodes(), s.nodes(), "{}", r.text);
        prop_assert_eq!(back.gpus_per_node(), s.gpus_per_node(), "{}", r.text);
        prop_assert_eq!(back.world_size(), s.world_size());
        prop_assert_eq!(Some(back.master_port() as u64), binding.integer("master_port"), "{}", r.text);
        prop_assert_eq!(back.entry_script(), s.entry_script(), "{}", r.text);
        if port.is_some() {
            prop_assert_eq!(back.master_port(), s.master_port());
        }
    }

    #[test]
    fn render_copies_everything_but_placeholders(
        parts in prop::collection::vec(("[^{}$]{0,12}", "[a-z][a-z0-9_]{0,6}", "[^{}]{0,8}"), 0..6),
        tail in "[^{}$]{0,12}",
    ) {
        let mut body = String::new();
        let mut expected = String::new();
        let mut binding = ParamBinding::new();
        let mut params = Vec::new();
        for (lit, name, value) in &parts {
            body.push_str(lit);
            body.push('{');
            body.push_str(name);
            body.push('}');
            expected.push_str(lit);
            let value = binding.get(name).map(|v| v.to_string()).unwrap_or_else(|| value.clone());
            expected.push_str(&value);
            binding = binding.with(name, value.as_str(), Provenance::User);
            if !params.iter().any(|n: &String| n == name) {
                params.push(name.clone());
            }
        }
        body.push_str(&tail);
        expected.push_str(&tail);
        let t = Template {
            id: "prop".into(),
            cluster: "delta".into(),
            framework: clusterport::kinds::Framework::Pytorch,
            strategy: clusterport::kinds::Strategy::Ddp,
            launcher: clusterport::kinds::Launcher::Torchrun,
            body,
            params: params
                .iter()
                .map(|n| serde_json::from_value(serde_json::json!({"name": n, "kind": "text", "required": true})).unwrap())
                .collect(),
            verified: true,
            notes: String::new(),
        };
        let r = render(&t, &binding).unwrap();
        prop_assert_eq!(r.text, expected);
    }

    #[test]
    fn ranking_is_deterministic_and_full_matches_lead(
        t in prop::sample::select(verified()),
        nodes in 1u32..=4,
    ) {
        let profiles = ProfileSet::bundled();
        let p = profiles.get(&t.cluster).unwrap();
        let s = spec_for(&t, p, nodes, 1, None, 0, 0);
        let set = TemplateSet::bundled();
        let a = candidates(&s, &set, None).unwrap();
        let b = candidates(&s, &set, None).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
        prop_assert!(a[0].exact);
        prop_assert_eq!(a[0].score, 1.0);
        let first_partial = a.iter().position(|c| !c.exact).unwrap();
        prop_assert!(a[first_partial..].iter().all(|c| !c.exact && c.score < 1.0));
    }

    #[test]
    fn more_matching_fields_never_rank_lower(
        t in prop::sample::select(verified()),
    ) {
        let profiles = ProfileSet::bundled();
        let p = profiles.get(&t.cluster).unwrap();
        let s = spec_for(&t, p, 2, 1, None, 0, 0);
        let set = TemplateSet::bundled();
        let ranked = candidates(&s, &set, None).unwrap();
        let hits = |id: &str| {
            let c = set.get(id).unwrap();
            [c.cluster == s.cluster(), c.framework == s.framework(), c.strategy == s.strategy(), c.launcher == s.launcher()]
        };
        for x in &ranked {
            for y in &ranked {
                let (hx, hy) = (hits(&x.template_id), hits(&y.template_id));
                if hx.iter().zip(&hy).all(|(a, b)| *a >= *b) {
                    prop_assert!(x.score >= y.score);
                }
            }
        }
    }
}
