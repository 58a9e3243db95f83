use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use graphguide::attribution::{
    louvain_partition, modularity, span_interactions, token_interactions, AttentionSnapshot,
    WeightedGraph,
};
use graphguide::dataset::{
    reformulate, split_words, tokenize_instance, RawRecord, Task, WordPieceTokenizer,
};
use graphguide::evaluate::{
    compute_unfaithfulness, perturb_instance, AdjectiveLexicon, FaithfulnessRecord, LexiconTagger,
    PerturbationOutcome,
};
use graphguide::gnn::{Activation, GnnParameters, GnnVariant};
use graphguide::graphbuild::{
    build_graph, select_top_fraction, Explanation, ExplanationGraph, ExplanationKind,
    ScoredExplanation,
};
use graphguide::model::{GnnConfig, ModelConfig, Seq2Seq};
use proptest::prelude::*;

fn edges_strategy(n: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    proptest::collection::vec((0..n, 0..n), 0..=n * 2)
}

fn random_graph() -> impl Strategy<Value = (ExplanationGraph, Vec<f64>)> {
    (1usize..7).prop_flat_map(|n| {
        (
            edges_strategy(n),
            proptest::collection::vec(-2.0f64..2.0, n * 3),
        )
            .prop_map(move |(edges, h)| {
                let edges: Vec<_> = edges.into_iter().filter(|(u, v)| u != v).collect();
                let g = ExplanationGraph::new("p", n, ExplanationKind::TokenInteraction, 30.0)
                    .with_edges(&edges)
                    .unwrap();
                (g, h)
            })
    })
}

fn params(variant: GnnVariant) -> GnnParameters {
    let dev = Device::Cpu;
    let in_dim = if variant == GnnVariant::Sage { 6 } else { 3 };
    let w: Vec<f64> = (0..3 * in_dim).map(|i| ((i as f64) * 0.61).sin()).collect();
    let att = (variant == GnnVariant::Gat).then(|| {
        (
            Tensor::new(&[0.4f64, -0.3, 0.2], &dev).unwrap(),
            Tensor::new(&[-0.1f64, 0.5, 0.3], &dev).unwrap(),
        )
    });
    GnnParameters::from_tensors(
        variant,
        Activation::Relu,
        Tensor::from_vec(w, (3, in_dim), &dev).unwrap(),
        att,
    )
    .unwrap()
}

fn run(variant: GnnVariant, g: &ExplanationGraph, h: &[f64]) -> Vec<Vec<f64>> {
    let n = g.node_count;
    let ht = Tensor::from_vec(h.to_vec(), (n, 3), &Device::Cpu).unwrap();
    let adj = Tensor::from_vec(g.adjacency(n), (n, n), &Device::Cpu).unwrap();
    let out = params(variant).forward(&ht, &adj).unwrap();
    assert_eq!(out.dims(), ht.dims());
    out.to_vec2::<f64>().unwrap()
}

proptest! {
    #[test]
    fn gnn_is_permutation_equivariant((g, h) in random_graph(), seed in 0u64..1000) {
        let n = g.node_count;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by_key(|&i| (i as u64 * 2654435761 + seed) % 1009);
        let pg = g.permuted(&perm).unwrap();
        let mut ph = vec![0.0; n * 3];
        for v in 0..n {
            ph[perm[v] * 3..perm[v] * 3 + 3].copy_from_slice(&h[v * 3..v * 3 + 3]);
        }
        for variant in GnnVariant::ALL {
            let a = run(variant, &g, &h);
            let b = run(variant, &pg, &ph);
            for v in 0..n {
                for i in 0..3 {
                    prop_assert!((a[v][i] - b[perm[v]][i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gat_rows_are_normalized((g, h) in random_graph()) {
        let n = g.node_count;
        let ht = Tensor::from_vec(h, (n, 3), &Device::Cpu).unwrap();
        let adj = Tensor::from_vec(g.adjacency(n), (n, n), &Device::Cpu).unwrap();
        let alpha = params(GnnVariant::Gat).attention(&ht, &adj).unwrap().to_vec2::<f64>().unwrap();
        for v in 0..n {
            let s: f64 = alpha[v].iter().sum();
            if g.neighbors(v).is_empty() {
                prop_assert_eq!(s, 0.0);
            } else {
                prop_assert!((s - 1.0).abs() < 1e-6);
                for u in 0..n {
                    prop_assert!(g.has_edge(u, v) || alpha[v][u] == 0.0);
                }
            }
        }
    }

    #[test]
    fn louvain_never_below_singletons(n in 2usize..10, edges in proptest::collection::vec((0usize..10, 0usize..10, 0.1f64..3.0), 1..25)) {
        let mut g = WeightedGraph::new(n);
        let mut any = false;
        for (u, v, w) in edges {
            if u < n && v < n && u != v {
                g.add_edge(u, v, w);
                any = true;
            }
        }
        prop_assume!(any);
        let p = louvain_partition(&g);
        let singletons: Vec<usize> = (0..n).collect();
        prop_assert!(modularity(&g, &p.labels) >= modularity(&g, &singletons) - 1e-12);
        prop_assert_eq!(p, louvain_partition(&g));
    }

    #[test]
    fn span_pairs_cross_the_boundary(
        (n, m, w) in (3usize..9).prop_flat_map(|n| (Just(n), 1..n, proptest::collection::vec(0.01f64..1.0, n * n)))
    ) {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|q| {
                let r = &w[q * n..(q + 1) * n];
                let s: f64 = r.iter().sum();
                r.iter().map(|x| x / s).collect()
            })
            .collect();
        let snap = AttentionSnapshot::from_heads("s", m, &[rows], &[vec![1; n]]).unwrap();
        let ti = token_interactions(&snap, 0).unwrap();
        let spans = span_interactions(&ti, m).unwrap();
        prop_assert_eq!(&spans, &span_interactions(&ti, m).unwrap());
        for e in &spans.entries {
            prop_assert!(e.span_a.end <= m && e.span_b.start >= m && e.span_b.end <= n);
            prop_assert!((0.0..=1.0).contains(&e.score));
        }
    }

    #[test]
    fn edges_touch_only_selected_tokens_or_siblings(
        scores in proptest::collection::vec(0.0f64..1.0, 12),
        k in 1.0f64..100.0,
    ) {
        let inst = multi_piece_instance();
        let n = inst.len();
        let m = inst.boundary;
        let pairs: Vec<ScoredExplanation> = (0..m)
            .flat_map(|i| (m..n).map(move |j| (i, j)))
            .enumerate()
            .map(|(x, (i, j))| ScoredExplanation { item: Explanation::Pair(i, j), score: scores[x % scores.len()] })
            .collect();
        let sel = select_top_fraction(&pairs, k).unwrap();
        let g = build_graph(&sel, &inst).unwrap();
        prop_assert_eq!(&g, &build_graph(&sel, &inst).unwrap());
        let selected: BTreeSet<usize> = sel.positions().into_iter().collect();
        let touched_words: BTreeSet<usize> = selected.iter().map(|&p| inst.word_at(p).unwrap().start).collect();
        for (u, v) in g.edges() {
            for x in [u, v] {
                let w = inst.word_at(x).unwrap();
                prop_assert!(selected.contains(&x) || touched_words.contains(&w.start));
            }
        }
    }

    #[test]
    fn perturbation_counts_and_single_insertions(words in proptest::collection::vec(0usize..12, 1..14), seed in 0u64..50) {
        const POOL: [&str; 12] = ["man", "dog", "park", "runs", "the", "a", "quickly", "cat", "sits", "on", "mat", "and"];
        let text: Vec<&str> = words.iter().map(|&i| POOL[i]).collect();
        let rec = RawRecord {
            id: "w".into(),
            part_a: text.join(" "),
            part_b: "nothing".into(),
            gold_label: "neutral".into(),
            gold_nle: vec![],
        };
        let set = perturb_instance(&rec, &LexiconTagger::default(), &AdjectiveLexicon::default(), seed);
        prop_assert!([0, 4, 8, 12, 16].contains(&set.perturbations.len()));
        let orig: Vec<String> = split_words(&rec.part_a).into_iter().map(|(w, _)| w).collect();
        for p in &set.perturbations {
            let new: Vec<String> = split_words(&p.record.part_a).into_iter().map(|(w, _)| w).collect();
            prop_assert_eq!(new.len(), orig.len() + 1);
            prop_assert_eq!(&new[p.position], &p.adjective);
            let mut back = new.clone();
            back.remove(p.position);
            prop_assert_eq!(&back, &orig);
        }
    }

    #[test]
    fn total_never_exceeds_counter(flags in proptest::collection::vec(proptest::collection::vec((any::<bool>(), any::<bool>()), 0..5), 1..20)) {
        let records: Vec<FaithfulnessRecord> = flags
            .iter()
            .enumerate()
            .map(|(i, f)| FaithfulnessRecord {
                base_id: i.to_string(),
                outcomes: f.iter().map(|&(c, w)| PerturbationOutcome { label_changed: c, word_in_nle: w }).collect(),
                failures: 0,
            })
            .collect();
        let r = compute_unfaithfulness(&records).unwrap();
        prop_assert!(r.total_unfaith <= r.counter_unfaith);
        prop_assert!(r.n_unfaithful <= r.n_changed && r.n_changed <= r.n_total);
    }

    #[test]
    fn reformulation_is_idempotent(a in "[a-z ]{1,20}[a-z]", b in "[a-z ]{1,20}[a-z]", task in 0usize..3) {
        let task = [Task::Nli, Task::Comve, Task::Ecqa][task];
        let label = match task { Task::Nli => "neutral".to_string(), Task::Comve => "1".to_string(), Task::Ecqa => b.split_whitespace().next().unwrap_or("x").to_string() };
        let rec = RawRecord { id: "r".into(), part_a: a, part_b: b, gold_label: label, gold_nle: vec![] };
        if let Ok(once) = reformulate(&rec, task) {
            prop_assert_eq!(&reformulate(&once, task).unwrap(), &once);
            if task == Task::Comve {
                prop_assert_eq!(once.part_a.as_str(), graphguide::dataset::COMVE_QUESTION);
            }
        }
    }
}

fn multi_piece_instance() -> graphguide::dataset::TokenizedInstance {
    let tok = WordPieceTokenizer::from_tokens([
        "neutral", "the", "ca", "##t", "sleeps", "on", "ma", "##t", "dog", "ru", "##ns", "far",
    ]);
    let rec = RawRecord {
        id: "mp".into(),
        part_a: "the cat sleeps on mat".into(),
        part_b: "dog runs far".into(),
        gold_label: "neutral".into(),
        gold_nle: vec![],
    };
    tokenize_instance(&rec, &tok).unwrap()
}

#[test]
fn sage_with_identity_projection_preserves_encoder_output() {
    let dev = Device::Cpu;
    let mut cfg = ModelConfig::toy(30);
    cfg.gnn = Some(GnnConfig {
        variant: GnnVariant::Sage,
        activation: Activation::Identity,
        insert_after: 1,
    });
    let (aug, mut varmap) = Seq2Seq::init_seeded(cfg.clone(), 4, DType::F32, &dev).unwrap();
    let d = cfg.hidden;
    let eye = Tensor::eye(d, DType::F32, &dev).unwrap();
    let w = Tensor::cat(
        &[&eye, &Tensor::zeros((d, d), DType::F32, &dev).unwrap()],
        1,
    )
    .unwrap();
    varmap.set_one("gnn.weight", w).unwrap();
    let base = Seq2Seq::new(
        cfg.without_gnn(),
        VarBuilder::from_varmap(&varmap, DType::F32, &dev),
    )
    .unwrap();
    let ids = [4u32, 9, 12, 5];
    let g = ExplanationGraph::new("s", 4, ExplanationKind::HighlightToken, 30.0)
        .with_edges(&[(0, 1), (1, 3)])
        .unwrap();
    let a = aug
        .encode(&aug.encoder_batch(&[&ids], Some(&[&g])).unwrap())
        .unwrap()
        .hidden;
    let b = base
        .encode(&base.encoder_batch(&[&ids], None).unwrap())
        .unwrap()
        .hidden;
    assert_eq!(
        a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
        b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    );
}

#[test]
fn comve_first_part_is_shared() {
    let recs = [("It is cold.", "Ice is hot."), ("Birds fly.", "Fish walk.")];
    let parts: BTreeSet<String> = recs
        .iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let r = RawRecord {
                id: i.to_string(),
                part_a: a.to_string(),
                part_b: b.to_string(),
                gold_label: "2".into(),
                gold_nle: vec![],
            };
            reformulate(&r, Task::Comve).unwrap().part_a
        })
        .collect();
    assert_eq!(parts.len(), 1);
}
