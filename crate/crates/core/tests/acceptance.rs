//! Acceptance suite. Each test prints one PASS/FAIL line, written straight
//! to stdout so it shows even when output capture is on.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use hgave_core::autodiff::check::{gradients_match, numeric_gradient, primitive_cases, run_case};
use hgave_core::autodiff::{Tape, Tensor, Var};
use hgave_core::graph::{degree_matrices, incidence_matrix, normalized_adjacency};
use hgave_core::ingest::{build_graph, AspectPair, ProductRecord, SessionKind, SessionRecord};
use hgave_core::metrics::{self, ScoredLink};
use hgave_core::model::{
    self, edge_to_node, fuse, fuse_vectors, init_embeddings, node_to_edge, DropoutSeeds, LinkMask, NodeInputs, ParamBlock,
    Structure,
};
use hgave_core::split::{zero_shot_split, LinkLabel};
use hgave_core::synthetic::{planted, Planted, PlantedConfig};
use hgave_core::train::{self, held_in_probabilities, scored_links, TrainOutcome};
use hgave_core::{
    CandidateLink, FeatureStore, FusionWeights, HyperedgeKind, Hypergraph, HypergraphBuilder, ModelConfig, ModelParams, NodeId,
    NodeKind, SplitBundle, SplitConfig, TrainConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: usize, ok: bool, detail: &str) {
    let line = format!("criterion {n}: {} ({detail})\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().write_all(line.as_bytes());
}

fn random_subset(rng: &mut ChaCha8Rng, pool: &[NodeId], min: usize) -> Vec<NodeId> {
    let mut v = pool.to_vec();
    v.shuffle(rng);
    let n = rng.random_range(min..=pool.len().max(min));
    v.truncate(n);
    v
}

/// Random valid heterogeneous hypergraph with at most 50 nodes.
fn random_hypergraph(rng: &mut ChaCha8Rng) -> Hypergraph {
    let mut b = HypergraphBuilder::new();
    let nc = rng.random_range(1..=3);
    let np = rng.random_range(1..=23);
    let na = rng.random_range(1..=24);
    let cats: Vec<NodeId> = (0..nc).map(|i| b.add_node(NodeKind::Category, format!("c{i}"), "").unwrap()).collect();
    let prods: Vec<NodeId> = (0..np).map(|i| b.add_node(NodeKind::Product, format!("p{i}"), "").unwrap()).collect();
    let asps: Vec<NodeId> = (0..na).map(|i| b.add_node(NodeKind::Aspect, format!("a{i}"), "").unwrap()).collect();
    let w = |rng: &mut ChaCha8Rng| rng.random_range(0.1..2.0);
    for &p in &prods {
        if rng.random_bool(0.8) {
            let mut m = vec![p];
            let sub = random_subset(rng, &asps, 1);
            m.extend(sub.iter().take(4));
            let wt = w(rng);
            b.add_hyperedge(HyperedgeKind::ProductAspects, m, wt).unwrap();
        }
    }
    for &c in &cats {
        let mut m = vec![c];
        m.extend(random_subset(rng, &prods, 1).into_iter().take(8));
        if rng.random_bool(0.5) {
            m.extend(random_subset(rng, &asps, 1).into_iter().take(5));
        }
        let wt = w(rng);
        b.add_hyperedge(HyperedgeKind::CategoryBundle, m, wt).unwrap();
    }
    for kind in [HyperedgeKind::AlsoView, HyperedgeKind::AlsoBuy] {
        for _ in 0..rng.random_range(0..4) {
            let m: Vec<NodeId> = random_subset(rng, &prods, 1).into_iter().take(5).collect();
            let wt = w(rng);
            b.add_hyperedge(kind, m, wt).unwrap();
        }
    }
    b.build()
}

#[test]
fn criterion_1_linear_algebra_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0_f64;
    let mut asym = 0.0_f64;
    for _ in 0..200 {
        let g = random_hypergraph(&mut rng);
        assert!(g.num_nodes() <= 50);
        let filter = match rng.random_range(0..5) {
            4 => None,
            k => Some(HyperedgeKind::ALL[k]),
        };
        let edges: Vec<_> = g.edges().iter().filter(|e| filter.is_none_or(|k| e.kind == k)).collect();
        let (n, m) = (g.num_nodes(), edges.len());
        let mut h = vec![vec![0.0; m]; n];
        for (j, e) in edges.iter().enumerate() {
            for v in &e.members {
                h[v.0][j] = 1.0;
            }
        }
        let wts: Vec<f64> = edges.iter().map(|e| e.weight).collect();
        let dv: Vec<f64> = (0..n).map(|v| (0..m).map(|j| wts[j] * h[v][j]).sum()).collect();
        let de: Vec<f64> = (0..m).map(|j| (0..n).map(|v| h[v][j]).sum()).collect();
        let pinv_sqrt = |d: f64| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 };
        let mut a = vec![vec![0.0; n]; n];
        for u in 0..n {
            for v in 0..n {
                let s: f64 = (0..m).map(|j| h[u][j] * wts[j] / de[j] * h[v][j]).sum();
                a[u][v] = pinv_sqrt(dv[u]) * s * pinv_sqrt(dv[v]);
            }
        }

        let inc = incidence_matrix(&g, filter);
        assert_eq!(inc.matrix.to_dense(), h);
        let (got_dv, got_de) = degree_matrices(&inc.matrix, &inc.weights(&g));
        for (x, y) in got_dv.iter().zip(&dv).chain(got_de.iter().zip(&de)) {
            worst = worst.max((x - y).abs());
        }
        let got = normalized_adjacency(&g, filter).to_dense();
        for u in 0..n {
            for v in 0..n {
                worst = worst.max((got[u][v] - a[u][v]).abs());
                asym = asym.max((got[u][v] - got[v][u]).abs());
            }
        }
    }
    let elapsed = started.elapsed();
    let ok = worst <= 1e-10 && asym <= 1e-10 && elapsed < Duration::from_secs(10);
    report(1, ok, &format!("200 graphs, max error {worst:.1e}, asymmetry {asym:.1e}, {:.2}s", elapsed.as_secs_f64()));
    assert!(ok);
}

/// 11 nodes: 1 category, 4 products, 6 aspects, all four channels.
fn gradient_toy() -> (Hypergraph, FeatureStore, Vec<CandidateLink>) {
    let links: [&[usize]; 4] = [&[0, 1], &[1, 2], &[3, 4], &[4, 5, 0]];
    let products: Vec<ProductRecord> = links
        .iter()
        .enumerate()
        .map(|(i, asp)| ProductRecord {
            product_key: format!("p{i}"),
            category_key: "c".into(),
            title: format!("item {i}"),
            description: String::new(),
            aspects: asp.iter().map(|a| AspectPair { attribute: "k".into(), value: a.to_string() }).collect(),
        })
        .collect();
    let sessions = vec![
        SessionRecord { user_key: "u1".into(), kind: SessionKind::View, product_keys: vec!["p0".into(), "p1".into(), "p3".into()] },
        SessionRecord { user_key: "u2".into(), kind: SessionKind::Buy, product_keys: vec!["p1".into(), "p2".into()] },
    ];
    let g = build_graph(&products, &sessions).unwrap().graph;
    assert!(g.num_nodes() <= 12);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut f = FeatureStore::new(5);
    for n in g.nodes() {
        f.insert(n.key.clone(), (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    }
    let id = |k: &str| g.lookup(k).unwrap();
    let l = |p: &str, a: &str, y: bool| CandidateLink {
        product: id(p),
        aspect: id(a),
        label: if y { LinkLabel::Positive } else { LinkLabel::Negative },
    };
    let cands = vec![l("p0", "k: 1", true), l("p0", "k: 5", false), l("p2", "k: 4", true), l("p3", "k: 1", false)];
    (g, f, cands)
}

#[test]
fn criterion_2_gradient_suite() {
    let started = Instant::now();
    let mut worst = 0.0_f64;
    let mut ok = true;
    let cases = primitive_cases();
    for case in &cases {
        for trial in 0..10 {
            let r = run_case(case, 7000 + trial);
            ok &= r.ok;
            worst = worst.max(r.max_rel_error);
        }
    }

    let (g, f, cands) = gradient_toy();
    let cfg = ModelConfig { dim: 4, heads: 2, hyper_layers: 2, gnn_layers: 2, dropout: 0.0, neighbor_cap: None, ..Default::default() };
    let params = ModelParams::init(&cfg, 5, 17).unwrap();
    let inputs = NodeInputs::new(&g, &f).unwrap();
    let mask: LinkMask = cands.iter().filter(|c| c.label.is_positive()).map(|c| (c.product, c.aspect)).collect();
    let s = Structure::new(&g, &mask, None);
    let fw = FusionWeights::new(0.3, 0.3, 0.4, 0.6).unwrap();
    let run = |ts: &[Tensor]| -> (Tape, Var) {
        let p = ModelParams {
            blocks: params.blocks.iter().zip(ts).map(|(b, t)| ParamBlock { name: b.name.clone(), value: t.clone() }).collect(),
            ..params.clone()
        };
        let mut t = Tape::new();
        let pv = p.register(&mut t, true);
        let pr = model::forward(&mut t, &pv, &cfg, &s, &inputs, &fw, &cands, &mut DropoutSeeds::off()).unwrap();
        let l = model::loss(&mut t, pr, &cands).unwrap();
        (t, l)
    };
    let base: Vec<Tensor> = params.tensors().cloned().collect();
    let (mut t, l) = run(&base);
    let grads = t.backward(l).unwrap();
    let numeric = numeric_gradient(
        &mut |xs: &[Tensor]| {
            let (t, l) = run(xs);
            t.value(l).item()
        },
        &base,
        1e-5,
    );
    let mut e2e_worst = 0.0_f64;
    for (i, n) in numeric.iter().enumerate() {
        let zero = Tensor::zeros(n.rows(), n.cols());
        let a = grads.get(i).unwrap_or(&zero);
        e2e_worst = e2e_worst.max(hgave_core::autodiff::check::relative_error(a, n));
        ok &= gradients_match(a, n, 1e-4);
    }
    let elapsed = started.elapsed();
    ok &= elapsed < Duration::from_secs(60);
    report(
        2,
        ok,
        &format!(
            "{} primitives, worst rel error {worst:.1e}; end-to-end on {} nodes, {} blocks, worst {e2e_worst:.1e}; {:.2}s",
            cases.len(),
            g.num_nodes(),
            base.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_3_attention_and_fusion_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ModelConfig { dim: 8, heads: 2, dropout: 0.0, neighbor_cap: None, ..Default::default() };
    let mut edges_checked = 0usize;
    let mut worst = 0.0_f64;
    let mut seed = 0;
    while edges_checked < 1000 {
        seed += 1;
        let g = random_hypergraph(&mut rng);
        let mut f = FeatureStore::new(4);
        for n in g.nodes() {
            f.insert(n.key.clone(), (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        }
        let params = ModelParams::init(&cfg, 4, seed).unwrap();
        let s = Structure::new(&g, &LinkMask::new(), None);
        let mut t = Tape::new();
        let pv = params.register(&mut t, false);
        let h0 = init_embeddings(&mut t, &pv, &NodeInputs::new(&g, &f).unwrap()).unwrap();
        for plan in &s.channels {
            if plan.num_edges() == 0 {
                continue;
            }
            let e = node_to_edge(&mut t, &pv, &cfg, plan, h0, 0).unwrap();
            let v = edge_to_node(&mut t, &pv, &cfg, plan, h0, e.out, 0).unwrap();
            for a in &e.attention {
                let a = t.value(*a).data();
                for j in 0..plan.members.len() {
                    let s: f64 = plan.members.span(j).map(|i| a[i]).sum();
                    worst = worst.max((s - 1.0).abs());
                }
            }
            for a in &v.attention {
                let a = t.value(*a).data();
                for node in 0..plan.incident.len() {
                    let span = plan.incident.span(node);
                    if !span.is_empty() {
                        let s: f64 = span.map(|i| a[i]).sum();
                        worst = worst.max((s - 1.0).abs());
                    }
                }
            }
            edges_checked += plan.num_edges();
        }
    }

    let mut fusion_worst = 0.0_f64;
    for _ in 0..100 {
        let alpha: f64 = rng.random_range(0.0..1.0);
        let beta: f64 = rng.random_range(0.0..1.0 - alpha);
        let fw = FusionWeights::new(alpha, beta, rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)).unwrap();
        let u: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
        for kind in NodeKind::ALL {
            let c = fw.coefficients(kind);
            fusion_worst = fusion_worst.max((c.iter().sum::<f64>() - 1.0).abs());
            let out = fuse_vectors([&u, &u, &u, &u], kind, &fw);
            for (x, y) in out.iter().zip(&u) {
                fusion_worst = fusion_worst.max((x - y).abs());
            }
        }
        // Same identity through the differentiable fusion.
        let mut t = Tape::new();
        let kinds = [NodeKind::Category, NodeKind::Product, NodeKind::Aspect];
        let rows = Tensor::from_rows(&[u.clone(), u.clone(), u.clone()]).unwrap();
        let v = t.constant(rows.clone());
        let out = fuse(&mut t, &[v, v, v, v], &kinds, &fw).unwrap();
        for (x, y) in t.value(out).data().iter().zip(rows.data()) {
            fusion_worst = fusion_worst.max((x - y).abs());
        }
    }
    let ok = worst <= 1e-9 && fusion_worst <= 1e-12;
    report(
        3,
        ok,
        &format!("{edges_checked} hyperedges, attention sum error {worst:.1e}; 100 fusion tuples, identity error {fusion_worst:.1e}"),
    );
    assert!(ok);
}

fn random_corpus(rng: &mut ChaCha8Rng) -> Vec<ProductRecord> {
    let np = rng.random_range(6..=16);
    let na = rng.random_range(4..=9);
    (0..np)
        .map(|i| {
            let mut asp: Vec<usize> = (0..na).collect();
            asp.shuffle(rng);
            let k = rng.random_range(1..=3);
            ProductRecord {
                product_key: format!("p{i}"),
                category_key: format!("c{}", rng.random_range(0..2)),
                title: String::new(),
                description: String::new(),
                aspects: asp[..k].iter().map(|a| AspectPair { attribute: "k".into(), value: a.to_string() }).collect(),
            }
        })
        .collect()
}

#[test]
fn criterion_4_split_leakage() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut runs = 0;
    let mut negatives = 0;
    let mut violations = Vec::new();
    while runs < 100 {
        let g = build_graph(&random_corpus(&mut rng), &[]).unwrap().graph;
        let n_unseen = rng.random_range(1..=3).min(g.count_kind(NodeKind::Aspect) - 1);
        let Ok(b) = zero_shot_split(&g, &SplitConfig { n_unseen, seed: runs, ..Default::default() }) else { continue };
        runs += 1;
        let unseen: Vec<&String> = b.val.unseen_aspects.iter().chain(&b.test.unseen_aspects).collect();
        let removed: Vec<&String> = b.val.removed_products.iter().chain(&b.test.removed_products).collect();
        for key in unseen.iter().chain(&removed) {
            if b.train_graph.lookup(key).is_some() {
                violations.push(format!("run {runs}: {key} in training graph"));
            }
        }
        for e in b.train_graph.edges() {
            for m in &e.members {
                if unseen.contains(&&b.train_graph.key(*m).to_string()) {
                    violations.push(format!("run {runs}: removed node in a training hyperedge"));
                }
            }
        }
        let va: HashSet<&String> = b.val.unseen_aspects.iter().collect();
        let vp: HashSet<&String> = b.val.removed_products.iter().collect();
        if b.test.unseen_aspects.iter().any(|a| va.contains(a)) || b.test.removed_products.iter().any(|p| vp.contains(p)) {
            violations.push(format!("run {runs}: validation and test overlap"));
        }
        let check = |graph: &Hypergraph, cands: &[CandidateLink], violations: &mut Vec<String>, negatives: &mut usize| {
            for c in cands {
                let p = g.lookup(graph.key(c.product)).unwrap();
                let a = g.lookup(graph.key(c.aspect)).unwrap();
                let linked = g.is_linked(p, a);
                match c.label {
                    LinkLabel::Negative => {
                        *negatives += 1;
                        if linked {
                            violations.push(format!("negative {}–{} is an edge", graph.key(c.product), graph.key(c.aspect)));
                        }
                    }
                    LinkLabel::Positive if !linked => violations.push("positive is not an edge".into()),
                    _ => {}
                }
            }
        };
        check(&b.train_graph, &b.train_candidates, &mut violations, &mut negatives);
        check(&b.val.graph, &b.val.candidates, &mut violations, &mut negatives);
        check(&b.test.graph, &b.test.candidates, &mut violations, &mut negatives);
    }
    let ok = violations.is_empty();
    report(4, ok, &format!("{runs} runs, {negatives} negatives verified, {} violations", violations.len()));
    assert!(ok, "{violations:?}");
}

/// Rank of each item within its product: ties broken by aspect key.
fn oracle_ranks(items: &[&ScoredLink]) -> Vec<usize> {
    items
        .iter()
        .map(|x| 1 + items.iter().filter(|y| y.score > x.score || (y.score == x.score && y.aspect < x.aspect)).count())
        .collect()
}

struct OracleMetrics {
    map: f64,
    mrr: f64,
    ndcg: Vec<f64>,
    hits: Vec<f64>,
    auc: f64,
    f1: f64,
}

fn oracle(links: &[ScoredLink], tau: f64, ks: &[usize]) -> OracleMetrics {
    let mut groups: BTreeMap<&str, Vec<&ScoredLink>> = BTreeMap::new();
    for l in links {
        groups.entry(&l.product).or_default().push(l);
    }
    let (mut ap, mut rr, mut nd, mut ht, mut n) = (0.0, 0.0, vec![0.0; ks.len()], vec![0.0; ks.len()], 0.0);
    for items in groups.values() {
        let ranks = oracle_ranks(items);
        let pos: Vec<usize> = items.iter().zip(&ranks).filter(|(l, _)| l.label).map(|(_, &r)| r).collect();
        if pos.is_empty() {
            continue;
        }
        n += 1.0;
        ap += pos.iter().map(|&r| pos.iter().filter(|&&q| q <= r).count() as f64 / r as f64).sum::<f64>() / pos.len() as f64;
        rr += 1.0 / *pos.iter().min().unwrap() as f64;
        for (i, &k) in ks.iter().enumerate() {
            let dcg: f64 = pos.iter().filter(|&&r| r <= k).map(|&r| 1.0 / ((r + 1) as f64).log2()).sum();
            let idcg: f64 = (1..=pos.len().min(k)).map(|r| 1.0 / ((r + 1) as f64).log2()).sum();
            nd[i] += dcg / idcg;
            ht[i] += if pos.iter().any(|&r| r <= k) { 1.0 } else { 0.0 };
        }
    }
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for p in links.iter().filter(|l| l.label) {
        for q in links.iter().filter(|l| !l.label) {
            pairs += 1.0;
            wins += if p.score > q.score {
                1.0
            } else if p.score == q.score {
                0.5
            } else {
                0.0
            };
        }
    }
    let mut per_aspect: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
    for l in links {
        let c = per_aspect.entry(&l.aspect).or_default();
        let pred = l.score >= tau;
        if pred && l.label {
            c[0] += 1;
        } else if pred {
            c[1] += 1;
        } else if l.label {
            c[2] += 1;
        }
    }
    let f1s: Vec<f64> = per_aspect
        .values()
        .filter(|c| c.iter().sum::<usize>() > 0)
        .map(|&[tp, fp, fn_]| {
            let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = tp as f64 / (tp + fn_) as f64;
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect();
    OracleMetrics {
        map: ap / n,
        mrr: rr / n,
        ndcg: nd.iter().map(|x| x / n).collect(),
        hits: ht.iter().map(|x| x / n).collect(),
        auc: wins / pairs,
        f1: f1s.iter().sum::<f64>() / f1s.len() as f64,
    }
}

#[test]
fn criterion_5_metrics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ks = [1, 2, 3, 5, 8];
    let mut trials = 0;
    let mut rank_mismatch = 0;
    let mut real_worst = 0.0_f64;
    while trials < 1000 {
        let n = rng.random_range(2..=8);
        let n_products = rng.random_range(1..=3);
        let mut aspects: Vec<usize> = (0..8).collect();
        aspects.shuffle(&mut rng);
        // Coarse scores force frequent ties.
        let links: Vec<ScoredLink> = (0..n)
            .map(|i| {
                ScoredLink::new(
                    format!("p{}", i % n_products),
                    format!("a{}", aspects[i]),
                    f64::from(rng.random_range(1..6u8)) / 6.0,
                    rng.random_bool(0.4),
                )
            })
            .collect();
        let has_pos = links.iter().any(|l| l.label);
        let has_neg = links.iter().any(|l| !l.label);
        if !has_pos || !has_neg {
            continue;
        }
        trials += 1;
        let tau = f64::from(rng.random_range(1..6u8)) / 6.0;
        let o = oracle(&links, tau, &ks);
        let r = metrics::evaluate(&links, tau, &ks).unwrap();
        // Hits and AUC are exact rationals over the same counts.
        for (a, b) in r.hits.iter().zip(&o.hits) {
            rank_mismatch += usize::from(a.value != *b);
        }
        rank_mismatch += usize::from(r.auc != o.auc);
        let reals = [(r.map, o.map), (r.mrr, o.mrr), (r.macro_f1, o.f1)];
        for (a, b) in reals.into_iter().chain(r.ndcg.iter().map(|x| x.value).zip(o.ndcg.iter().copied())) {
            real_worst = real_worst.max((a - b).abs());
        }
    }
    let ok = rank_mismatch == 0 && real_worst <= 1e-12;
    report(5, ok, &format!("{trials} trials, {rank_mismatch} exact mismatches, max real error {real_worst:.1e}"));
    assert!(ok);
}

/// Planted corpus whose categories own their aspect pools; each tail aspect
/// sits on two products of one category and is held out by the split.
fn aligned_config(seed: u64) -> PlantedConfig {
    PlantedConfig {
        products: 60,
        common_aspects: 12,
        common_per_product: 3,
        common_min: Some(1),
        category_pools: true,
        tail_aspects: 8,
        seed,
        ..Default::default()
    }
}

fn zero_shot_model() -> ModelConfig {
    ModelConfig { gnn_layers: 1, dropout: 0.1, ..ModelConfig::toy() }
}

fn zero_shot_train(seed: u64) -> TrainConfig {
    TrainConfig { seed, ..Default::default() }
}

/// Half the tail aspects go to validation, half to test.
fn aligned_split(p: &Planted, seed: u64) -> SplitBundle {
    let cfg = SplitConfig { n_unseen: 8, negative_rate: 2.0, seed, max_unseen_support: Some(2) };
    zero_shot_split(&p.built.graph, &cfg).unwrap()
}

#[test]
fn criterion_6_planted_structure_learning() {
    let planted = planted(&PlantedConfig { seed: 11, ..Default::default() }).unwrap();
    let g = &planted.built.graph;
    assert_eq!((g.count_kind(NodeKind::Product), g.count_kind(NodeKind::Aspect)), (30, 10));
    let bundle = zero_shot_split(g, &SplitConfig { n_unseen: 4, seed: 11, max_unseen_support: Some(2), ..Default::default() }).unwrap();
    let tc = TrainConfig { seed: 11, max_epochs: 200, select_on_validation: false, ..Default::default() };
    let started = Instant::now();
    let out = train::train(&bundle, &planted.features, &ModelConfig::toy(), &tc).unwrap();
    let seconds = started.elapsed().as_secs_f64();
    let tg = &bundle.train_graph;
    let p = held_in_probabilities(&out.params, tg, &planted.features, &tc.train_fusion, &bundle.train_candidates).unwrap();
    let auc = metrics::auc(&scored_links(tg, &bundle.train_candidates, &p)).unwrap();
    let epochs = out.history.epochs.len();
    let ok = auc >= 0.95 && epochs <= 200 && seconds < 60.0;
    report(
        6,
        ok,
        &format!("held-in AUC {auc:.4} over {} candidates, {epochs} epochs, {seconds:.1}s", bundle.train_candidates.len()),
    );
    assert!(ok);
}

struct ZeroShot {
    planted: Planted,
    bundle: SplitBundle,
    outcome: TrainOutcome,
}

fn zero_shot() -> &'static ZeroShot {
    static CELL: OnceLock<ZeroShot> = OnceLock::new();
    CELL.get_or_init(|| {
        let planted = planted(&aligned_config(11)).unwrap();
        let bundle = aligned_split(&planted, 11);
        let outcome = train::train(&bundle, &planted.features, &zero_shot_model(), &zero_shot_train(11)).unwrap();
        ZeroShot { planted, bundle, outcome }
    })
}

#[test]
fn criterion_7_inductive_zero_shot() {
    let t = zero_shot();
    let test = &t.bundle.test;
    let in_training = |k: &String| t.bundle.train_graph.lookup(k).is_some();
    let disjoint = !test.unseen_aspects.iter().chain(&test.removed_products).any(in_training);
    let before = t.outcome.params.clone();
    let fp = before.fingerprint();
    let p = train::split_probabilities(&t.outcome.params, test, &t.planted.features, &t.outcome.fusion).unwrap();
    let auc = metrics::auc(&scored_links(&test.graph, &test.candidates, &p)).unwrap();
    let frozen = t.outcome.params == before && t.outcome.params.fingerprint() == fp;
    let (na, np) = (test.unseen_aspects.len(), test.removed_products.len());
    let ok = auc >= 0.80 && frozen && disjoint && na == 4 && np == 8;
    report(
        7,
        ok,
        &format!("{na} held-out aspects, {np} held-out products, test AUC {auc:.4}, parameters bit-identical: {frozen}"),
    );
    assert!(ok);
}

fn test_map(bundle: &SplitBundle, features: &FeatureStore, seed: u64) -> f64 {
    let out = train::train(bundle, features, &zero_shot_model(), &zero_shot_train(seed)).unwrap();
    let p = train::split_probabilities(&out.params, &bundle.test, features, &out.fusion).unwrap();
    metrics::mean_average_precision(&scored_links(&bundle.test.graph, &bundle.test.candidates, &p)).unwrap()
}

#[test]
fn criterion_8_ablation_direction() {
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let planted = planted(&aligned_config(100 + seed)).unwrap();
        let bundle = aligned_split(&planted, seed);
        let one_hot = FeatureStore::one_hot(&planted.built.graph);
        rows.push((test_map(&bundle, &one_hot, seed), test_map(&bundle, &planted.features, seed)));
    }
    let mean = |f: fn(&(f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let (m_id, m_full) = (mean(|r| r.0), mean(|r| r.1));
    let lower = rows.iter().filter(|(id, full)| id < full).count();
    let ok = m_id < m_full;
    let per_seed: Vec<String> = rows.iter().map(|(a, b)| format!("{a:.3}/{b:.3}")).collect();
    report(
        8,
        ok,
        &format!(
            "mean test mAP one-hot {m_id:.3} < featurized {m_full:.3}; lower on {lower}/5 seeds [{}]",
            per_seed.join(", ")
        ),
    );
    assert!(ok);
}

fn artifacts(seed: u64) -> Vec<(&'static str, Vec<u8>)> {
    let planted = planted(&aligned_config(seed)).unwrap();
    let g = &planted.built.graph;
    let mut graph = Vec::new();
    hgave_core::io::write_graph(g, &mut graph).unwrap();
    let bundle = aligned_split(&planted, seed);
    let manifest = serde_json::to_vec_pretty(&bundle.manifest()).unwrap();
    let tc = TrainConfig { max_epochs: 4, ..zero_shot_train(seed) };
    let out = train::train(&bundle, &planted.features, &ModelConfig::toy(), &tc).unwrap();
    let ck = hgave_core::io::Checkpoint { params: out.params.clone(), fusion: out.fusion, threshold: out.threshold };
    let mut checkpoint = Vec::new();
    hgave_core::io::write_checkpoint(&ck, &mut checkpoint).unwrap();
    let history = serde_json::to_vec_pretty(&out.history).unwrap();
    let report =
        train::evaluate_split(&out.params, &bundle.test, &planted.features, &out.fusion, out.threshold, &metrics::DEFAULT_KS).unwrap();
    let report = serde_json::to_vec_pretty(&report).unwrap();
    let mut features = Vec::new();
    planted.features.write_to(&mut features).unwrap();
    vec![
        ("graph", graph),
        ("features", features),
        ("manifest", manifest),
        ("checkpoint", checkpoint),
        ("history", history),
        ("report", report),
    ]
}

#[test]
fn criterion_9_determinism() {
    let a = artifacts(9);
    let b = artifacts(9);
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0).collect();
    let c = artifacts(10);
    let seed_changes = a.iter().zip(&c).any(|(x, y)| x.1 != y.1);
    let ok = differing.is_empty() && seed_changes;
    let bytes: usize = a.iter().map(|x| x.1.len()).sum();
    report(
        9,
        ok,
        &format!("{} artifacts, {bytes} bytes, differing: {differing:?}; another seed changes output: {seed_changes}", a.len()),
    );
    assert!(ok);
}
