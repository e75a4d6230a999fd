//! Multi-label zero-shot data sampling.
//!
//! A random set of aspects is declared unseen. Each one, together with every
//! product still linked to it, is carved out of the training graph and
//! handed alternately to validation (even draw index) or test (odd). Every
//! split then receives negative candidate links sampled uniformly from
//! product–aspect non-edges of the original graph.
//!
//! Validation and test each get an inference graph: the training graph plus
//! that split's unseen aspects and removed products, with every link to the
//! split's unseen aspects withheld from structure. The unseen aspects keep
//! their category membership.

use std::collections::{HashMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Hypergraph, NodeId, NodeKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Number of unseen aspects to draw.
    pub n_unseen: usize,
    /// Negatives sampled per positive.
    pub negative_rate: f64,
    pub seed: u64,
    /// Only aspects linked to at most this many products may be drawn as unseen.
    pub max_unseen_support: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { n_unseen: 2, negative_rate: 2.0, seed: 0, max_unseen_support: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkLabel {
    Positive,
    Negative,
}

impl LinkLabel {
    pub fn value(self) -> f64 {
        match self {
            LinkLabel::Positive => 1.0,
            LinkLabel::Negative => 0.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == LinkLabel::Positive
    }
}

/// A scored (product, aspect) pair; ids refer to the graph the list belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CandidateLink {
    pub product: NodeId,
    pub aspect: NodeId,
    pub label: LinkLabel,
}

/// Validation or test partition.
#[derive(Clone, Debug)]
pub struct EvalSplit {
    /// Training graph extended with this split's nodes and structural hyperedges.
    pub graph: Hypergraph,
    /// Candidate links in `graph` ids.
    pub candidates: Vec<CandidateLink>,
    pub unseen_aspects: Vec<String>,
    pub removed_products: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct SplitBundle {
    pub config: SplitConfig,
    pub train_graph: Hypergraph,
    /// Training positives plus sampled negatives, in `train_graph` ids.
    pub train_candidates: Vec<CandidateLink>,
    pub val: EvalSplit,
    pub test: EvalSplit,
    /// Samplers that could not draw the requested number of negatives.
    pub short_complements: usize,
}

/// Result of a negative draw.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeSample {
    pub links: Vec<CandidateLink>,
    /// Set when the complement held fewer pairs than requested.
    pub short: bool,
}

/// Number of negatives requested for `positives` at `rate`.
pub fn negative_count(positives: usize, rate: f64) -> usize {
    (rate * positives as f64).ceil() as usize
}

type Block = (Vec<NodeId>, Vec<NodeId>);

const ENUMERATE_LIMIT: usize = 1 << 18;

/// Uniform draw without replacement of `count` pairs from the union of
/// disjoint rectangular blocks, skipping pairs for which `excluded` holds.
fn sample_blocks(
    blocks: &[Block],
    count: usize,
    excluded: &dyn Fn(NodeId, NodeId) -> bool,
    rng: &mut ChaCha8Rng,
) -> (Vec<(NodeId, NodeId)>, bool) {
    let area: usize = blocks.iter().map(|(p, a)| p.len() * a.len()).sum();
    if count == 0 || area == 0 {
        return (Vec::new(), count > 0);
    }
    if area <= ENUMERATE_LIMIT || count.saturating_mul(4) >= area {
        let pool: Vec<(NodeId, NodeId)> = blocks
            .iter()
            .flat_map(|(ps, asp)| ps.iter().flat_map(move |&p| asp.iter().map(move |&a| (p, a))))
            .filter(|&(p, a)| !excluded(p, a))
            .collect();
        if pool.len() <= count {
            let short = pool.len() < count;
            let mut pool = pool;
            pool.shuffle(rng);
            return (pool, short);
        }
        let picked = index::sample(rng, pool.len(), count);
        return (picked.into_iter().map(|i| pool[i]).collect(), false);
    }
    // Rejection sampling over a large, sparse-edged universe.
    let mut taken = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > count.saturating_mul(64) + 1024 {
            return (out, true);
        }
        let mut r = rng.random_range(0..area);
        let (ps, asp) = blocks
            .iter()
            .find(|(p, a)| {
                let s = p.len() * a.len();
                if r < s {
                    true
                } else {
                    r -= s;
                    false
                }
            })
            .expect("r < area");
        let pair = (ps[r / asp.len()], asp[r % asp.len()]);
        if excluded(pair.0, pair.1) || !taken.insert(pair) {
            continue;
        }
        out.push(pair);
    }
    (out, false)
}

/// Samples `⌈rate · |positives|⌉` product–aspect non-edges of `g` uniformly,
/// without duplicates, capped at the complement size.
pub fn sample_negatives(g: &Hypergraph, positives: &[CandidateLink], rate: f64, seed: u64) -> Result<NegativeSample> {
    if positives.is_empty() {
        return Err(Error::Split("negative sampling needs at least one positive".into()));
    }
    if !(rate > 0.0) {
        return Err(Error::Config(format!("negative rate must be positive, got {rate}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = (g.nodes_of_kind(NodeKind::Product).collect(), g.nodes_of_kind(NodeKind::Aspect).collect());
    let (pairs, short) =
        sample_blocks(&[block], negative_count(positives.len(), rate), &|p, a| g.is_linked(p, a), &mut rng);
    Ok(NegativeSample { links: pairs.into_iter().map(|(p, a)| negative(p, a)).collect(), short })
}

fn negative(product: NodeId, aspect: NodeId) -> CandidateLink {
    CandidateLink { product, aspect, label: LinkLabel::Negative }
}

fn positive(product: NodeId, aspect: NodeId) -> CandidateLink {
    CandidateLink { product, aspect, label: LinkLabel::Positive }
}

/// Selection of unseen nodes and candidates, all in original-graph ids.
struct Plan {
    val_aspects: Vec<NodeId>,
    val_products: Vec<NodeId>,
    test_aspects: Vec<NodeId>,
    test_products: Vec<NodeId>,
    train_candidates: Vec<CandidateLink>,
    val_candidates: Vec<CandidateLink>,
    test_candidates: Vec<CandidateLink>,
    short_complements: usize,
}

fn products_of(g: &Hypergraph, aspect: NodeId, removed: &[bool]) -> Vec<NodeId> {
    let mut ps: Vec<NodeId> = g
        .product_aspect_links()
        .filter(|&(p, a)| a == aspect && !removed[p.0])
        .map(|(p, _)| p)
        .collect();
    ps.sort();
    ps.dedup();
    ps
}

fn plan(g: &Hypergraph, cfg: &SplitConfig) -> Result<Plan> {
    let aspects: Vec<NodeId> = g.nodes_of_kind(NodeKind::Aspect).collect();
    if cfg.n_unseen == 0 {
        return Err(Error::Split("n_unseen must be positive".into()));
    }
    if cfg.n_unseen >= aspects.len() {
        return Err(Error::Split(format!(
            "n_unseen = {} must be smaller than the aspect count {}",
            cfg.n_unseen,
            aspects.len()
        )));
    }
    if !(cfg.negative_rate > 0.0) {
        return Err(Error::Config(format!("negative rate must be positive, got {}", cfg.negative_rate)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut support: HashMap<NodeId, usize> = HashMap::new();
    for (_, a) in g.product_aspect_links() {
        *support.entry(a).or_default() += 1;
    }
    let mut pool: Vec<NodeId> = aspects
        .iter()
        .copied()
        .filter(|a| cfg.max_unseen_support.is_none_or(|m| support.get(a).copied().unwrap_or(0) <= m))
        .collect();
    pool.shuffle(&mut rng);

    let mut removed = vec![false; g.num_nodes()];
    // (aspect, its products, draw index)
    let mut drawn: Vec<(NodeId, Vec<NodeId>)> = Vec::new();
    for &a in &pool {
        if drawn.len() == cfg.n_unseen {
            break;
        }
        let ps = products_of(g, a, &removed);
        if ps.is_empty() {
            // Resample: this aspect has no products left.
            continue;
        }
        removed[a.0] = true;
        for &p in &ps {
            removed[p.0] = true;
        }
        drawn.push((a, ps));
    }
    if drawn.len() < cfg.n_unseen {
        return Err(Error::Split(format!(
            "only {} of {} unseen aspects have incident products",
            drawn.len(),
            cfg.n_unseen
        )));
    }

    let train_products: Vec<NodeId> = g.nodes_of_kind(NodeKind::Product).filter(|p| !removed[p.0]).collect();
    let train_aspects: Vec<NodeId> = g.nodes_of_kind(NodeKind::Aspect).filter(|a| !removed[a.0]).collect();
    let train_pos: Vec<CandidateLink> = g
        .product_aspect_links()
        .filter(|(p, a)| !removed[p.0] && !removed[a.0])
        .map(|(p, a)| positive(p, a))
        .collect();
    if train_products.is_empty() || train_pos.is_empty() {
        return Err(Error::Split("removing the unseen nodes leaves an empty training graph".into()));
    }

    let mut short_complements = 0;
    let mut split_candidates = |parity: usize, rng: &mut ChaCha8Rng| -> (Vec<NodeId>, Vec<NodeId>, Vec<CandidateLink>) {
        let mine: Vec<&(NodeId, Vec<NodeId>)> = drawn.iter().enumerate().filter(|(i, _)| i % 2 == parity).map(|(_, d)| d).collect();
        let split_aspects: Vec<NodeId> = mine.iter().map(|(a, _)| *a).collect();
        let split_products: Vec<NodeId> = mine.iter().flat_map(|(_, ps)| ps.iter().copied()).collect();
        let all_products: Vec<NodeId> = train_products.iter().chain(&split_products).copied().collect();
        let mut taken: HashSet<(NodeId, NodeId)> = HashSet::new();
        let mut out = Vec::new();
        for (a, ps) in &mine {
            let pos: Vec<CandidateLink> = ps.iter().map(|&p| positive(p, *a)).collect();
            let other_aspects: Vec<NodeId> = train_aspects.iter().chain(&split_aspects).copied().filter(|x| x != a).collect();
            let blocks = [(ps.clone(), other_aspects), (all_products.clone(), vec![*a])];
            let want = negative_count(pos.len(), cfg.negative_rate);
            let (neg, short) = sample_blocks(&blocks, want, &|p, x| g.is_linked(p, x) || taken.contains(&(p, x)), rng);
            if short {
                short_complements += 1;
            }
            taken.extend(neg.iter().copied());
            out.extend(pos);
            out.extend(neg.into_iter().map(|(p, x)| negative(p, x)));
        }
        (split_aspects, split_products, out)
    };
    let (val_aspects, val_products, val_candidates) = split_candidates(0, &mut rng);
    let (test_aspects, test_products, test_candidates) = split_candidates(1, &mut rng);

    let block = (train_products.clone(), train_aspects.clone());
    let (neg, short) = sample_blocks(
        &[block],
        negative_count(train_pos.len(), cfg.negative_rate),
        &|p, a| g.is_linked(p, a),
        &mut rng,
    );
    if short {
        short_complements += 1;
    }
    let mut train_candidates = train_pos;
    train_candidates.extend(neg.into_iter().map(|(p, a)| negative(p, a)));

    Ok(Plan {
        val_aspects,
        val_products,
        test_aspects,
        test_products,
        train_candidates,
        val_candidates,
        test_candidates,
        short_complements,
    })
}

fn remap_links(links: &[CandidateLink], remap: &[Option<NodeId>]) -> Result<Vec<CandidateLink>> {
    links
        .iter()
        .map(|l| match (remap[l.product.0], remap[l.aspect.0]) {
            (Some(product), Some(aspect)) => Ok(CandidateLink { product, aspect, label: l.label }),
            _ => Err(Error::Split("candidate link refers to a node outside its graph".into())),
        })
        .collect()
}

fn eval_split(
    g: &Hypergraph,
    removed: &[bool],
    aspects: &[NodeId],
    products: &[NodeId],
    candidates: &[CandidateLink],
) -> Result<EvalSplit> {
    let mut keep: Vec<bool> = removed.iter().map(|r| !r).collect();
    for v in aspects.iter().chain(products) {
        keep[v.0] = true;
    }
    let unseen: HashSet<NodeId> = aspects.iter().copied().collect();
    let dropped: HashSet<(NodeId, NodeId)> = g.product_aspect_links().filter(|(_, a)| unseen.contains(a)).collect();
    let (graph, remap) = g.retain(&keep, &dropped);
    Ok(EvalSplit {
        candidates: remap_links(candidates, &remap)?,
        unseen_aspects: aspects.iter().map(|&a| g.key(a).to_string()).collect(),
        removed_products: products.iter().map(|&p| g.key(p).to_string()).collect(),
        graph,
    })
}

fn assemble(g: &Hypergraph, config: SplitConfig, plan: Plan) -> Result<SplitBundle> {
    let mut removed = vec![false; g.num_nodes()];
    for v in plan.val_aspects.iter().chain(&plan.val_products).chain(&plan.test_aspects).chain(&plan.test_products) {
        removed[v.0] = true;
    }
    let keep: Vec<bool> = removed.iter().map(|r| !r).collect();
    let (train_graph, remap) = g.retain(&keep, &HashSet::new());
    let train_candidates = remap_links(&plan.train_candidates, &remap)?;
    let val = eval_split(g, &removed, &plan.val_aspects, &plan.val_products, &plan.val_candidates)?;
    let test = eval_split(g, &removed, &plan.test_aspects, &plan.test_products, &plan.test_candidates)?;
    Ok(SplitBundle { config, train_graph, train_candidates, val, test, short_complements: plan.short_complements })
}

/// Carves a zero-shot train/validation/test split out of `g`.
pub fn zero_shot_split(g: &Hypergraph, cfg: &SplitConfig) -> Result<SplitBundle> {
    let p = plan(g, cfg)?;
    assemble(g, cfg.clone(), p)
}

/// Candidate triple by node key, as stored in a split manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyedLink(pub String, pub String, pub u8);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSplit {
    pub unseen_aspects: Vec<String>,
    pub removed_products: Vec<String>,
    pub candidates: Vec<KeyedLink>,
}

/// Everything needed to rebuild a [`SplitBundle`] from the original graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub format: String,
    pub config: SplitConfig,
    pub train_candidates: Vec<KeyedLink>,
    pub val: ManifestSplit,
    pub test: ManifestSplit,
    pub short_complements: usize,
}

pub const MANIFEST_FORMAT: &str = "HGAVE1-split";

fn keyed(g: &Hypergraph, links: &[CandidateLink]) -> Vec<KeyedLink> {
    links
        .iter()
        .map(|l| KeyedLink(g.key(l.product).to_string(), g.key(l.aspect).to_string(), u8::from(l.label.is_positive())))
        .collect()
}

impl SplitBundle {
    pub fn manifest(&self) -> SplitManifest {
        let part = |s: &EvalSplit| ManifestSplit {
            unseen_aspects: s.unseen_aspects.clone(),
            removed_products: s.removed_products.clone(),
            candidates: keyed(&s.graph, &s.candidates),
        };
        SplitManifest {
            format: MANIFEST_FORMAT.to_string(),
            config: self.config.clone(),
            train_candidates: keyed(&self.train_graph, &self.train_candidates),
            val: part(&self.val),
            test: part(&self.test),
            short_complements: self.short_complements,
        }
    }

    /// Rebuilds the bundle recorded in `manifest` against original graph `g`.
    pub fn from_manifest(g: &Hypergraph, manifest: &SplitManifest) -> Result<Self> {
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!("expected {MANIFEST_FORMAT}, found {:?}", manifest.format)));
        }
        let id = |k: &String| g.lookup(k).ok_or_else(|| Error::Split(format!("manifest key {k:?} is not in the graph")));
        let ids = |ks: &[String]| ks.iter().map(id).collect::<Result<Vec<_>>>();
        let links = |ls: &[KeyedLink]| {
            ls.iter()
                .map(|KeyedLink(p, a, y)| {
                    let label = if *y == 1 { LinkLabel::Positive } else { LinkLabel::Negative };
                    Ok(CandidateLink { product: id(p)?, aspect: id(a)?, label })
                })
                .collect::<Result<Vec<_>>>()
        };
        let plan = Plan {
            val_aspects: ids(&manifest.val.unseen_aspects)?,
            val_products: ids(&manifest.val.removed_products)?,
            test_aspects: ids(&manifest.test.unseen_aspects)?,
            test_products: ids(&manifest.test.removed_products)?,
            train_candidates: links(&manifest.train_candidates)?,
            val_candidates: links(&manifest.val.candidates)?,
            test_candidates: links(&manifest.test.candidates)?,
            short_complements: manifest.short_complements,
        };
        assemble(g, manifest.config.clone(), plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{HyperedgeKind, HypergraphBuilder};
    use crate::ingest::{build_graph, AspectPair, ProductRecord};

    /// 6 products, 4 aspects, one category.
    fn toy() -> Hypergraph {
        let links: [&[usize]; 6] = [&[0, 1], &[1], &[2], &[2, 3], &[3], &[0]];
        let products: Vec<ProductRecord> = links
            .iter()
            .enumerate()
            .map(|(i, asp)| ProductRecord {
                product_key: format!("p{i}"),
                category_key: "c".into(),
                title: String::new(),
                description: String::new(),
                aspects: asp.iter().map(|a| AspectPair { attribute: "a".into(), value: a.to_string() }).collect(),
            })
            .collect();
        build_graph(&products, &[]).unwrap().graph
    }

    #[test]
    fn toy_split_has_no_leakage() {
        let g = toy();
        let b = zero_shot_split(&g, &SplitConfig { n_unseen: 2, seed: 7, ..Default::default() }).unwrap();
        for key in b.val.unseen_aspects.iter().chain(&b.test.unseen_aspects).chain(&b.val.removed_products).chain(&b.test.removed_products) {
            assert!(b.train_graph.lookup(key).is_none(), "{key} leaked into training");
        }
        let va: HashSet<_> = b.val.unseen_aspects.iter().collect();
        assert!(b.test.unseen_aspects.iter().all(|a| !va.contains(a)));
        assert_eq!(b.val.unseen_aspects.len(), 1);
        assert_eq!(b.test.unseen_aspects.len(), 1);
    }

    #[test]
    fn n_unseen_equal_to_aspect_count_fails() {
        let g = toy();
        assert!(zero_shot_split(&g, &SplitConfig { n_unseen: 4, seed: 7, ..Default::default() }).is_err());
    }

    #[test]
    fn rate_two_with_three_positives_draws_six() {
        // One aspect with 3 products; plenty of complement.
        let mut products = vec![];
        for i in 0..3 {
            products.push(ProductRecord {
                product_key: format!("q{i}"),
                category_key: "c".into(),
                title: String::new(),
                description: String::new(),
                aspects: vec![AspectPair { attribute: "rare".into(), value: "x".into() }, AspectPair { attribute: "k".into(), value: i.to_string() }],
            });
        }
        for i in 0..6 {
            products.push(ProductRecord {
                product_key: format!("r{i}"),
                category_key: "c".into(),
                title: String::new(),
                description: String::new(),
                aspects: vec![AspectPair { attribute: "common".into(), value: (i % 2).to_string() }],
            });
        }
        let g = build_graph(&products, &[]).unwrap().graph;
        let cfg = SplitConfig { n_unseen: 1, seed: 3, max_unseen_support: Some(3), negative_rate: 2.0 };
        // Support filter keeps only aspects with ≤ 3 products; find a seed that picks `rare: x`.
        let b = (0..50)
            .map(|s| zero_shot_split(&g, &SplitConfig { seed: s, ..cfg.clone() }).unwrap())
            .find(|b| b.val.unseen_aspects == ["rare: x"])
            .expect("some seed draws the rare aspect");
        let pos = b.val.candidates.iter().filter(|c| c.label.is_positive()).count();
        let neg = b.val.candidates.len() - pos;
        assert_eq!((pos, neg), (3, 6));
    }

    #[test]
    fn sample_negatives_rate_and_empty_complement() {
        let g = toy();
        let (p, a) = g.product_aspect_links().next().unwrap();
        let s = sample_negatives(&g, &[positive(p, a)], 2.0, 1).unwrap();
        assert_eq!(s.links.len(), 2);
        assert!(s.links.iter().all(|l| !g.is_linked(l.product, l.aspect)));
        assert!(!s.short);

        let mut b = HypergraphBuilder::new();
        let p: Vec<_> = (0..2).map(|i| b.add_node(NodeKind::Product, format!("p{i}"), "").unwrap()).collect();
        let a: Vec<_> = (0..2).map(|i| b.add_node(NodeKind::Aspect, format!("a{i}"), "").unwrap()).collect();
        for &pi in &p {
            b.add_hyperedge(HyperedgeKind::ProductAspects, vec![pi, a[0], a[1]], 1.0).unwrap();
            for &ai in &a {
                b.add_pair(pi, ai).unwrap();
            }
        }
        let full = b.build();
        let s = sample_negatives(&full, &[positive(p[0], a[0])], 2.0, 1).unwrap();
        assert!(s.links.is_empty());
        assert!(s.short);
        assert!(sample_negatives(&full, &[], 2.0, 1).is_err());
    }

    #[test]
    fn negatives_are_uniform_over_complement() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let g = toy();
        let complement: Vec<(NodeId, NodeId)> = g
            .nodes_of_kind(NodeKind::Product)
            .flat_map(|p| g.nodes_of_kind(NodeKind::Aspect).map(move |a| (p, a)))
            .filter(|&(p, a)| !g.is_linked(p, a))
            .collect();
        let (p, a) = g.product_aspect_links().next().unwrap();
        let mut counts: HashMap<(NodeId, NodeId), usize> = HashMap::new();
        let draws = 1000;
        for seed in 0..draws {
            let s = sample_negatives(&g, &[positive(p, a)], 1.0, seed).unwrap();
            *counts.entry((s.links[0].product, s.links[0].aspect)).or_default() += 1;
        }
        assert!(counts.keys().all(|k| complement.contains(k)));
        let expected = draws as f64 / complement.len() as f64;
        let chi2: f64 = complement
            .iter()
            .map(|k| {
                let o = *counts.get(k).unwrap_or(&0) as f64;
                (o - expected).powi(2) / expected
            })
            .sum();
        let critical = ChiSquared::new((complement.len() - 1) as f64).unwrap().inverse_cdf(0.999);
        assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
    }

    #[test]
    fn manifest_round_trip_rebuilds_bundle() {
        let g = toy();
        let b = zero_shot_split(&g, &SplitConfig { n_unseen: 2, seed: 11, ..Default::default() }).unwrap();
        let m = b.manifest();
        let json = serde_json::to_string(&m).unwrap();
        let back: SplitManifest = serde_json::from_str(&json).unwrap();
        let rebuilt = SplitBundle::from_manifest(&g, &back).unwrap();
        assert_eq!(rebuilt.train_graph, b.train_graph);
        assert_eq!(rebuilt.train_candidates, b.train_candidates);
        assert_eq!(rebuilt.val.graph, b.val.graph);
        assert_eq!(rebuilt.test.candidates, b.test.candidates);
        assert_eq!(rebuilt.manifest(), m);
    }

    #[test]
    fn eval_graph_withholds_unseen_links() {
        let g = toy();
        let b = zero_shot_split(&g, &SplitConfig { n_unseen: 2, seed: 5, ..Default::default() }).unwrap();
        for split in [&b.val, &b.test] {
            for key in &split.unseen_aspects {
                let a = split.graph.lookup(key).unwrap();
                assert!(split.graph.incident_edges(a).iter().all(|&e| split.graph.edge(e).kind == HyperedgeKind::CategoryBundle));
                assert!(split.graph.pairs().iter().all(|&(_, y)| y != a));
            }
            for c in &split.candidates {
                assert_eq!(split.graph.kind(c.product), NodeKind::Product);
                assert_eq!(split.graph.kind(c.aspect), NodeKind::Aspect);
            }
        }
    }
}
