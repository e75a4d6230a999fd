//! Record parsing, hypergraph construction, and node feature vectors.
//!
//! Products and sessions arrive as line-delimited JSON. Each product yields a
//! product node, its category node (shared), and one aspect node per distinct
//! `"attribute: value"` string (shared globally). Hyperedges follow the four
//! families in [`HyperedgeKind`].
//!
//! Node features come from a feature file when available; anything missing
//! falls back to a seeded token-hashing embedding of the node text.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{HyperedgeKind, Hypergraph, HypergraphBuilder, NodeId, NodeKind};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectPair {
    pub attribute: String,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductRecord {
    pub product_key: String,
    pub category_key: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub aspects: Vec<AspectPair>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionKind {
    View,
    Buy,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub user_key: String,
    pub kind: SessionKind,
    pub product_keys: Vec<String>,
}

/// Node key of an aspect.
pub fn aspect_key(attribute: &str, value: &str) -> String {
    format!("{attribute}: {value}")
}

/// Deterministic elaboration of an aspect into a sentence.
pub fn expand_aspect_text(attribute: &str, value: &str) -> String {
    format!("{attribute} is {value}")
}

const CLS: &str = "[CLS]";
const SEP: &str = "[SEP]";

/// Encoder input for a product: title and description around special tokens.
pub fn product_text(title: &str, description: &str) -> String {
    format!("{CLS} {title} {SEP} {description}")
}

fn parse_lines<T, R>(reader: R, source_name: &str) -> Result<Vec<(usize, T)>>
where
    T: for<'de> Deserialize<'de>,
    R: BufRead,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let rec = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

/// Parses a products file (one JSON object per line).
pub fn parse_products<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<ProductRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, rec) in parse_lines::<ProductRecord, _>(reader, source_name)? {
        let fail = |message: String| Error::Parse { source_name: source_name.to_string(), line, message };
        if rec.product_key.is_empty() || rec.category_key.is_empty() {
            return Err(fail("product_key and category_key must be non-empty".into()));
        }
        if !seen.insert(rec.product_key.clone()) {
            return Err(fail(format!("duplicate product_key {:?}", rec.product_key)));
        }
        if rec.aspects.iter().any(|a| a.attribute.is_empty() || a.value.is_empty()) {
            return Err(fail("aspect attribute and value must be non-empty".into()));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Parses a sessions file (one JSON object per line).
pub fn parse_sessions<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<SessionRecord>> {
    Ok(parse_lines::<SessionRecord, _>(reader, source_name)?.into_iter().map(|(_, r)| r).collect())
}

pub fn read_products(path: &Path) -> Result<Vec<ProductRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    parse_products(f, &path.display().to_string())
}

pub fn read_sessions(path: &Path) -> Result<Vec<SessionRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    parse_sessions(f, &path.display().to_string())
}

/// Counts gathered while assembling the graph.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub categories: usize,
    pub products: usize,
    pub aspects: usize,
    pub category_product_edges: usize,
    pub product_aspect_edges: usize,
    /// `[nodes covered, hyperedges]` per hyperedge kind.
    pub hyperedges: BTreeMap<String, [usize; 2]>,
    pub unknown_session_keys: usize,
    pub dropped_sessions: usize,
}

impl BuildReport {
    fn from_graph(g: &Hypergraph, unknown_session_keys: usize, dropped_sessions: usize) -> Self {
        let mut hyperedges = BTreeMap::new();
        for kind in HyperedgeKind::ALL {
            let covered: HashSet<NodeId> = g
                .edges()
                .iter()
                .filter(|e| e.kind == kind)
                .flat_map(|e| e.members.iter().copied())
                .collect();
            hyperedges.insert(kind.as_str().to_string(), [covered.len(), g.count_edge_kind(kind)]);
        }
        let pa = g.product_aspect_links().count();
        Self {
            categories: g.count_kind(NodeKind::Category),
            products: g.count_kind(NodeKind::Product),
            aspects: g.count_kind(NodeKind::Aspect),
            category_product_edges: g.pairs().len() - pa,
            product_aspect_edges: pa,
            hyperedges,
            unknown_session_keys,
            dropped_sessions,
        }
    }

    /// Text rendering in the `#nodes / #hyperedges` style.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str("#C\t#P\t#A\t#CP\t#PA");
        for kind in HyperedgeKind::ALL {
            s.push('\t');
            s.push_str(kind.as_str());
        }
        s.push('\n');
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}",
            self.categories, self.products, self.aspects, self.category_product_edges, self.product_aspect_edges
        ));
        for kind in HyperedgeKind::ALL {
            let [n, e] = self.hyperedges.get(kind.as_str()).copied().unwrap_or([0, 0]);
            s.push_str(&format!("\t{n}/{e}"));
        }
        s.push('\n');
        if self.dropped_sessions > 0 || self.unknown_session_keys > 0 {
            s.push_str(&format!(
                "warnings: {} unknown session keys dropped, {} sessions dropped\n",
                self.unknown_session_keys, self.dropped_sessions
            ));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct BuiltGraph {
    pub graph: Hypergraph,
    pub report: BuildReport,
}

/// Assembles the heterogeneous hypergraph from product and session records.
pub fn build_graph(products: &[ProductRecord], sessions: &[SessionRecord]) -> Result<BuiltGraph> {
    let mut b = HypergraphBuilder::new();
    // category node -> (products, aspects) in first-seen order
    let mut bundles: Vec<(NodeId, Vec<NodeId>, Vec<NodeId>, HashSet<NodeId>)> = Vec::new();
    let mut bundle_of: HashMap<NodeId, usize> = HashMap::new();
    let mut product_aspects: Vec<(NodeId, Vec<NodeId>)> = Vec::new();

    for rec in products {
        let c = match b.lookup(&rec.category_key) {
            Some(id) if b.kind_of(id) == Some(NodeKind::Category) => id,
            Some(_) => return Err(Error::DuplicateKey(rec.category_key.clone())),
            None => b.add_node(NodeKind::Category, rec.category_key.clone(), rec.category_key.clone())?,
        };
        let p = b.add_node(
            NodeKind::Product,
            rec.product_key.clone(),
            product_text(&rec.title, &rec.description),
        )?;
        let mut aspects = Vec::new();
        for pair in &rec.aspects {
            let key = aspect_key(&pair.attribute, &pair.value);
            let a = match b.lookup(&key) {
                Some(id) if b.kind_of(id) == Some(NodeKind::Aspect) => id,
                Some(_) => return Err(Error::DuplicateKey(key)),
                None => b.add_node(NodeKind::Aspect, key, expand_aspect_text(&pair.attribute, &pair.value))?,
            };
            if !aspects.contains(&a) {
                aspects.push(a);
            }
        }
        b.add_pair(c, p)?;
        for &a in &aspects {
            b.add_pair(p, a)?;
        }
        let slot = *bundle_of.entry(c).or_insert_with(|| {
            bundles.push((c, Vec::new(), Vec::new(), HashSet::new()));
            bundles.len() - 1
        });
        let bundle = &mut bundles[slot];
        bundle.1.push(p);
        for &a in &aspects {
            if bundle.3.insert(a) {
                bundle.2.push(a);
            }
        }
        product_aspects.push((p, aspects));
    }

    for (p, aspects) in product_aspects {
        if aspects.is_empty() {
            continue;
        }
        let mut members = Vec::with_capacity(aspects.len() + 1);
        members.push(p);
        members.extend(aspects);
        b.add_hyperedge(HyperedgeKind::ProductAspects, members, 1.0)?;
    }
    for (c, ps, asp, _) in bundles {
        let mut members = Vec::with_capacity(1 + ps.len() + asp.len());
        members.push(c);
        members.extend(ps);
        members.extend(asp);
        b.add_hyperedge(HyperedgeKind::CategoryBundle, members, 1.0)?;
    }

    let mut unknown = 0;
    let mut dropped = 0;
    for s in sessions {
        let mut members = Vec::new();
        for key in &s.product_keys {
            match b.lookup(key) {
                Some(id) if b.kind_of(id) == Some(NodeKind::Product) => {
                    if !members.contains(&id) {
                        members.push(id);
                    }
                }
                _ => unknown += 1,
            }
        }
        if members.len() < 2 {
            dropped += 1;
            continue;
        }
        let kind = match s.kind {
            SessionKind::View => HyperedgeKind::AlsoView,
            SessionKind::Buy => HyperedgeKind::AlsoBuy,
        };
        b.add_hyperedge(kind, members, 1.0)?;
    }

    let graph = b.build();
    if !graph.is_heterogeneous() {
        return Err(Error::NotHeterogeneous(graph.type_count()));
    }
    let report = BuildReport::from_graph(&graph, unknown, dropped);
    Ok(BuiltGraph { graph, report })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// Seeded token-hashing embedding with unit L2 norm. Each token contributes a
/// Gaussian vector derived from its hash; text with no tokens maps to zeros.
pub fn fallback_featurize(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim >= 1, "feature dimension must be positive");
    let cleaned = text.replace(CLS, " ").replace(SEP, " ");
    let mut v = vec![0.0; dim];
    for tok in tokens(&cleaned) {
        let h = fnv1a(tok.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        for x in v.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x += z;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Node key → dense feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
    /// File records that matched a graph node.
    pub matched: usize,
    /// Nodes that had to be featurized from text.
    pub fallback: usize,
    /// Fallback nodes whose text had no tokens (zero vector).
    pub empty_text: usize,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "feature dimension must be positive");
        Self { dim, entries: BTreeMap::new(), matched: 0, fallback: 0, empty_text: 0 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn insert(&mut self, key: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, found: vector.len() });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature vector"));
        }
        self.entries.insert(key.into(), vector);
        Ok(())
    }

    /// Fills in every graph node that has no vector yet from its text.
    pub fn fill_missing(&mut self, graph: &Hypergraph, seed: u64) {
        for n in graph.nodes() {
            if self.entries.contains_key(&n.key) {
                continue;
            }
            let v = fallback_featurize(&n.text, self.dim, seed);
            if v.iter().all(|&x| x == 0.0) {
                self.empty_text += 1;
            }
            self.fallback += 1;
            self.entries.insert(n.key.clone(), v);
        }
    }

    /// Store built purely from node text.
    pub fn fallback_for(graph: &Hypergraph, dim: usize, seed: u64) -> Self {
        let mut s = Self::new(dim);
        s.fill_missing(graph, seed);
        s
    }

    /// One-hot identity features over the graph's nodes (index = node id).
    pub fn one_hot(graph: &Hypergraph) -> Self {
        let n = graph.num_nodes().max(1);
        let mut s = Self::new(n);
        for node in graph.nodes() {
            let mut v = vec![0.0; n];
            v[node.id.0] = 1.0;
            s.entries.insert(node.key.clone(), v);
        }
        s
    }

    /// Restricts to the keys of one graph, erroring on any node without a vector.
    pub fn check_covers(&self, graph: &Hypergraph) -> Result<()> {
        match graph.nodes().iter().find(|n| !self.entries.contains_key(&n.key)) {
            Some(n) => Err(Error::MissingFeature(n.key.clone())),
            None => Ok(()),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "dim={}", self.dim)?;
        for (k, v) in &self.entries {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            writeln!(w, "{k}\t{}", vals.join(","))?;
        }
        Ok(())
    }
}

/// Reads a features file: a `dim=<d>` header, then `key<TAB>v1,...,vd` records.
pub fn read_feature_file<R: BufRead>(reader: R, source_name: &str) -> Result<(usize, Vec<(String, Vec<f64>)>)> {
    let parse_err = |line: usize, message: String| Error::Parse { source_name: source_name.to_string(), line, message };
    let mut lines = reader.lines().enumerate();
    let dim = loop {
        match lines.next() {
            None => return Err(parse_err(1, "missing dim=<d> header".into())),
            Some((i, line)) => {
                let line = line?;
                let t = line.trim();
                if t.is_empty() {
                    continue;
                }
                let d = t
                    .strip_prefix("dim=")
                    .and_then(|d| d.trim().parse::<usize>().ok())
                    .filter(|&d| d >= 1)
                    .ok_or_else(|| parse_err(i + 1, format!("expected dim=<d> header, got {t:?}")))?;
                break d;
            }
        }
    };
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (key, vals) = line
            .rsplit_once('\t')
            .ok_or_else(|| parse_err(i + 1, "expected key<TAB>values".into()))?;
        let v: Vec<f64> = vals
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(i + 1, format!("bad float: {e}")))?;
        if v.len() != dim {
            return Err(Error::DimMismatch { expected: dim, found: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(i + 1, "non-finite value".into()));
        }
        records.push((key.to_string(), v));
    }
    Ok((dim, records))
}

/// Loads a features file and completes it for `graph` with fallback vectors.
pub fn load_features(path: &Path, graph: &Hypergraph, seed: u64) -> Result<FeatureStore> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    features_from_reader(f, &path.display().to_string(), graph, seed)
}

pub fn features_from_reader<R: BufRead>(reader: R, source_name: &str, graph: &Hypergraph, seed: u64) -> Result<FeatureStore> {
    let (dim, records) = read_feature_file(reader, source_name)?;
    let mut store = FeatureStore::new(dim);
    for (key, v) in records {
        if graph.lookup(&key).is_some() {
            if !store.contains(&key) {
                store.matched += 1;
            }
            store.insert(key, v)?;
        }
    }
    store.fill_missing(graph, seed);
    Ok(store)
}
