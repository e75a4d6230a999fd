//! Typed heterogeneous hypergraph and its linear-algebra views.
//!
//! A [`Hypergraph`] holds three node kinds (categories, products, aspects),
//! four hyperedge kinds, and a pairwise edge list (category–product and
//! product–aspect) used by the final graph layers of the model. It is
//! immutable once built; construction goes through [`HypergraphBuilder`],
//! which validates kind-specific hyperedge membership.
//!
//! Incidence is stored sparse (per-node and per-edge lists). Dense matrices
//! only appear in tests.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense, contiguous node index within one graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

/// Dense, contiguous hyperedge index within one graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl EdgeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Category,
    Product,
    Aspect,
}

impl NodeKind {
    pub const ALL: [NodeKind; 3] = [NodeKind::Category, NodeKind::Product, NodeKind::Aspect];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Category => "category",
            NodeKind::Product => "product",
            NodeKind::Aspect => "aspect",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The four hyperedge families. Each one is a message-passing channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperedgeKind {
    /// Products viewed together by one user.
    AlsoView,
    /// Products bought together by one user.
    AlsoBuy,
    /// One product plus all of its aspects.
    ProductAspects,
    /// One category plus its products and their aspects.
    CategoryBundle,
}

impl HyperedgeKind {
    pub const ALL: [HyperedgeKind; 4] = [
        HyperedgeKind::AlsoView,
        HyperedgeKind::AlsoBuy,
        HyperedgeKind::ProductAspects,
        HyperedgeKind::CategoryBundle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HyperedgeKind::AlsoView => "also_view",
            HyperedgeKind::AlsoBuy => "also_buy",
            HyperedgeKind::ProductAspects => "product_aspects",
            HyperedgeKind::CategoryBundle => "category_bundle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for HyperedgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    /// External key; also the lookup key into a feature store.
    pub key: String,
    /// Text the fallback featurizer encodes when no vector is supplied.
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperedge {
    pub id: EdgeId,
    pub kind: HyperedgeKind,
    pub members: Vec<NodeId>,
    pub weight: f64,
}

/// Checks kind-specific membership rules for a hyperedge.
fn validate_members(kind: HyperedgeKind, members: &[NodeId], nodes: &[Node]) -> Result<()> {
    if members.is_empty() {
        return Err(Error::InvalidHyperedge(format!("{kind} hyperedge has no members")));
    }
    let mut seen = HashSet::with_capacity(members.len());
    let mut counts = [0usize; 3];
    for &m in members {
        let node = nodes
            .get(m.0)
            .ok_or_else(|| Error::InvalidHyperedge(format!("{kind} member {} does not exist", m.0)))?;
        if !seen.insert(m) {
            return Err(Error::InvalidHyperedge(format!(
                "{kind} hyperedge lists node {} twice",
                node.key
            )));
        }
        counts[node.kind as usize] += 1;
    }
    let [c, p, a] = counts;
    let ok = match kind {
        HyperedgeKind::AlsoView | HyperedgeKind::AlsoBuy => c == 0 && a == 0 && p >= 1,
        HyperedgeKind::ProductAspects => c == 0 && p == 1 && a >= 1,
        HyperedgeKind::CategoryBundle => c == 1 && p >= 1,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidHyperedge(format!(
            "{kind} hyperedge has {c} categories, {p} products, {a} aspects"
        )))
    }
}

/// Incremental, validating constructor for [`Hypergraph`].
#[derive(Clone, Debug, Default)]
pub struct HypergraphBuilder {
    nodes: Vec<Node>,
    edges: Vec<Hyperedge>,
    key_index: HashMap<String, NodeId>,
    pairs: Vec<(NodeId, NodeId)>,
    pair_set: HashSet<(NodeId, NodeId)>,
}

impl HypergraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts from an existing graph so new nodes and hyperedges can be appended.
    pub fn from_graph(g: &Hypergraph) -> Self {
        Self {
            nodes: g.nodes.clone(),
            edges: g.edges.clone(),
            key_index: g.key_index.clone(),
            pairs: g.pairs.clone(),
            pair_set: g.pairs.iter().copied().collect(),
        }
    }

    pub fn add_node(&mut self, kind: NodeKind, key: impl Into<String>, text: impl Into<String>) -> Result<NodeId> {
        let key = key.into();
        if self.key_index.contains_key(&key) {
            return Err(Error::DuplicateKey(key));
        }
        let id = NodeId(self.nodes.len());
        self.key_index.insert(key.clone(), id);
        self.nodes.push(Node { id, kind, key, text: text.into() });
        Ok(id)
    }

    pub fn lookup(&self, key: &str) -> Option<NodeId> {
        self.key_index.get(key).copied()
    }

    pub fn kind_of(&self, id: NodeId) -> Option<NodeKind> {
        self.nodes.get(id.0).map(|n| n.kind)
    }

    pub fn add_hyperedge(&mut self, kind: HyperedgeKind, members: Vec<NodeId>, weight: f64) -> Result<EdgeId> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::InvalidHyperedge(format!("{kind} weight {weight} is not positive")));
        }
        validate_members(kind, &members, &self.nodes)?;
        let id = EdgeId(self.edges.len());
        self.edges.push(Hyperedge { id, kind, members, weight });
        Ok(id)
    }

    /// Records a category–product or product–aspect edge. Endpoints may come
    /// in either order; the stored pair puts the coarser kind first.
    /// Returns `false` when the pair was already present.
    pub fn add_pair(&mut self, a: NodeId, b: NodeId) -> Result<bool> {
        let ka = self.kind_of(a).ok_or(Error::UnknownNode(a.0))?;
        let kb = self.kind_of(b).ok_or(Error::UnknownNode(b.0))?;
        let pair = match (ka, kb) {
            (NodeKind::Category, NodeKind::Product) | (NodeKind::Product, NodeKind::Aspect) => (a, b),
            (NodeKind::Product, NodeKind::Category) | (NodeKind::Aspect, NodeKind::Product) => (b, a),
            _ => {
                return Err(Error::InvalidHyperedge(format!(
                    "pairwise edge between {ka} and {kb} is not allowed"
                )))
            }
        };
        if !self.pair_set.insert(pair) {
            return Ok(false);
        }
        self.pairs.push(pair);
        Ok(true)
    }

    pub fn build(self) -> Hypergraph {
        let mut node_edges = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            for &m in &e.members {
                node_edges[m.0].push(e.id);
            }
        }
        let links = self
            .pairs
            .iter()
            .copied()
            .filter(|&(a, _)| self.nodes[a.0].kind == NodeKind::Product)
            .collect();
        Hypergraph {
            nodes: self.nodes,
            edges: self.edges,
            key_index: self.key_index,
            node_edges,
            pairs: self.pairs,
            links,
        }
    }
}

/// Immutable heterogeneous hypergraph.
#[derive(Clone, Debug)]
pub struct Hypergraph {
    nodes: Vec<Node>,
    edges: Vec<Hyperedge>,
    key_index: HashMap<String, NodeId>,
    node_edges: Vec<Vec<EdgeId>>,
    pairs: Vec<(NodeId, NodeId)>,
    links: HashSet<(NodeId, NodeId)>,
}

impl PartialEq for Hypergraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges && self.pairs == other.pairs
    }
}

impl Hypergraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn kind(&self, id: NodeId) -> NodeKind {
        self.nodes[id.0].kind
    }

    pub fn key(&self, id: NodeId) -> &str {
        &self.nodes[id.0].key
    }

    pub fn lookup(&self, key: &str) -> Option<NodeId> {
        self.key_index.get(key).copied()
    }

    pub fn edges(&self) -> &[Hyperedge] {
        &self.edges
    }

    pub fn edge(&self, id: EdgeId) -> &Hyperedge {
        &self.edges[id.0]
    }

    pub fn incident_edges(&self, v: NodeId) -> &[EdgeId] {
        &self.node_edges[v.0]
    }

    /// Category–product and product–aspect pairs in insertion order.
    pub fn pairs(&self) -> &[(NodeId, NodeId)] {
        &self.pairs
    }

    /// Whether the product–aspect pair `(p, a)` is a recorded link.
    pub fn is_linked(&self, product: NodeId, aspect: NodeId) -> bool {
        self.links.contains(&(product, aspect))
    }

    /// All product–aspect links in insertion order.
    pub fn product_aspect_links(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.pairs
            .iter()
            .copied()
            .filter(|&(a, _)| self.nodes[a.0].kind == NodeKind::Product)
    }

    pub fn nodes_of_kind(&self, kind: NodeKind) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().filter(move |n| n.kind == kind).map(|n| n.id)
    }

    pub fn count_kind(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    pub fn count_edge_kind(&self, kind: HyperedgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    /// Number of distinct node kinds plus distinct hyperedge kinds present.
    pub fn type_count(&self) -> usize {
        let tv: HashSet<_> = self.nodes.iter().map(|n| n.kind).collect();
        let te: HashSet<_> = self.edges.iter().map(|e| e.kind).collect();
        tv.len() + te.len()
    }

    /// Heterogeneity requirement: node and hyperedge type counts exceed two.
    pub fn is_heterogeneous(&self) -> bool {
        self.type_count() > 2
    }

    /// Rebuilds the graph keeping only nodes with `keep[v]`, removing the
    /// product–aspect memberships in `dropped_links` from `ProductAspects`
    /// hyperedges and the pairwise list. Hyperedges that end up with fewer
    /// than two members, or that no longer satisfy their kind's membership
    /// rule, are discarded. Returns the new graph and the old→new id map.
    pub fn retain(
        &self,
        keep: &[bool],
        dropped_links: &HashSet<(NodeId, NodeId)>,
    ) -> (Hypergraph, Vec<Option<NodeId>>) {
        assert_eq!(keep.len(), self.nodes.len(), "keep mask length");
        let mut b = HypergraphBuilder::new();
        let mut remap = vec![None; self.nodes.len()];
        for n in &self.nodes {
            if keep[n.id.0] {
                let id = b
                    .add_node(n.kind, n.key.clone(), n.text.clone())
                    .expect("keys are unique in the source graph");
                remap[n.id.0] = Some(id);
            }
        }
        for e in &self.edges {
            let product = match e.kind {
                HyperedgeKind::ProductAspects => e.members.iter().copied().find(|&m| self.kind(m) == NodeKind::Product),
                _ => None,
            };
            let members: Vec<NodeId> = e
                .members
                .iter()
                .filter(|&&m| match product {
                    Some(p) if m != p => !dropped_links.contains(&(p, m)),
                    _ => true,
                })
                .filter_map(|&m| remap[m.0])
                .collect();
            if members.len() < 2 {
                continue;
            }
            // Invalid after purging (e.g. a bundle that lost its last product).
            let _ = b.add_hyperedge(e.kind, members, e.weight);
        }
        for &(x, y) in &self.pairs {
            if dropped_links.contains(&(x, y)) {
                continue;
            }
            if let (Some(nx), Some(ny)) = (remap[x.0], remap[y.0]) {
                b.add_pair(nx, ny).expect("pair kinds are preserved");
            }
        }
        (b.build(), remap)
    }
}

/// Compressed sparse row matrix of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(column, value)` lists. Columns need not be sorted;
    /// duplicates are summed.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        let n = rows.len();
        for mut row in rows {
            // Stable, so duplicates are summed in insertion order.
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                assert!(c < cols, "column {c} out of range {cols}");
                if indices.len() > indptr[indptr.len() - 1] && indices.last() == Some(&c) {
                    *values.last_mut().expect("parallel to indices") += v;
                } else {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self { rows: n, cols, indptr, indices, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(i) => self.values[span.start + i],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.cols]; self.rows];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] = v;
            }
        }
        out
    }
}

/// Node×hyperedge incidence matrix together with the hyperedges its columns stand for.
#[derive(Clone, Debug)]
pub struct Incidence {
    pub matrix: CsrMatrix,
    pub columns: Vec<EdgeId>,
}

impl Incidence {
    /// Hyperedge weights in column order.
    pub fn weights(&self, g: &Hypergraph) -> Vec<f64> {
        self.columns.iter().map(|&e| g.edge(e).weight).collect()
    }
}

/// Binary incidence matrix `H(v, e) = 1` iff `v ∈ e`, optionally restricted to one hyperedge kind.
pub fn incidence_matrix(g: &Hypergraph, kind_filter: Option<HyperedgeKind>) -> Incidence {
    let columns: Vec<EdgeId> = g
        .edges()
        .iter()
        .filter(|e| kind_filter.is_none_or(|k| e.kind == k))
        .map(|e| e.id)
        .collect();
    let mut col_of = vec![usize::MAX; g.num_edges()];
    for (c, e) in columns.iter().enumerate() {
        col_of[e.0] = c;
    }
    let rows = (0..g.num_nodes())
        .map(|v| {
            g.incident_edges(NodeId(v))
                .iter()
                .filter(|e| col_of[e.0] != usize::MAX)
                .map(|e| (col_of[e.0], 1.0))
                .collect()
        })
        .collect();
    Incidence { matrix: CsrMatrix::from_rows(columns.len(), rows), columns }
}

/// Diagonals of the node degree matrix (weighted) and hyperedge degree matrix (cardinality).
pub fn degree_matrices(h: &CsrMatrix, weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(weights.len(), h.cols(), "one weight per incidence column");
    let mut dv = vec![0.0; h.rows()];
    let mut de = vec![0.0; h.cols()];
    for (v, d) in dv.iter_mut().enumerate() {
        for (e, x) in h.row(v) {
            *d += weights[e] * x;
            de[e] += x;
        }
    }
    (dv, de)
}

/// `A = Dv^{-1/2} H W De^{-1} Hᵀ Dv^{-1/2}`, with zero rows and columns for
/// isolated nodes.
pub fn normalized_adjacency(g: &Hypergraph, kind_filter: Option<HyperedgeKind>) -> CsrMatrix {
    let inc = incidence_matrix(g, kind_filter);
    let weights = inc.weights(g);
    let (dv, de) = degree_matrices(&inc.matrix, &weights);
    let inv_sqrt: Vec<f64> = dv.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); g.num_nodes()];
    for (col, &eid) in inc.columns.iter().enumerate() {
        let members = &g.edge(eid).members;
        let c = weights[col] / de[col];
        for &u in members {
            for &v in members {
                // Product of the two scalings first keeps A exactly symmetric.
                let s = inv_sqrt[u.0] * inv_sqrt[v.0];
                rows[u.0].push((v.0, c * s));
            }
        }
    }
    CsrMatrix::from_rows(g.num_nodes(), rows)
}

/// All nodes of a graph, but only the hyperedges of one kind.
#[derive(Clone, Debug)]
pub struct ChannelView<'g> {
    graph: &'g Hypergraph,
    kind: HyperedgeKind,
    edges: Vec<EdgeId>,
}

pub fn subgraph_channel(g: &Hypergraph, kind: HyperedgeKind) -> ChannelView<'_> {
    let edges = g.edges().iter().filter(|e| e.kind == kind).map(|e| e.id).collect();
    ChannelView { graph: g, kind, edges }
}

impl<'g> ChannelView<'g> {
    pub fn graph(&self) -> &'g Hypergraph {
        self.graph
    }

    pub fn kind(&self) -> HyperedgeKind {
        self.kind
    }

    pub fn edges(&self) -> &[EdgeId] {
        &self.edges
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn incidence_matrix(&self) -> Incidence {
        incidence_matrix(self.graph, Some(self.kind))
    }

    pub fn incident_edges(&self, v: NodeId) -> impl Iterator<Item = EdgeId> + '_ {
        self.graph
            .incident_edges(v)
            .iter()
            .copied()
            .filter(|&e| self.graph.edge(e).kind == self.kind)
    }
}
