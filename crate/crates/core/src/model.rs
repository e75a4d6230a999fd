//! Attention-based hypergraph link scorer.
//!
//! Pipeline: per-kind feature projection, per-channel node→edge and
//! edge→node attention rounds, channel fusion, mean-aggregation GNN layers
//! over the pairwise edges, and cosine scoring mapped to a probability.

use std::collections::{BTreeMap, HashSet};
use std::rc::Rc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Segments, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{CsrMatrix, HyperedgeKind, Hypergraph, NodeId, NodeKind};
use crate::ingest::FeatureStore;
use crate::split::CandidateLink;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    /// Message-passing rounds per channel.
    pub hyper_layers: usize,
    pub gnn_layers: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
    /// Members sampled per hyperedge during training; `None` keeps all.
    pub neighbor_cap: Option<usize>,
    /// Start every kind's projection from the same draw, so initial
    /// cross-kind cosines follow feature cosines.
    pub tied_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 768,
            heads: 8,
            hyper_layers: 1,
            gnn_layers: 2,
            leaky_slope: 0.2,
            dropout: 0.5,
            neighbor_cap: Some(20),
            tied_init: true,
        }
    }
}

impl ModelConfig {
    /// Defaults at desk scale: width 16 with 4 heads.
    pub fn toy() -> Self {
        Self { dim: 16, heads: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.hyper_layers == 0 || self.gnn_layers == 0 {
            return bad("dim, heads, hyper_layers and gnn_layers must all be at least 1".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if !(self.leaky_slope > 0.0) {
            return bad(format!("leaky_slope must be positive, got {}", self.leaky_slope));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.neighbor_cap == Some(0) {
            return bad("neighbor_cap must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Channel mixing weights. Products mix all four channels, aspects the
/// product–aspect and category channels, categories use the category channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { alpha: 0.25, beta: 0.25, gamma: 0.5, delta: 0.5 }
    }
}

const SIMPLEX_TOL: f64 = 1e-12;

impl FusionWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64, delta: f64) -> Result<Self> {
        let fw = Self { alpha, beta, gamma, delta };
        fw.validate()?;
        Ok(fw)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let ok = self.alpha >= 0.0
            && self.beta >= 0.0
            && self.alpha + self.beta <= 1.0 + SIMPLEX_TOL
            && unit(self.gamma)
            && unit(self.delta);
        if ok {
            Ok(())
        } else {
            Err(Error::Fusion(format!("invalid fusion weights {self:?}")))
        }
    }

    /// Per-channel coefficients for a node of `kind`, indexed by
    /// [`HyperedgeKind::index`].
    pub fn coefficients(&self, kind: NodeKind) -> [f64; 4] {
        let rest = 1.0 - self.alpha - self.beta;
        match kind {
            NodeKind::Product => [rest * self.gamma, rest * (1.0 - self.gamma), self.alpha, self.beta],
            NodeKind::Aspect => [0.0, 0.0, self.delta, 1.0 - self.delta],
            NodeKind::Category => [0.0, 0.0, 0.0, 1.0],
        }
    }

    /// Every valid tuple whose coordinates are multiples of `resolution`.
    pub fn grid(resolution: f64) -> Result<Vec<Self>> {
        let n = (1.0 / resolution).round();
        if !(resolution > 0.0 && resolution <= 1.0) || (n * resolution - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("fusion resolution must be 1/n for a positive integer n, got {resolution}")));
        }
        let n = n as usize;
        let v = |i: usize| i as f64 / n as f64;
        let mut out = Vec::new();
        for a in 0..=n {
            for b in 0..=n - a {
                for g in 0..=n {
                    for d in 0..=n {
                        out.push(Self { alpha: v(a), beta: v(b), gamma: v(g), delta: v(d) });
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Applies the fusion rule to plain per-channel vectors of one node.
pub fn fuse_vectors(channels: [&[f64]; 4], kind: NodeKind, fw: &FusionWeights) -> Vec<f64> {
    let c = fw.coefficients(kind);
    (0..channels[0].len()).map(|j| (0..4).map(|k| c[k] * channels[k][j]).sum()).collect()
}

/// Indices of parameter blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    hyper_layers: usize,
    heads: usize,
    gnn_layers: usize,
}

/// Slots of a head block.
pub const NODE_TRANSFORM: usize = 0;
pub const NODE_ATTENTION: usize = 1;
pub const EDGE_TRANSFORM: usize = 2;
pub const EDGE_ATTENTION_SELF: usize = 3;
pub const EDGE_ATTENTION_EDGE: usize = 4;
const HEAD_BLOCKS: usize = 5;
const HEAD_BLOCK_NAMES: [&str; HEAD_BLOCKS] =
    ["node_transform", "node_attention", "edge_transform", "edge_attention_self", "edge_attention_edge"];

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self { hyper_layers: cfg.hyper_layers, heads: cfg.heads, gnn_layers: cfg.gnn_layers }
    }

    pub fn proj_weight(&self, kind: NodeKind) -> usize {
        kind as usize * 2
    }

    pub fn proj_bias(&self, kind: NodeKind) -> usize {
        kind as usize * 2 + 1
    }

    pub fn head(&self, channel: HyperedgeKind, layer: usize, head: usize) -> usize {
        6 + ((channel.index() * self.hyper_layers + layer) * self.heads + head) * HEAD_BLOCKS
    }

    pub fn gnn(&self, layer: usize) -> usize {
        6 + 4 * self.hyper_layers * self.heads * HEAD_BLOCKS + layer
    }

    pub fn len(&self) -> usize {
        self.gnn(self.gnn_layers)
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub blocks: Vec<ParamBlock>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let lim = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-lim..lim)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

impl ModelParams {
    /// Glorot-uniform weights and zero biases from a seeded generator.
    pub fn init(config: &ModelConfig, input_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        let (d, dh) = (config.dim, config.head_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        let shared = glorot(&mut rng, input_dim, d);
        for kind in NodeKind::ALL {
            let w = if config.tied_init { shared.clone() } else { glorot(&mut rng, input_dim, d) };
            blocks.push(ParamBlock { name: format!("proj.{}.weight", kind.as_str()), value: w });
            blocks.push(ParamBlock { name: format!("proj.{}.bias", kind.as_str()), value: Tensor::zeros(1, d) });
        }
        for channel in HyperedgeKind::ALL {
            for l in 0..config.hyper_layers {
                for h in 0..config.heads {
                    let shapes = [(d, dh), (dh, 1), (d, dh), (dh, 1), (dh, 1)];
                    for (slot, (r, c)) in shapes.into_iter().enumerate() {
                        blocks.push(ParamBlock {
                            name: format!("{}.layer{l}.head{h}.{}", channel.as_str(), HEAD_BLOCK_NAMES[slot]),
                            value: glorot(&mut rng, r, c),
                        });
                    }
                }
            }
        }
        for l in 0..config.gnn_layers {
            blocks.push(ParamBlock { name: format!("gnn.layer{l}.weight"), value: glorot(&mut rng, d, d) });
        }
        debug_assert_eq!(blocks.len(), Layout::new(config).len());
        Ok(Self { config: config.clone(), input_dim, blocks })
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.blocks.iter().map(|b| &b.value)
    }

    /// Registers every block on `tape`, as differentiable parameters or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| if trainable { tape.param(i, &b.value) } else { tape.constant(b.value.clone()) })
            .collect();
        ParamVars { vars, layout: self.layout() }
    }

    /// FNV-1a over the bit patterns of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for t in self.tensors() {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors().map(|t| t.norm().powi(2)).sum::<f64>().sqrt()
    }
}

/// Parameter blocks as tape variables.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
    layout: Layout,
}

impl ParamVars {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }
}

/// Feature rows grouped by node kind, plus the permutation back to node order.
#[derive(Clone, Debug)]
pub struct NodeInputs {
    blocks: Vec<(NodeKind, Tensor)>,
    order: Rc<Vec<usize>>,
    dim: usize,
}

impl NodeInputs {
    pub fn new(g: &Hypergraph, features: &FeatureStore) -> Result<Self> {
        let dim = features.dim();
        let mut blocks = Vec::new();
        let mut order = vec![0; g.num_nodes()];
        let mut offset = 0;
        for kind in NodeKind::ALL {
            let ids: Vec<NodeId> = g.nodes_of_kind(kind).collect();
            if ids.is_empty() {
                continue;
            }
            let mut data = Vec::with_capacity(ids.len() * dim);
            for (r, &v) in ids.iter().enumerate() {
                let key = g.key(v);
                let f = features.get(key).ok_or_else(|| Error::MissingFeature(key.to_string()))?;
                data.extend_from_slice(f);
                order[v.0] = offset + r;
            }
            offset += ids.len();
            blocks.push((kind, Tensor::from_vec(ids.len(), dim, data)?));
        }
        Ok(Self { blocks, order: Rc::new(order), dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Product–aspect links to hide from message passing.
pub type LinkMask = HashSet<(NodeId, NodeId)>;

/// Precomputed index structure of one channel.
#[derive(Clone, Debug)]
pub struct ChannelPlan {
    pub kind: HyperedgeKind,
    /// Per channel edge, the (possibly capped) member rows.
    pub members: Rc<Segments>,
    member_rows: Rc<Vec<usize>>,
    /// Per node, the local indices of its incident channel edges.
    pub incident: Rc<Segments>,
    incident_nodes: Rc<Vec<usize>>,
    keep: Rc<Vec<f64>>,
    pass: Rc<Vec<f64>>,
}

impl ChannelPlan {
    pub fn num_edges(&self) -> usize {
        self.members.len()
    }
}

/// Everything message passing needs besides features and parameters.
#[derive(Clone, Debug)]
pub struct Structure {
    kinds: Vec<NodeKind>,
    pub channels: Vec<ChannelPlan>,
    /// Row-normalized (neighbors ∪ self) mean over the pairwise edges.
    pub mean_adjacency: Rc<CsrMatrix>,
}

impl Structure {
    /// Builds the index structure with `mask` hidden. With `cap`, edges
    /// larger than the cap feed only a uniform sample of members into
    /// node→edge aggregation.
    pub fn new(g: &Hypergraph, mask: &LinkMask, mut cap: Option<(usize, &mut ChaCha8Rng)>) -> Self {
        let n = g.num_nodes();
        let kinds: Vec<NodeKind> = g.nodes().iter().map(|v| v.kind).collect();
        let mut full: Vec<Vec<Vec<usize>>> = vec![Vec::new(); 4];
        for e in g.edges() {
            let members: Vec<usize> = if e.kind == HyperedgeKind::ProductAspects && !mask.is_empty() {
                let p = e.members.iter().copied().find(|&m| kinds[m.0] == NodeKind::Product).expect("product member");
                e.members.iter().filter(|&&m| m == p || !mask.contains(&(p, m))).map(|m| m.0).collect()
            } else {
                e.members.iter().map(|m| m.0).collect()
            };
            if members.len() < 2 && members.len() < e.members.len() {
                continue;
            }
            full[e.kind.index()].push(members);
        }
        let channels = HyperedgeKind::ALL
            .iter()
            .map(|&kind| {
                let edges = &full[kind.index()];
                let sampled: Vec<Vec<usize>> = edges
                    .iter()
                    .map(|m| match cap.as_mut() {
                        Some((c, rng)) if m.len() > *c => {
                            let mut pick: Vec<usize> = index::sample(*rng, m.len(), *c).into_iter().collect();
                            pick.sort_unstable();
                            pick.into_iter().map(|i| m[i]).collect()
                        }
                        _ => m.clone(),
                    })
                    .collect();
                let members = Segments::from_groups(sampled);
                let mut incident = vec![Vec::new(); n];
                for (j, m) in edges.iter().enumerate() {
                    for &v in m {
                        incident[v].push(j);
                    }
                }
                let keep: Vec<f64> = incident.iter().map(|i| if i.is_empty() { 0.0 } else { 1.0 }).collect();
                let incident_nodes: Vec<usize> =
                    incident.iter().enumerate().flat_map(|(v, es)| std::iter::repeat_n(v, es.len())).collect();
                ChannelPlan {
                    kind,
                    member_rows: Rc::new(members.index().to_vec()),
                    members: Rc::new(members),
                    incident: Rc::new(Segments::from_groups(incident)),
                    incident_nodes: Rc::new(incident_nodes),
                    pass: Rc::new(keep.iter().map(|k| 1.0 - k).collect()),
                    keep: Rc::new(keep),
                }
            })
            .collect();

        let mut neighbors: Vec<Vec<usize>> = (0..n).map(|v| vec![v]).collect();
        for &(x, y) in g.pairs() {
            if mask.contains(&(x, y)) {
                continue;
            }
            neighbors[x.0].push(y.0);
            neighbors[y.0].push(x.0);
        }
        let rows = neighbors
            .into_iter()
            .map(|ns| {
                let w = 1.0 / ns.len() as f64;
                ns.into_iter().map(|u| (u, w)).collect()
            })
            .collect();
        Self { kinds, channels, mean_adjacency: Rc::new(CsrMatrix::from_rows(n, rows)) }
    }

    pub fn num_nodes(&self) -> usize {
        self.kinds.len()
    }

    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }

    pub fn channel(&self, kind: HyperedgeKind) -> &ChannelPlan {
        &self.channels[kind.index()]
    }
}

/// Output of an attention stage with the per-head attention columns.
#[derive(Clone, Debug)]
pub struct Attended {
    pub out: Var,
    pub attention: Vec<Var>,
}

/// `tanh(f · W_kind + b_kind)` for every node, in node order.
pub fn init_embeddings(tape: &mut Tape, pv: &ParamVars, inputs: &NodeInputs) -> Result<Var> {
    let mut parts = Vec::with_capacity(inputs.blocks.len());
    for (kind, feats) in &inputs.blocks {
        let f = tape.constant(feats.clone());
        let z = tape.matmul(f, pv.var(pv.layout.proj_weight(*kind)))?;
        let z = tape.add(z, pv.var(pv.layout.proj_bias(*kind)))?;
        parts.push(tape.tanh(z)?);
    }
    let stacked = match parts.as_slice() {
        [one] => *one,
        _ => tape.concat(&parts, Axis::Rows)?,
    };
    tape.gather_rows(stacked, inputs.order.clone())
}

fn concat_heads(tape: &mut Tape, heads: Vec<Var>) -> Result<Var> {
    match heads.as_slice() {
        [one] => Ok(*one),
        _ => tape.concat(&heads, Axis::Cols),
    }
}

/// Hyperedge embeddings: per head, attention over members from their
/// transformed embeddings, then ELU of the attention-weighted sum.
pub fn node_to_edge(tape: &mut Tape, pv: &ParamVars, cfg: &ModelConfig, plan: &ChannelPlan, h: Var, layer: usize) -> Result<Attended> {
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let base = pv.layout.head(plan.kind, layer, head);
        let x = tape.matmul(h, pv.var(base + NODE_TRANSFORM))?;
        let s = tape.matmul(x, pv.var(base + NODE_ATTENTION))?;
        let s = tape.gather_rows(s, plan.member_rows.clone())?;
        let s = tape.leaky_relu(s, cfg.leaky_slope)?;
        let a = tape.segment_softmax(s, plan.members.clone())?;
        let e = tape.segment_weighted_sum(a, x, plan.members.clone())?;
        heads.push(tape.elu(e)?);
        attention.push(a);
    }
    Ok(Attended { out: concat_heads(tape, heads)?, attention })
}

/// Node update: per head, attention over incident hyperedges conditioned on
/// both the node and the edge, then ELU of the weighted edge sum. Nodes
/// without an incident edge keep `h_v`.
pub fn edge_to_node(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    plan: &ChannelPlan,
    h_v: Var,
    h_e: Var,
    layer: usize,
) -> Result<Attended> {
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let base = pv.layout.head(plan.kind, layer, head);
        let u = pv.var(base + EDGE_TRANSFORM);
        let y = tape.matmul(h_v, u)?;
        let z = tape.matmul(h_e, u)?;
        let sy = tape.matmul(y, pv.var(base + EDGE_ATTENTION_SELF))?;
        let sz = tape.matmul(z, pv.var(base + EDGE_ATTENTION_EDGE))?;
        let sy = tape.gather_rows(sy, plan.incident_nodes.clone())?;
        let sz = tape.gather_rows(sz, Rc::new(plan.incident.index().to_vec()))?;
        let s = tape.add(sy, sz)?;
        let s = tape.leaky_relu(s, cfg.leaky_slope)?;
        let a = tape.segment_softmax(s, plan.incident.clone())?;
        let out = tape.segment_weighted_sum(a, z, plan.incident.clone())?;
        heads.push(tape.elu(out)?);
        attention.push(a);
    }
    let updated = concat_heads(tape, heads)?;
    let updated = tape.scale_rows(updated, plan.keep.clone())?;
    let kept = tape.scale_rows(h_v, plan.pass.clone())?;
    Ok(Attended { out: tape.add(updated, kept)?, attention })
}

/// All message-passing rounds of one channel. Empty channels return `h0`.
pub fn channel_pass(tape: &mut Tape, pv: &ParamVars, cfg: &ModelConfig, plan: &ChannelPlan, h0: Var) -> Result<Var> {
    if plan.num_edges() == 0 {
        return Ok(h0);
    }
    let mut h = h0;
    for layer in 0..cfg.hyper_layers {
        let e = node_to_edge(tape, pv, cfg, plan, h, layer)?;
        h = edge_to_node(tape, pv, cfg, plan, h, e.out, layer)?.out;
    }
    Ok(h)
}

/// Per-node convex mix of the four channel embeddings (indexed by
/// [`HyperedgeKind::index`]).
pub fn fuse(tape: &mut Tape, channels: &[Var; 4], kinds: &[NodeKind], fw: &FusionWeights) -> Result<Var> {
    fw.validate()?;
    let coeffs: Vec<[f64; 4]> = kinds.iter().map(|&k| fw.coefficients(k)).collect();
    let mut acc: Option<Var> = None;
    for (c, &ch) in channels.iter().enumerate() {
        let col: Vec<f64> = coeffs.iter().map(|k| k[c]).collect();
        if col.iter().all(|&x| x == 0.0) {
            continue;
        }
        let term = tape.scale_rows(ch, Rc::new(col))?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::Fusion("no channel carries weight".into()))
}

/// `L` rounds of `h ← ELU(mean(h_neighbors ∪ h_self) · W_l)`.
pub fn final_gnn(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    structure: &Structure,
    h: Var,
    dropout: &mut DropoutSeeds,
) -> Result<Var> {
    let mut h = h;
    for l in 0..cfg.gnn_layers {
        let x = dropout.apply(tape, h, cfg.dropout)?;
        let m = tape.spmm(structure.mean_adjacency.clone(), x)?;
        let z = tape.matmul(m, pv.var(pv.layout.gnn(l)))?;
        h = tape.elu(z)?;
    }
    Ok(h)
}

/// Cosine of each candidate's final embeddings, mapped to `(s + 1) / 2`.
pub fn score_candidates(tape: &mut Tape, h: Var, links: &[CandidateLink]) -> Result<Var> {
    let ps = Rc::new(links.iter().map(|l| l.product.0).collect());
    let asp = Rc::new(links.iter().map(|l| l.aspect.0).collect());
    let hp = tape.gather_rows(h, ps)?;
    let ha = tape.gather_rows(h, asp)?;
    let c = tape.cosine(hp, ha)?;
    tape.affine(c, 0.5, 0.5)
}

/// Cosine similarity of two vectors.
pub fn score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch { expected: a.len(), found: b.len() });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean binary cross-entropy of probabilities against labels, on the tape.
pub fn loss(tape: &mut Tape, probs: Var, links: &[CandidateLink]) -> Result<Var> {
    let y: Vec<f64> = links.iter().map(|l| l.label.value()).collect();
    tape.bce(probs, &y)
}

/// Dropout mask seeds; `None` disables dropout.
#[derive(Clone, Debug)]
pub struct DropoutSeeds {
    seed: Option<u64>,
    counter: u64,
}

impl DropoutSeeds {
    pub fn off() -> Self {
        Self { seed: None, counter: 0 }
    }

    pub fn on(seed: u64) -> Self {
        Self { seed: Some(seed), counter: 0 }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        match self.seed {
            Some(s) if p > 0.0 => {
                self.counter += 1;
                tape.dropout(x, p, splitmix(s ^ splitmix(self.counter)))
            }
            _ => Ok(x),
        }
    }
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Initial embedding (with dropout) followed by every channel pass.
pub fn channel_embeddings(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    structure: &Structure,
    inputs: &NodeInputs,
    dropout: &mut DropoutSeeds,
) -> Result<[Var; 4]> {
    let h0 = init_embeddings(tape, pv, inputs)?;
    let h0 = dropout.apply(tape, h0, cfg.dropout)?;
    let mut out = [h0; 4];
    for plan in &structure.channels {
        out[plan.kind.index()] = channel_pass(tape, pv, cfg, plan, h0)?;
    }
    Ok(out)
}

/// Full forward pass to candidate probabilities (`m×1`).
pub fn forward(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    structure: &Structure,
    inputs: &NodeInputs,
    fw: &FusionWeights,
    links: &[CandidateLink],
    dropout: &mut DropoutSeeds,
) -> Result<Var> {
    let channels = channel_embeddings(tape, pv, cfg, structure, inputs, dropout)?;
    let fused = fuse(tape, &channels, structure.kinds(), fw)?;
    let h = final_gnn(tape, pv, cfg, structure, fused, dropout)?;
    score_candidates(tape, h, links)
}

/// Frozen-parameter probabilities for `links` on graph `g` with `mask`
/// hidden. Works unchanged for graphs holding nodes never seen in training.
pub fn predict(
    params: &ModelParams,
    g: &Hypergraph,
    features: &FeatureStore,
    fw: &FusionWeights,
    links: &[CandidateLink],
    mask: &LinkMask,
) -> Result<Vec<f64>> {
    let inputs = NodeInputs::new(g, features)?;
    let structure = Structure::new(g, mask, None);
    predict_with(params, &structure, &inputs, fw, links)
}

pub fn predict_with(
    params: &ModelParams,
    structure: &Structure,
    inputs: &NodeInputs,
    fw: &FusionWeights,
    links: &[CandidateLink],
) -> Result<Vec<f64>> {
    check_inputs(params, inputs)?;
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let p = forward(&mut tape, &pv, &params.config, structure, inputs, fw, links, &mut DropoutSeeds::off())?;
    Ok(tape.value(p).data().to_vec())
}

pub(crate) fn check_inputs(params: &ModelParams, inputs: &NodeInputs) -> Result<()> {
    if inputs.dim() != params.input_dim {
        return Err(Error::DimMismatch { expected: params.input_dim, found: inputs.dim() });
    }
    Ok(())
}

/// Every product link of each aspect in `aspects`.
pub fn aspect_mask(g: &Hypergraph, aspects: &HashSet<NodeId>) -> LinkMask {
    g.product_aspect_links().filter(|(_, a)| aspects.contains(a)).collect()
}

/// Candidate indices grouped so each group is scored with all links of its
/// aspect hidden. Aspects without links share one group and one pass.
fn withheld_groups(g: &Hypergraph, links: &[CandidateLink]) -> Vec<(LinkMask, Vec<usize>)> {
    let mut by_aspect: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
    for (i, l) in links.iter().enumerate() {
        by_aspect.entry(l.aspect).or_default().push(i);
    }
    let mut unlinked = Vec::new();
    let mut groups = Vec::new();
    for (a, idx) in by_aspect {
        let mask = aspect_mask(g, &HashSet::from([a]));
        if mask.is_empty() {
            unlinked.extend(idx);
        } else {
            groups.push((mask, idx));
        }
    }
    if !unlinked.is_empty() {
        unlinked.sort_unstable();
        groups.insert(0, (LinkMask::new(), unlinked));
    }
    groups
}

/// Precomputed inputs for aspect-withheld scoring of a fixed candidate set.
#[derive(Clone, Debug)]
pub struct WithheldPlan {
    inputs: NodeInputs,
    groups: Vec<(Structure, Vec<CandidateLink>, Vec<usize>)>,
    len: usize,
}

impl WithheldPlan {
    pub fn new(g: &Hypergraph, features: &FeatureStore, links: &[CandidateLink]) -> Result<Self> {
        let inputs = NodeInputs::new(g, features)?;
        let groups = withheld_groups(g, links)
            .into_iter()
            .map(|(mask, idx)| (Structure::new(g, &mask, None), idx.iter().map(|&i| links[i]).collect(), idx))
            .collect();
        Ok(Self { inputs, groups, len: links.len() })
    }

    /// Probabilities in candidate order.
    pub fn probabilities(&self, params: &ModelParams, fw: &FusionWeights) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len];
        for (structure, links, idx) in &self.groups {
            let p = predict_with(params, structure, &self.inputs, fw, links)?;
            for (&i, v) in idx.iter().zip(p) {
                out[i] = v;
            }
        }
        Ok(out)
    }
}

/// Frozen-parameter probabilities where each candidate is scored with every
/// link of its aspect hidden, so seen and unseen aspects are encoded alike.
pub fn predict_withheld(
    params: &ModelParams,
    g: &Hypergraph,
    features: &FeatureStore,
    fw: &FusionWeights,
    links: &[CandidateLink],
) -> Result<Vec<f64>> {
    WithheldPlan::new(g, features, links)?.probabilities(params, fw)
}

/// Channel embeddings computed once, so fusion weights can be varied cheaply.
#[derive(Clone, Debug)]
pub struct ChannelCache {
    channels: [Tensor; 4],
    structure: Structure,
}

impl ChannelCache {
    pub fn new(params: &ModelParams, g: &Hypergraph, features: &FeatureStore, mask: &LinkMask) -> Result<Self> {
        let inputs = NodeInputs::new(g, features)?;
        Self::with_inputs(params, Structure::new(g, mask, None), &inputs)
    }

    fn with_inputs(params: &ModelParams, structure: Structure, inputs: &NodeInputs) -> Result<Self> {
        check_inputs(params, inputs)?;
        let mut tape = Tape::new();
        let pv = params.register(&mut tape, false);
        let ch = channel_embeddings(&mut tape, &pv, &params.config, &structure, inputs, &mut DropoutSeeds::off())?;
        let channels = ch.map(|v| tape.value(v).clone());
        Ok(Self { channels, structure })
    }

    pub fn channel(&self, kind: HyperedgeKind) -> &Tensor {
        &self.channels[kind.index()]
    }

    /// Final embeddings under `fw`.
    pub fn embeddings(&self, params: &ModelParams, fw: &FusionWeights) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = params.register(&mut tape, false);
        let ch = self.channels.clone().map(|t| tape.constant(t));
        let fused = fuse(&mut tape, &ch, self.structure.kinds(), fw)?;
        let h = final_gnn(&mut tape, &pv, &params.config, &self.structure, fused, &mut DropoutSeeds::off())?;
        Ok(tape.value(h).clone())
    }

    pub fn probabilities(&self, params: &ModelParams, fw: &FusionWeights, links: &[CandidateLink]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let h = tape.constant(self.embeddings(params, fw)?);
        let p = score_candidates(&mut tape, h, links)?;
        Ok(tape.value(p).data().to_vec())
    }
}

/// Aspect-withheld channel caches for a fixed candidate set.
#[derive(Clone, Debug)]
pub struct WithheldCache {
    groups: Vec<(ChannelCache, Vec<CandidateLink>, Vec<usize>)>,
    len: usize,
}

impl WithheldCache {
    pub fn new(params: &ModelParams, g: &Hypergraph, features: &FeatureStore, links: &[CandidateLink]) -> Result<Self> {
        let inputs = NodeInputs::new(g, features)?;
        let groups = withheld_groups(g, links)
            .into_iter()
            .map(|(mask, idx)| {
                let cache = ChannelCache::with_inputs(params, Structure::new(g, &mask, None), &inputs)?;
                Ok((cache, idx.iter().map(|&i| links[i]).collect(), idx))
            })
            .collect::<Result<_>>()?;
        Ok(Self { groups, len: links.len() })
    }

    pub fn probabilities(&self, params: &ModelParams, fw: &FusionWeights) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len];
        for (cache, links, idx) in &self.groups {
            for (&i, v) in idx.iter().zip(cache.probabilities(params, fw, links)?) {
                out[i] = v;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{gradients_match, numeric_gradient};
    use crate::graph::HypergraphBuilder;
    use crate::split::LinkLabel;

    /// 1 category, 3 products, 4 aspects, all four channels present.
    fn toy() -> Hypergraph {
        let mut b = HypergraphBuilder::new();
        let c = b.add_node(NodeKind::Category, "c", "").unwrap();
        let p: Vec<_> = (0..3).map(|i| b.add_node(NodeKind::Product, format!("p{i}"), "").unwrap()).collect();
        let a: Vec<_> = (0..4).map(|i| b.add_node(NodeKind::Aspect, format!("a{i}"), "").unwrap()).collect();
        let links = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 3)];
        for pi in 0..3 {
            let mut m = vec![p[pi]];
            m.extend(links.iter().filter(|l| l.0 == pi).map(|l| a[l.1]));
            b.add_hyperedge(HyperedgeKind::ProductAspects, m, 1.0).unwrap();
        }
        for &(pi, ai) in &links {
            b.add_pair(p[pi], a[ai]).unwrap();
        }
        let mut bundle = vec![c];
        bundle.extend(&p);
        bundle.extend(&a);
        b.add_hyperedge(HyperedgeKind::CategoryBundle, bundle, 1.0).unwrap();
        for &pi in &p {
            b.add_pair(c, pi).unwrap();
        }
        b.add_hyperedge(HyperedgeKind::AlsoView, vec![p[0], p[1], p[2]], 1.0).unwrap();
        b.add_hyperedge(HyperedgeKind::AlsoBuy, vec![p[0], p[2]], 1.0).unwrap();
        b.build()
    }

    fn features(g: &Hypergraph, dim: usize, seed: u64) -> FeatureStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = FeatureStore::new(dim);
        for n in g.nodes() {
            s.insert(n.key.clone(), (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        }
        s
    }

    fn cfg() -> ModelConfig {
        ModelConfig { dim: 4, heads: 2, hyper_layers: 1, gnn_layers: 2, dropout: 0.0, neighbor_cap: None, ..Default::default() }
    }

    fn links(g: &Hypergraph) -> Vec<CandidateLink> {
        let l = |p: &str, a: &str, y| CandidateLink {
            product: g.lookup(p).unwrap(),
            aspect: g.lookup(a).unwrap(),
            label: if y { LinkLabel::Positive } else { LinkLabel::Negative },
        };
        vec![l("p0", "a0", true), l("p0", "a3", false), l("p1", "a2", true), l("p2", "a0", false)]
    }

    fn row(t: &Tensor, r: usize) -> Vec<f64> {
        t.row(r).to_vec()
    }

    fn matvec(x: &[f64], w: &Tensor) -> Vec<f64> {
        (0..w.cols()).map(|j| (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum()).collect()
    }

    fn elu(x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            x.exp_m1()
        }
    }

    fn lrelu(x: f64, s: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            s * x
        }
    }

    fn softmax(x: &[f64]) -> Vec<f64> {
        let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn fusion_grid_count_and_validity() {
        for n in 1..6usize {
            let grid = FusionWeights::grid(1.0 / n as f64).unwrap();
            assert_eq!(grid.len(), (n + 1).pow(3) * (n + 2) / 2);
            assert!(grid.iter().all(|fw| fw.validate().is_ok()));
        }
        assert!(FusionWeights::grid(0.3).is_err());
        assert!(FusionWeights::new(0.7, 0.4, 0.5, 0.5).is_err());
    }

    #[test]
    fn fusion_corners() {
        let chans: [Vec<f64>; 4] = [vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0], vec![4.0, 0.0]];
        let r = [chans[0].as_slice(), &chans[1], &chans[2], &chans[3]];
        let fw = FusionWeights::new(1.0, 0.0, 0.3, 0.0).unwrap();
        assert_eq!(fuse_vectors(r, NodeKind::Product, &fw), chans[2]);
        assert_eq!(fuse_vectors(r, NodeKind::Aspect, &fw), chans[3]);
        assert_eq!(fuse_vectors(r, NodeKind::Category, &fw), chans[3]);
    }

    #[test]
    fn init_embeddings_match_dense() {
        let g = toy();
        let f = features(&g, 3, 1);
        let mut params = ModelParams::init(&cfg(), 3, 5).unwrap();
        for kind in NodeKind::ALL {
            let i = params.layout().proj_bias(kind);
            params.blocks[i].value = Tensor::row_vector(vec![0.1, -0.2, 0.05, 0.3]);
        }
        let inputs = NodeInputs::new(&g, &f).unwrap();
        let mut t = Tape::new();
        let pv = params.register(&mut t, false);
        let h = init_embeddings(&mut t, &pv, &inputs).unwrap();
        let h = t.value(h).clone();
        let l = params.layout();
        for v in g.nodes() {
            let w = &params.blocks[l.proj_weight(v.kind)].value;
            let b = &params.blocks[l.proj_bias(v.kind)].value;
            let z = matvec(f.get(&v.key).unwrap(), w);
            let expect: Vec<f64> = z.iter().zip(b.data()).map(|(z, b)| (z + b).tanh()).collect();
            assert!(close(&row(&h, v.id.0), &expect, 1e-14));
        }
    }

    #[test]
    fn zero_feature_zero_bias_gives_zero() {
        let g = toy();
        let mut f = FeatureStore::new(3);
        for n in g.nodes() {
            f.insert(n.key.clone(), vec![0.0; 3]).unwrap();
        }
        let params = ModelParams::init(&cfg(), 3, 5).unwrap();
        let mut t = Tape::new();
        let pv = params.register(&mut t, false);
        let h = init_embeddings(&mut t, &pv, &NodeInputs::new(&g, &f).unwrap()).unwrap();
        assert!(t.value(h).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn missing_feature_names_key() {
        let g = toy();
        let mut f = features(&g, 3, 1);
        let mut partial = FeatureStore::new(3);
        for (k, v) in f.iter() {
            if k != "a2" {
                partial.insert(k, v.to_vec()).unwrap();
            }
        }
        f = partial;
        match NodeInputs::new(&g, &f) {
            Err(Error::MissingFeature(k)) => assert_eq!(k, "a2"),
            other => panic!("{other:?}"),
        }
    }

    /// Step-by-step dense evaluation of one channel round.
    fn dense_round(params: &ModelParams, cfg: &ModelConfig, g: &Hypergraph, kind: HyperedgeKind, h: &Tensor) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let l = params.layout();
        let dh = cfg.head_dim();
        let edges: Vec<_> = g.edges().iter().filter(|e| e.kind == kind).collect();
        let mut he = vec![Vec::new(); edges.len()];
        for head in 0..cfg.heads {
            let base = l.head(kind, 0, head);
            let t = &params.blocks[base + NODE_TRANSFORM].value;
            let w1 = &params.blocks[base + NODE_ATTENTION].value;
            for (j, e) in edges.iter().enumerate() {
                let xs: Vec<Vec<f64>> = e.members.iter().map(|m| matvec(&row(h, m.0), t)).collect();
                let logits: Vec<f64> = xs.iter().map(|x| lrelu(matvec(x, w1)[0], cfg.leaky_slope)).collect();
                let a = softmax(&logits);
                for k in 0..dh {
                    he[j].push(elu((0..xs.len()).map(|i| a[i] * xs[i][k]).sum()));
                }
            }
        }
        let mut hv = vec![Vec::new(); g.num_nodes()];
        for head in 0..cfg.heads {
            let base = l.head(kind, 0, head);
            let u = &params.blocks[base + EDGE_TRANSFORM].value;
            let wa = &params.blocks[base + EDGE_ATTENTION_SELF].value;
            let wb = &params.blocks[base + EDGE_ATTENTION_EDGE].value;
            for v in 0..g.num_nodes() {
                let inc: Vec<usize> = (0..edges.len()).filter(|&j| edges[j].members.contains(&NodeId(v))).collect();
                if inc.is_empty() {
                    let r = row(h, v);
                    hv[v].extend_from_slice(&r[head * dh..(head + 1) * dh]);
                    continue;
                }
                let y = matvec(&row(h, v), u);
                let zs: Vec<Vec<f64>> = inc.iter().map(|&j| matvec(&he[j], u)).collect();
                let logits: Vec<f64> =
                    zs.iter().map(|z| lrelu(matvec(&y, wa)[0] + matvec(z, wb)[0], cfg.leaky_slope)).collect();
                let a = softmax(&logits);
                for k in 0..dh {
                    hv[v].push(elu((0..zs.len()).map(|i| a[i] * zs[i][k]).sum()));
                }
            }
        }
        (he, hv)
    }

    #[test]
    fn channel_round_matches_dense() {
        let g = toy();
        let c = cfg();
        let f = features(&g, 3, 2);
        let params = ModelParams::init(&c, 3, 9).unwrap();
        let inputs = NodeInputs::new(&g, &f).unwrap();
        let s = Structure::new(&g, &LinkMask::new(), None);
        for kind in HyperedgeKind::ALL {
            let mut t = Tape::new();
            let pv = params.register(&mut t, false);
            let h0 = init_embeddings(&mut t, &pv, &inputs).unwrap();
            let plan = s.channel(kind);
            let e = node_to_edge(&mut t, &pv, &c, plan, h0, 0).unwrap();
            let v = edge_to_node(&mut t, &pv, &c, plan, h0, e.out, 0).unwrap();
            let (he, hv) = dense_round(&params, &c, &g, kind, t.value(h0));
            for (j, want) in he.iter().enumerate() {
                assert!(close(t.value(e.out).row(j), want, 1e-12), "{kind} edge {j}");
            }
            for (i, want) in hv.iter().enumerate() {
                assert!(close(t.value(v.out).row(i), want, 1e-12), "{kind} node {i}");
            }
            for a in e.attention.iter().chain(&v.attention) {
                let _ = t.value(*a);
            }
        }
    }

    #[test]
    fn symmetric_members_get_uniform_attention() {
        let g = toy();
        let c = cfg();
        let mut f = FeatureStore::new(3);
        for n in g.nodes() {
            f.insert(n.key.clone(), vec![0.3, -0.1, 0.7]).unwrap();
        }
        let params = ModelParams::init(&c, 3, 9).unwrap();
        // Same kind shares a projection, so all products embed identically.
        let s = Structure::new(&g, &LinkMask::new(), None);
        let mut t = Tape::new();
        let pv = params.register(&mut t, false);
        let h0 = init_embeddings(&mut t, &pv, &NodeInputs::new(&g, &f).unwrap()).unwrap();
        let e = node_to_edge(&mut t, &pv, &c, s.channel(HyperedgeKind::AlsoView), h0, 0).unwrap();
        for a in &e.attention {
            assert!(t.value(*a).data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn final_gnn_matches_dense() {
        let g = toy();
        let c = cfg();
        let params = ModelParams::init(&c, 3, 4).unwrap();
        let s = Structure::new(&g, &LinkMask::new(), None);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h: Vec<Vec<f64>> = (0..g.num_nodes()).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut t = Tape::new();
        let pv = params.register(&mut t, false);
        let hv = t.constant(Tensor::from_rows(&h).unwrap());
        let out = final_gnn(&mut t, &pv, &c, &s, hv, &mut DropoutSeeds::off()).unwrap();

        let mut nb: Vec<Vec<usize>> = (0..g.num_nodes()).map(|v| vec![v]).collect();
        for &(x, y) in g.pairs() {
            nb[x.0].push(y.0);
            nb[y.0].push(x.0);
        }
        let mut cur = h;
        for l in 0..c.gnn_layers {
            let w = &params.blocks[params.layout().gnn(l)].value;
            cur = (0..cur.len())
                .map(|v| {
                    let mean: Vec<f64> = (0..4).map(|k| nb[v].iter().map(|&u| cur[u][k]).sum::<f64>() / nb[v].len() as f64).collect();
                    matvec(&mean, w).into_iter().map(elu).collect()
                })
                .collect();
        }
        for (v, want) in cur.iter().enumerate() {
            assert!(close(t.value(out).row(v), want, 1e-12));
        }
    }

    #[test]
    fn score_examples() {
        assert!((score(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(score(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((score(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(score(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
        assert!((score(&[3.0, 1.0], &[1.0, 2.0]).unwrap() - score(&[6.0, 2.0], &[0.5, 1.0]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let probs: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..0.99)).collect();
        let ys = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let want = -ys.iter().zip(&probs).map(|(y, p)| y * p.ln() + (1.0 - y) * (1.0 - p).ln()).sum::<f64>() / 6.0;
        let mut t = Tape::new();
        let p = t.constant(Tensor::column_vector(probs));
        let l = t.bce(p, &ys).unwrap();
        assert!((t.value(l).item() - want).abs() < 1e-10);
    }

    #[test]
    fn forward_is_deterministic_without_dropout() {
        let g = toy();
        let f = features(&g, 3, 2);
        let params = ModelParams::init(&cfg(), 3, 9).unwrap();
        let fw = FusionWeights::default();
        let a = predict(&params, &g, &f, &fw, &links(&g), &LinkMask::new()).unwrap();
        let b = predict(&params, &g, &f, &fw, &links(&g), &LinkMask::new()).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn insertion_order_does_not_change_scores() {
        let g = toy();
        let f = features(&g, 3, 2);
        let params = ModelParams::init(&cfg(), 3, 9).unwrap();
        let fw = FusionWeights::default();
        // Rebuild with nodes inserted in reverse order within each kind.
        let mut b = HypergraphBuilder::new();
        let mut order: Vec<&crate::graph::Node> = g.nodes().iter().collect();
        order.reverse();
        for n in &order {
            b.add_node(n.kind, n.key.clone(), n.text.clone()).unwrap();
        }
        let re = |v: NodeId| b.lookup(g.key(v)).unwrap();
        let mut edges = Vec::new();
        for e in g.edges().iter().rev() {
            let mut m: Vec<NodeId> = e.members.iter().map(|&v| re(v)).collect();
            m.reverse();
            edges.push((e.kind, m));
        }
        let pairs: Vec<_> = g.pairs().iter().rev().map(|&(x, y)| (re(x), re(y))).collect();
        for (k, m) in edges {
            b.add_hyperedge(k, m, 1.0).unwrap();
        }
        for (x, y) in pairs {
            b.add_pair(x, y).unwrap();
        }
        let h = b.build();
        let la = links(&g);
        let lb: Vec<CandidateLink> = la
            .iter()
            .map(|l| CandidateLink { product: h.lookup(g.key(l.product)).unwrap(), aspect: h.lookup(g.key(l.aspect)).unwrap(), label: l.label })
            .collect();
        let a = predict(&params, &g, &f, &fw, &la, &LinkMask::new()).unwrap();
        let bb = predict(&params, &h, &f, &fw, &lb, &LinkMask::new()).unwrap();
        assert!(close(&a, &bb, 1e-12), "{a:?} vs {bb:?}");
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let g = toy();
        let c = cfg();
        let f = features(&g, 3, 2);
        let params = ModelParams::init(&c, 3, 13).unwrap();
        let inputs = NodeInputs::new(&g, &f).unwrap();
        let fw = FusionWeights::new(0.3, 0.2, 0.6, 0.4).unwrap();
        let ls = links(&g);
        let mask: LinkMask = ls.iter().filter(|l| l.label.is_positive()).map(|l| (l.product, l.aspect)).collect();
        let s = Structure::new(&g, &mask, None);
        let run = |tensors: &[Tensor]| -> (Tape, Var) {
            let p = ModelParams {
                blocks: params.blocks.iter().zip(tensors).map(|(b, t)| ParamBlock { name: b.name.clone(), value: t.clone() }).collect(),
                ..params.clone()
            };
            let mut t = Tape::new();
            let pv = p.register(&mut t, true);
            let pr = forward(&mut t, &pv, &c, &s, &inputs, &fw, &ls, &mut DropoutSeeds::off()).unwrap();
            let l = loss(&mut t, pr, &ls).unwrap();
            (t, l)
        };
        let base: Vec<Tensor> = params.tensors().cloned().collect();
        let (mut t, l) = run(&base);
        let grads = t.backward(l).unwrap();
        let numeric = numeric_gradient(&mut |xs: &[Tensor]| { let (t, l) = run(xs); t.value(l).item() }, &base, 1e-5);
        for (i, n) in numeric.iter().enumerate() {
            let zero = Tensor::zeros(n.rows(), n.cols());
            let a = grads.get(i).unwrap_or(&zero);
            assert!(gradients_match(a, n, 1e-4), "{}: {:?} vs {:?}", params.blocks[i].name, a, n);
        }
    }

    #[test]
    fn twin_product_scores_match() {
        // Add p3 as an exact copy of p1: same features, same hyperedges and pairs.
        let g = toy();
        let p1 = g.lookup("p1").unwrap();
        let mut rebuilt = HypergraphBuilder::new();
        for n in g.nodes() {
            rebuilt.add_node(n.kind, n.key.clone(), n.text.clone()).unwrap();
        }
        let twin = rebuilt.add_node(NodeKind::Product, "p3", "").unwrap();
        for e in g.edges() {
            let mut m = e.members.clone();
            match e.kind {
                HyperedgeKind::ProductAspects if m.contains(&p1) => {
                    let copy: Vec<NodeId> = m.iter().map(|&v| if v == p1 { twin } else { v }).collect();
                    rebuilt.add_hyperedge(e.kind, copy, e.weight).unwrap();
                }
                _ if m.contains(&p1) => m.push(twin),
                _ => {}
            }
            rebuilt.add_hyperedge(e.kind, m, e.weight).unwrap();
        }
        for &(x, y) in g.pairs() {
            rebuilt.add_pair(x, y).unwrap();
            if x == p1 {
                rebuilt.add_pair(twin, y).unwrap();
            }
            if y == p1 {
                rebuilt.add_pair(x, twin).unwrap();
            }
        }
        let h = rebuilt.build();
        let mut f = features(&g, 3, 2);
        f.insert("p3", f.get("p1").unwrap().to_vec()).unwrap();
        let params = ModelParams::init(&cfg(), 3, 21).unwrap();
        let aspects: Vec<NodeId> = h.nodes_of_kind(NodeKind::Aspect).collect();
        let cands = |p: NodeId| -> Vec<CandidateLink> {
            aspects.iter().map(|&a| CandidateLink { product: p, aspect: a, label: LinkLabel::Negative }).collect()
        };
        let fw = FusionWeights::default();
        let a = predict(&params, &h, &f, &fw, &cands(p1), &LinkMask::new()).unwrap();
        let b = predict(&params, &h, &f, &fw, &cands(twin), &LinkMask::new()).unwrap();
        assert!(close(&a, &b, 1e-6));
    }

    #[test]
    fn prediction_leaves_parameters_untouched() {
        let g = toy();
        let f = features(&g, 3, 2);
        let params = ModelParams::init(&cfg(), 3, 9).unwrap();
        let before = params.clone();
        let fp = params.fingerprint();
        predict(&params, &g, &f, &FusionWeights::default(), &links(&g), &LinkMask::new()).unwrap();
        assert_eq!(params, before);
        assert_eq!(params.fingerprint(), fp);
    }

    #[test]
    fn isolated_aspect_is_scored_from_features() {
        let mut g_b = HypergraphBuilder::from_graph(&toy());
        let lone = g_b.add_node(NodeKind::Aspect, "lone", "").unwrap();
        let g = g_b.build();
        let f = features(&g, 3, 2);
        let params = ModelParams::init(&cfg(), 3, 9).unwrap();
        let p0 = g.lookup("p0").unwrap();
        let l = [CandidateLink { product: p0, aspect: lone, label: LinkLabel::Negative }];
        let s = predict(&params, &g, &f, &FusionWeights::default(), &l, &LinkMask::new()).unwrap();
        assert!(s[0].is_finite());
    }

    #[test]
    fn neighbor_cap_limits_members() {
        let g = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Structure::new(&g, &LinkMask::new(), Some((2, &mut rng)));
        for plan in &s.channels {
            for j in 0..plan.num_edges() {
                assert!(plan.members.group(j).len() <= 2);
            }
        }
        // Incidence for the node update keeps every membership.
        let bundle = s.channel(HyperedgeKind::CategoryBundle);
        assert_eq!(bundle.incident.slots(), g.num_nodes());
    }

    #[test]
    fn mask_hides_links_from_structure() {
        let g = toy();
        let p2 = g.lookup("p2").unwrap();
        let a3 = g.lookup("a3").unwrap();
        let mask: LinkMask = [(p2, a3)].into_iter().collect();
        let s = Structure::new(&g, &mask, None);
        // p2's only aspect edge collapses and is dropped.
        let pa = s.channel(HyperedgeKind::ProductAspects);
        assert_eq!(pa.num_edges(), 2);
        assert!(s.mean_adjacency.row(a3.0).all(|(u, _)| u != p2.0));
    }
}
