//! Versioned text formats for graphs and parameter checkpoints.
//!
//! Reals are stored as the hex bit pattern of the `f64`, so every round
//! trip is exact and every write is byte-reproducible.

use std::io::{BufRead, Write};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::{HyperedgeKind, Hypergraph, HypergraphBuilder, NodeId, NodeKind};
use crate::model::{FusionWeights, ModelConfig, ModelParams, ParamBlock};

pub const GRAPH_MAGIC: &str = "HGAVE1-graph";
pub const CHECKPOINT_MAGIC: &str = "HGAVE1-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        out.push(match it.next() {
            Some('\\') => '\\',
            Some('t') => '\t',
            Some('n') => '\n',
            Some('r') => '\r',
            other => return Err(Error::Format(format!("bad escape \\{}", other.map_or(String::new(), String::from)))),
        });
    }
    Ok(out)
}

fn hex(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

fn unhex(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16).map(f64::from_bits).map_err(|_| Error::Format(format!("bad real {s:?}")))
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line: usize,
    source: &'static str,
}

impl<R: BufRead> Lines<R> {
    fn new(r: R, source: &'static str) -> Self {
        Self { inner: r.lines(), line: 0, source }
    }

    fn next(&mut self) -> Result<String> {
        self.line += 1;
        match self.inner.next() {
            Some(l) => Ok(l?),
            None => Err(self.err("unexpected end of file")),
        }
    }

    fn err(&self, m: impl Into<String>) -> Error {
        Error::Parse { source_name: self.source.into(), line: self.line, message: m.into() }
    }

    /// Reads `<word> <count>`.
    fn counted(&mut self, word: &str) -> Result<usize> {
        let l = self.next()?;
        l.strip_prefix(word)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| self.err(format!("expected `{word} <count>`")))
    }

    fn header(&mut self, magic: &str) -> Result<()> {
        let l = self.next()?;
        let (m, v) = l.split_once(' ').ok_or_else(|| self.err("missing header"))?;
        if m != magic {
            return Err(Error::Format(format!("expected {magic}, found {m:?}")));
        }
        match v.parse::<u32>() {
            Ok(FORMAT_VERSION) => Ok(()),
            _ => Err(Error::Format(format!("{magic} version {v} is not supported (expected {FORMAT_VERSION})"))),
        }
    }
}

pub fn write_graph<W: Write>(g: &Hypergraph, mut w: W) -> Result<()> {
    writeln!(w, "{GRAPH_MAGIC} {FORMAT_VERSION}")?;
    writeln!(w, "nodes {}", g.num_nodes())?;
    for n in g.nodes() {
        writeln!(w, "{}\t{}\t{}", n.kind.as_str(), escape(&n.key), escape(&n.text))?;
    }
    writeln!(w, "edges {}", g.num_edges())?;
    for e in g.edges() {
        let m: Vec<String> = e.members.iter().map(|v| v.0.to_string()).collect();
        writeln!(w, "{}\t{}\t{}", e.kind.as_str(), hex(e.weight), m.join(","))?;
    }
    writeln!(w, "pairs {}", g.pairs().len())?;
    for (x, y) in g.pairs() {
        writeln!(w, "{}\t{}", x.0, y.0)?;
    }
    Ok(())
}

pub fn read_graph<R: BufRead>(r: R) -> Result<Hypergraph> {
    let mut ls = Lines::new(r, "graph");
    ls.header(GRAPH_MAGIC)?;
    let mut b = HypergraphBuilder::new();
    for _ in 0..ls.counted("nodes")? {
        let l = ls.next()?;
        let f: Vec<&str> = l.split('\t').collect();
        let [kind, key, text] = f[..] else { return Err(ls.err("expected kind, key, text")) };
        let kind = NodeKind::parse(kind).ok_or_else(|| ls.err(format!("unknown node kind {kind:?}")))?;
        b.add_node(kind, unescape(key)?, unescape(text)?)?;
    }
    for _ in 0..ls.counted("edges")? {
        let l = ls.next()?;
        let f: Vec<&str> = l.split('\t').collect();
        let [kind, weight, members] = f[..] else { return Err(ls.err("expected kind, weight, members")) };
        let kind = HyperedgeKind::parse(kind).ok_or_else(|| ls.err(format!("unknown hyperedge kind {kind:?}")))?;
        let members = members
            .split(',')
            .map(|m| m.parse().map(NodeId).map_err(|_| ls.err(format!("bad member {m:?}"))))
            .collect::<Result<Vec<_>>>()?;
        b.add_hyperedge(kind, members, unhex(weight)?)?;
    }
    for _ in 0..ls.counted("pairs")? {
        let l = ls.next()?;
        let (x, y) = l.split_once('\t').ok_or_else(|| ls.err("expected two node ids"))?;
        let id = |s: &str| s.parse().map(NodeId).map_err(|_| ls.err(format!("bad node id {s:?}")));
        b.add_pair(id(x)?, id(y)?)?;
    }
    Ok(b.build())
}

/// Trained parameters plus the weights chosen on validation.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub fusion: FusionWeights,
    pub threshold: f64,
}

pub fn write_checkpoint<W: Write>(c: &Checkpoint, mut w: W) -> Result<()> {
    writeln!(w, "{CHECKPOINT_MAGIC} {FORMAT_VERSION}")?;
    writeln!(w, "config {}", serde_json::to_string(&c.params.config)?)?;
    writeln!(w, "input_dim {}", c.params.input_dim)?;
    let f = &c.fusion;
    writeln!(w, "fusion {} {} {} {}", hex(f.alpha), hex(f.beta), hex(f.gamma), hex(f.delta))?;
    writeln!(w, "threshold {}", hex(c.threshold))?;
    writeln!(w, "blocks {}", c.params.blocks.len())?;
    for b in &c.params.blocks {
        writeln!(w, "block {} {} {}", b.name, b.value.rows(), b.value.cols())?;
        let vals: Vec<String> = b.value.data().iter().map(|&x| hex(x)).collect();
        writeln!(w, "{}", vals.join(" "))?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Checkpoint> {
    let mut ls = Lines::new(r, "checkpoint");
    ls.header(CHECKPOINT_MAGIC)?;
    let l = ls.next()?;
    let config: ModelConfig =
        serde_json::from_str(l.strip_prefix("config ").ok_or_else(|| ls.err("expected config"))?)?;
    config.validate()?;
    let input_dim = ls.counted("input_dim")?;
    let l = ls.next()?;
    let fv = l
        .strip_prefix("fusion ")
        .ok_or_else(|| ls.err("expected fusion"))?
        .split(' ')
        .map(unhex)
        .collect::<Result<Vec<_>>>()?;
    let [alpha, beta, gamma, delta] = fv[..] else { return Err(ls.err("expected four fusion weights")) };
    let fusion = FusionWeights::new(alpha, beta, gamma, delta)?;
    let l = ls.next()?;
    let threshold = unhex(l.strip_prefix("threshold ").ok_or_else(|| ls.err("expected threshold"))?)?;
    let n = ls.counted("blocks")?;
    let mut blocks = Vec::with_capacity(n);
    for _ in 0..n {
        let l = ls.next()?;
        let f: Vec<&str> = l.split(' ').collect();
        let ["block", name, r, c] = f[..] else { return Err(ls.err("expected `block <name> <rows> <cols>`")) };
        let (r, c): (usize, usize) = match (r.parse(), c.parse()) {
            (Ok(r), Ok(c)) => (r, c),
            _ => return Err(ls.err("bad block shape")),
        };
        let l = ls.next()?;
        let data = if l.is_empty() { Vec::new() } else { l.split(' ').map(unhex).collect::<Result<Vec<_>>>()? };
        blocks.push(ParamBlock { name: name.to_string(), value: Tensor::from_vec(r, c, data)? });
    }
    let params = ModelParams { config, input_dim, blocks };
    let reference = ModelParams::init(&params.config, input_dim, 0)?;
    let shapes_match = reference.blocks.len() == params.blocks.len()
        && reference.blocks.iter().zip(&params.blocks).all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
    if !shapes_match {
        return Err(Error::Format("checkpoint blocks do not match its model configuration".into()));
    }
    Ok(Checkpoint { params, fusion, threshold })
}
