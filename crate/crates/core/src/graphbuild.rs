//! Top-k% explanation selection and per-instance explanation graphs.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribution::{HighlightTokenSet, SpanInteractionSet, TokenInteractionSet, TokenSpan};
use crate::dataset::TokenizedInstance;
use crate::error::{Error, Result};

pub const DEFAULT_K_PERCENT: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationKind {
    HighlightToken,
    TokenInteraction,
    SpanInteraction,
}

impl ExplanationKind {
    pub const ALL: [ExplanationKind; 3] = [
        ExplanationKind::HighlightToken,
        ExplanationKind::TokenInteraction,
        ExplanationKind::SpanInteraction,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExplanationKind::HighlightToken => "highlight_token",
            ExplanationKind::TokenInteraction => "token_interaction",
            ExplanationKind::SpanInteraction => "span_interaction",
        }
    }
}

impl fmt::Display for ExplanationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExplanationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown explanation type `{s}` (valid: highlight_token, token_interaction, span_interaction)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Explanation {
    Token(usize),
    Pair(usize, usize),
    SpanPair(TokenSpan, TokenSpan),
}

impl Explanation {
    pub fn kind(&self) -> ExplanationKind {
        match self {
            Explanation::Token(_) => ExplanationKind::HighlightToken,
            Explanation::Pair(..) => ExplanationKind::TokenInteraction,
            Explanation::SpanPair(..) => ExplanationKind::SpanInteraction,
        }
    }

    fn order_key(&self) -> (usize, usize) {
        match *self {
            Explanation::Token(i) => (i, 0),
            Explanation::Pair(i, j) => (i, j),
            Explanation::SpanPair(a, b) => (a.start, b.start),
        }
    }

    /// Every token position the explanation touches.
    pub fn positions(&self) -> Vec<usize> {
        match *self {
            Explanation::Token(i) => vec![i],
            Explanation::Pair(i, j) => vec![i, j],
            Explanation::SpanPair(a, b) => a.positions().chain(b.positions()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredExplanation {
    pub item: Explanation,
    pub score: f64,
}

impl HighlightTokenSet {
    pub fn scored(&self) -> Vec<ScoredExplanation> {
        self.entries
            .iter()
            .map(|e| ScoredExplanation {
                item: Explanation::Token(e.index),
                score: e.score,
            })
            .collect()
    }
}

impl TokenInteractionSet {
    pub fn scored(&self) -> Vec<ScoredExplanation> {
        self.entries
            .iter()
            .map(|e| ScoredExplanation {
                item: Explanation::Pair(e.i, e.j),
                score: e.score,
            })
            .collect()
    }
}

impl SpanInteractionSet {
    pub fn scored(&self) -> Vec<ScoredExplanation> {
        self.entries
            .iter()
            .map(|e| ScoredExplanation {
                item: Explanation::SpanPair(e.span_a, e.span_b),
                score: e.score,
            })
            .collect()
    }
}

/// Retained explanations of one kind, sorted by descending score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationSelection {
    pub kind: ExplanationKind,
    pub items: Vec<ScoredExplanation>,
    pub k_percent: f64,
}

impl ExplanationSelection {
    /// Distinct token positions touched by the selection, ascending.
    pub fn positions(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.items.iter().flat_map(|s| s.item.positions()).collect();
        set.into_iter().collect()
    }
}

/// Number of items kept out of `total` at `k_percent`: `max(1, ceil(k/100 * total))`.
pub fn retained_count(total: usize, k_percent: f64) -> usize {
    // k*N/100 in that order keeps integral cases exact (30*10/100 = 3, not 3.0000000000000004)
    let raw = k_percent * total as f64 / 100.0;
    ((raw - 1e-9).ceil() as usize).clamp(1, total.max(1))
}

/// Keep the top `k_percent` of token or pair explanations (at least one). Span pairs are
/// all kept. Ties are broken by lower first index, then lower second index.
pub fn select_top_fraction(
    explanations: &[ScoredExplanation],
    k_percent: f64,
) -> Result<ExplanationSelection> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "k_percent must be in (0, 100], got {k_percent}"
        )));
    }
    let first = explanations
        .first()
        .ok_or_else(|| Error::Empty("explanation list".into()))?;
    let kind = first.item.kind();
    if explanations.iter().any(|e| e.item.kind() != kind) {
        return Err(Error::InvalidArgument(
            "explanations of different kinds cannot be selected together".into(),
        ));
    }
    let mut items = explanations.to_vec();
    items.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.item.order_key().cmp(&b.item.order_key()))
    });
    if kind != ExplanationKind::SpanInteraction {
        items.truncate(retained_count(items.len(), k_percent));
    }
    Ok(ExplanationSelection {
        kind,
        items,
        k_percent,
    })
}

/// Undirected, unweighted token graph with one node per input subtoken. Edges are stored
/// once as `(low, high)`; every edge stands for both directions with weight 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationGraph {
    pub instance_id: String,
    pub node_count: usize,
    pub kind: ExplanationKind,
    pub k_percent: f64,
    edges: BTreeSet<(usize, usize)>,
}

impl ExplanationGraph {
    pub fn new(
        instance_id: impl Into<String>,
        node_count: usize,
        kind: ExplanationKind,
        k_percent: f64,
    ) -> Self {
        Self {
            instance_id: instance_id.into(),
            node_count,
            kind,
            k_percent,
            edges: BTreeSet::new(),
        }
    }

    /// Add an undirected edge. Self-loops are ignored.
    pub fn add_edge(&mut self, u: usize, v: usize) -> Result<()> {
        for x in [u, v] {
            if x >= self.node_count {
                return Err(Error::IndexOutOfRange {
                    index: x,
                    len: self.node_count,
                });
            }
        }
        if u != v {
            self.edges.insert((u.min(v), u.max(v)));
        }
        Ok(())
    }

    pub fn with_edges(mut self, edges: &[(usize, usize)]) -> Result<Self> {
        for &(u, v) in edges {
            self.add_edge(u, v)?;
        }
        Ok(self)
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.contains(&(u.min(v), u.max(v)))
    }

    /// Both directions of every edge.
    pub fn directed_edges(&self) -> Vec<(usize, usize)> {
        self.edges
            .iter()
            .flat_map(|&(u, v)| [(u, v), (v, u)])
            .collect()
    }

    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == v {
                    Some(b)
                } else if b == v {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Dense row-major 0/1 adjacency of size `size x size` (`size >= node_count`, extra rows are padding).
    pub fn adjacency(&self, size: usize) -> Vec<f32> {
        let mut a = vec![0f32; size * size];
        for &(u, v) in &self.edges {
            a[u * size + v] = 1.0;
            a[v * size + u] = 1.0;
        }
        a
    }

    /// Apply a node relabelling `perm[old] = new`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut g = Self::new(
            self.instance_id.clone(),
            self.node_count,
            self.kind,
            self.k_percent,
        );
        for &(u, v) in &self.edges {
            g.add_edge(perm[u], perm[v])?;
        }
        Ok(g)
    }
}

fn complete(graph: &mut ExplanationGraph, nodes: &[usize]) -> Result<()> {
    for (a, &u) in nodes.iter().enumerate() {
        for &v in &nodes[a + 1..] {
            graph.add_edge(u, v)?;
        }
    }
    Ok(())
}

/// Build the explanation graph of one instance from a selection.
///
/// * highlight tokens: a complete graph over the selected tokens;
/// * token interactions: one edge per selected pair;
/// * span interactions: complete graphs inside each span plus complete bipartite edges
///   between the two spans of a pair.
///
/// In every regime the subtokens of any word touched by the selection are chained.
pub fn build_graph(
    selection: &ExplanationSelection,
    instance: &TokenizedInstance,
) -> Result<ExplanationGraph> {
    let n = instance.len();
    let mut graph =
        ExplanationGraph::new(instance.id.clone(), n, selection.kind, selection.k_percent);
    for p in selection.positions() {
        if p >= n {
            return Err(Error::IndexOutOfRange { index: p, len: n });
        }
    }
    match selection.kind {
        ExplanationKind::HighlightToken => complete(&mut graph, &selection.positions())?,
        ExplanationKind::TokenInteraction | ExplanationKind::SpanInteraction => {
            for s in &selection.items {
                match s.item {
                    Explanation::Pair(i, j) => graph.add_edge(i, j)?,
                    Explanation::SpanPair(a, b) => {
                        let a: Vec<usize> = a.positions().collect();
                        let b: Vec<usize> = b.positions().collect();
                        complete(&mut graph, &a)?;
                        complete(&mut graph, &b)?;
                        for &u in &a {
                            for &v in &b {
                                graph.add_edge(u, v)?;
                            }
                        }
                    }
                    Explanation::Token(_) => {
                        return Err(Error::InvalidArgument(
                            "token explanation in an interaction selection".into(),
                        ))
                    }
                }
            }
        }
    }
    let mut chained = BTreeSet::new();
    for p in selection.positions() {
        if let Some(word) = instance.word_at(p) {
            if chained.insert(word.start) {
                for s in word.start..word.end.saturating_sub(1) {
                    graph.add_edge(s, s + 1)?;
                }
            }
        }
    }
    Ok(graph)
}

const MAGIC: &str = "graphguide-graph v1";

/// Text encoding: a magic line, `id=` (JSON string), `nodes=`, `kind=`, `k=`, `edges=`
/// header lines, then one `u v` pair per undirected edge, every line newline-terminated.
pub fn serialize_graph(graph: &ExplanationGraph) -> Vec<u8> {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!(
        "id={}\nnodes={}\nkind={}\nk={}\nedges={}\n",
        serde_json::to_string(&graph.instance_id).expect("string serialization"),
        graph.node_count,
        graph.kind,
        graph.k_percent,
        graph.edges.len()
    ));
    for &(u, v) in &graph.edges {
        out.push_str(&format!("{u} {v}\n"));
    }
    out.into_bytes()
}

pub fn parse_graph(bytes: &[u8]) -> Result<ExplanationGraph> {
    let bad = |m: &str| Error::MalformedGraph(m.to_string());
    let text = std::str::from_utf8(bytes).map_err(|_| bad("not UTF-8"))?;
    if !text.ends_with('\n') {
        return Err(bad("truncated payload (missing final newline)"));
    }
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("missing header"));
    }
    let mut field = |name: &str| -> Result<&str> {
        lines
            .next()
            .and_then(|l| l.strip_prefix(name))
            .and_then(|l| l.strip_prefix('='))
            .ok_or_else(|| bad(&format!("missing `{name}` field")))
    };
    let id: String = serde_json::from_str(field("id")?).map_err(|_| bad("bad id"))?;
    let nodes: usize = field("nodes")?.parse().map_err(|_| bad("bad node count"))?;
    let kind: ExplanationKind = field("kind")?.parse()?;
    let k: f64 = field("k")?.parse().map_err(|_| bad("bad k"))?;
    let n_edges: usize = field("edges")?.parse().map_err(|_| bad("bad edge count"))?;
    let mut graph = ExplanationGraph::new(id, nodes, kind, k);
    let mut seen = 0;
    for line in lines {
        let mut it = line.split(' ');
        let (u, v) = match (it.next(), it.next(), it.next()) {
            (Some(u), Some(v), None) => (
                u.parse::<usize>().map_err(|_| bad("bad edge"))?,
                v.parse::<usize>().map_err(|_| bad("bad edge"))?,
            ),
            _ => return Err(bad("bad edge line")),
        };
        if u >= v {
            return Err(bad("edge endpoints must be ascending"));
        }
        graph.add_edge(u, v).map_err(|e| bad(&e.to_string()))?;
        seen += 1;
    }
    if seen != n_edges || graph.edge_count() != n_edges {
        return Err(bad(&format!("expected {n_edges} edges, found {seen}")));
    }
    Ok(graph)
}

/// Filesystem-safe form of an instance id.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn graph_path(dir: &Path, instance_id: &str) -> std::path::PathBuf {
    dir.join(format!("{}.graph", file_stem(instance_id)))
}

pub fn write_graph(dir: &Path, graph: &ExplanationGraph) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = graph_path(dir, &graph.instance_id);
    fs::write(&path, serialize_graph(graph)).map_err(|e| Error::io(path, e))
}

/// Load every `*.graph` file in `dir`, keyed by instance id.
pub fn read_graph_dir(dir: &Path) -> Result<HashMap<String, ExplanationGraph>> {
    let mut out = HashMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "graph") {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let g = parse_graph(&bytes)?;
            out.insert(g.instance_id.clone(), g);
        }
    }
    Ok(out)
}
