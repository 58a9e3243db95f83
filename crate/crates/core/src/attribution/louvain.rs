//! Louvain community detection (modularity maximisation, resolution 1.0).

use std::collections::BTreeMap;

/// Undirected weighted graph. Parallel edges accumulate; self-loops are allowed and
/// stored on the diagonal with both endpoint contributions (`A_ii` counts twice).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightedGraph {
    adjacency: Vec<BTreeMap<usize, f64>>,
}

impl WeightedGraph {
    pub fn new(nodes: usize) -> Self {
        Self {
            adjacency: vec![BTreeMap::new(); nodes],
        }
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    /// Add weight `w` between `u` and `v`. Panics if an endpoint is out of range or `w` is negative.
    pub fn add_edge(&mut self, u: usize, v: usize, w: f64) {
        assert!(w >= 0.0, "edge weights must be nonnegative");
        if u == v {
            *self.adjacency[u].entry(u).or_default() += 2.0 * w;
        } else {
            *self.adjacency[u].entry(v).or_default() += w;
            *self.adjacency[v].entry(u).or_default() += w;
        }
    }

    pub fn neighbors(&self, u: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.adjacency[u].iter().map(|(&v, &w)| (v, w))
    }

    fn degree(&self, u: usize) -> f64 {
        self.adjacency[u].values().sum()
    }

    fn total_weight_x2(&self) -> f64 {
        (0..self.node_count()).map(|u| self.degree(u)).sum()
    }
}

/// Community label per node, numbered `0..k` in order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub labels: Vec<usize>,
}

impl Partition {
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut map = BTreeMap::new();
        let mut next = 0;
        let labels = labels
            .iter()
            .map(|l| {
                *map.entry(*l).or_insert_with(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        Self { labels }
    }

    pub fn community_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Members of each community, ascending.
    pub fn communities(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.community_count()];
        for (node, &c) in self.labels.iter().enumerate() {
            out[c].push(node);
        }
        out
    }
}

/// Newman modularity `Q = 1/2m * sum_ij (A_ij - k_i k_j / 2m) [c_i = c_j]`.
/// A graph with no edge weight has modularity 0.
pub fn modularity(graph: &WeightedGraph, labels: &[usize]) -> f64 {
    let two_m = graph.total_weight_x2();
    if two_m <= 0.0 {
        return 0.0;
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut internal = vec![0.0; k];
    let mut total = vec![0.0; k];
    for u in 0..graph.node_count() {
        total[labels[u]] += graph.degree(u);
        for (v, w) in graph.neighbors(u) {
            if labels[u] == labels[v] {
                internal[labels[u]] += w;
            }
        }
    }
    internal
        .iter()
        .zip(&total)
        .map(|(inn, tot)| inn / two_m - (tot / two_m).powi(2))
        .sum()
}

const GAIN_EPS: f64 = 1e-12;

/// Local moving phase. Returns the community of every node and whether anything moved.
fn move_nodes(graph: &WeightedGraph) -> (Vec<usize>, bool) {
    let n = graph.node_count();
    let two_m = graph.total_weight_x2();
    let degree: Vec<f64> = (0..n).map(|u| graph.degree(u)).collect();
    let mut community: Vec<usize> = (0..n).collect();
    let mut tot = degree.clone();
    let mut any_move = false;
    loop {
        let mut moved = false;
        for u in 0..n {
            let own = community[u];
            tot[own] -= degree[u];
            let mut links: BTreeMap<usize, f64> = BTreeMap::new();
            for (v, w) in graph.neighbors(u) {
                if v != u {
                    *links.entry(community[v]).or_default() += w;
                }
            }
            let gain = |c: usize, k_in: f64| k_in - degree[u] * tot[c] / two_m;
            let mut best = own;
            let mut best_gain = gain(own, links.get(&own).copied().unwrap_or(0.0));
            for (&c, &k_in) in &links {
                let g = gain(c, k_in);
                if g > best_gain + GAIN_EPS {
                    best = c;
                    best_gain = g;
                }
            }
            tot[best] += degree[u];
            if best != own {
                community[u] = best;
                moved = true;
                any_move = true;
            }
        }
        if !moved {
            break;
        }
    }
    (Partition::from_labels(&community).labels, any_move)
}

fn aggregate(graph: &WeightedGraph, labels: &[usize]) -> WeightedGraph {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut adjacency = vec![BTreeMap::new(); k];
    for u in 0..graph.node_count() {
        for (v, w) in graph.neighbors(u) {
            *adjacency[labels[u]].entry(labels[v]).or_default() += w;
        }
    }
    WeightedGraph { adjacency }
}

/// Partition nodes into communities with the Louvain method. Nodes are visited in
/// ascending index order and ties keep the current community, so the result is
/// deterministic. Edgeless graphs yield all singletons.
pub fn louvain_partition(graph: &WeightedGraph) -> Partition {
    let n = graph.node_count();
    let mut assignment: Vec<usize> = (0..n).collect();
    if graph.total_weight_x2() <= 0.0 {
        return Partition { labels: assignment };
    }
    let mut level = graph.clone();
    loop {
        let (labels, moved) = move_nodes(&level);
        if !moved {
            break;
        }
        for a in &mut assignment {
            *a = labels[*a];
        }
        level = aggregate(&level, &labels);
    }
    Partition::from_labels(&assignment)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_cliques() -> WeightedGraph {
        let mut g = WeightedGraph::new(6);
        for (u, v) in [(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5), (2, 3)] {
            g.add_edge(u, v, 1.0);
        }
        g
    }

    #[test]
    fn recovers_two_cliques() {
        let p = louvain_partition(&two_cliques());
        assert_eq!(p.labels, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn single_edge_merges() {
        let mut g = WeightedGraph::new(2);
        g.add_edge(0, 1, 1.0);
        assert!((modularity(&g, &[0, 1]) + 0.5).abs() < 1e-12);
        assert_eq!(modularity(&g, &[0, 0]), 0.0);
        assert_eq!(louvain_partition(&g).labels, vec![0, 0]);
    }

    #[test]
    fn edgeless_graph_is_all_singletons() {
        let g = WeightedGraph::new(4);
        assert_eq!(louvain_partition(&g).labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn modularity_of_cliques() {
        // 7 edges, each clique has 3 internal edges and total degree 7
        let q = modularity(&two_cliques(), &[0, 0, 0, 1, 1, 1]);
        let want = 2.0 * (6.0 / 14.0 - (7.0f64 / 14.0).powi(2));
        assert!((q - want).abs() < 1e-12);
    }

    #[test]
    fn aggregation_preserves_modularity() {
        let g = two_cliques();
        let labels = [0, 0, 0, 1, 1, 1];
        let agg = aggregate(&g, &labels);
        assert!((modularity(&agg, &[0, 1]) - modularity(&g, &labels)).abs() < 1e-12);
    }

    #[test]
    fn deterministic() {
        let g = two_cliques();
        assert_eq!(louvain_partition(&g), louvain_partition(&g));
    }
}
