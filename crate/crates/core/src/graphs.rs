//! User-item bipartite graph, item-item co-occurrence graph and their
//! neighbor samplers. Both graphs are built from train segments only.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;

use crate::data::SplitDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeRef {
    User(usize),
    Item(usize),
}

impl NodeRef {
    pub fn id(self) -> usize {
        match self {
            NodeRef::User(u) | NodeRef::Item(u) => u,
        }
    }
}

/// Undirected user-item graph; an edge means "interacted at least once".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipartiteGraph {
    /// Sorted distinct items per user.
    pub user_adj: Vec<Vec<usize>>,
    /// Sorted distinct users per item.
    pub item_adj: Vec<Vec<usize>>,
}

pub fn build_bipartite(split: &SplitDataset) -> BipartiteGraph {
    let mut user_adj: Vec<Vec<usize>> = split
        .users
        .iter()
        .map(|s| {
            let mut items = s.train.clone();
            items.sort_unstable();
            items.dedup();
            items
        })
        .collect();
    let mut item_adj = vec![Vec::new(); split.num_items];
    for (u, items) in user_adj.iter().enumerate() {
        for &v in items {
            item_adj[v].push(u);
        }
    }
    user_adj.shrink_to_fit();
    BipartiteGraph { user_adj, item_adj }
}

impl BipartiteGraph {
    pub fn neighbors(&self, node: NodeRef) -> &[usize] {
        match node {
            NodeRef::User(u) => &self.user_adj[u],
            NodeRef::Item(v) => &self.item_adj[v],
        }
    }

    pub fn num_edges(&self) -> usize {
        self.user_adj.iter().map(Vec::len).sum()
    }

    /// `u<id>: <items>` lines for every user, then `i<id>: <users>` for every item.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (u, nbrs) in self.user_adj.iter().enumerate() {
            let _ = writeln!(out, "u{u}: {}", join_ids(nbrs));
        }
        for (v, nbrs) in self.item_adj.iter().enumerate() {
            let _ = writeln!(out, "i{v}: {}", join_ids(nbrs));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut user_adj = Vec::new();
        let mut item_adj = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let (node, rest) = split_node(line, line_no)?;
            let list: &mut Vec<Vec<usize>> = match node.as_bytes().first() {
                Some(b'u') => &mut user_adj,
                Some(b'i') => &mut item_adj,
                _ => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("node `{node}` must start with `u` or `i`"),
                    })
                }
            };
            let id: usize = node[1..].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad node `{node}`"),
            })?;
            if id != list.len() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("node `{node}` out of order"),
                });
            }
            let nbrs = rest
                .split(',')
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<usize>().map_err(|_| Error::Parse {
                        line: line_no,
                        message: format!("bad neighbor `{t}`"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            list.push(nbrs);
        }
        Ok(BipartiteGraph { user_adj, item_adj })
    }
}

/// Weighted item-item graph; weight(a, b) counts the positions where `a`
/// and `b` are adjacent in some train sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoocGraph {
    /// Per item, `(neighbor, weight)` sorted by neighbor.
    pub adj: Vec<Vec<(usize, u64)>>,
    /// Running weight totals aligned with `adj`, for weighted draws.
    cumulative: Vec<Vec<u64>>,
}

pub fn build_cooccurrence(split: &SplitDataset) -> CoocGraph {
    let mut maps: Vec<BTreeMap<usize, u64>> = vec![BTreeMap::new(); split.num_items];
    for s in &split.users {
        for w in s.train.windows(2) {
            let (a, b) = (w[0], w[1]);
            *maps[a].entry(b).or_default() += 1;
            if a != b {
                *maps[b].entry(a).or_default() += 1;
            }
        }
    }
    CoocGraph::from_adjacency(maps.into_iter().map(|m| m.into_iter().collect()).collect())
}

impl CoocGraph {
    pub fn from_adjacency(adj: Vec<Vec<(usize, u64)>>) -> Self {
        let cumulative = adj
            .iter()
            .map(|nbrs| {
                nbrs.iter()
                    .scan(0u64, |acc, &(_, w)| {
                        *acc += w;
                        Some(*acc)
                    })
                    .collect()
            })
            .collect();
        CoocGraph { adj, cumulative }
    }

    pub fn neighbors(&self, item: usize) -> &[(usize, u64)] {
        &self.adj[item]
    }

    pub fn weight(&self, a: usize, b: usize) -> u64 {
        self.adj[a]
            .binary_search_by_key(&b, |&(n, _)| n)
            .map(|i| self.adj[a][i].1)
            .unwrap_or(0)
    }

    pub fn total_weight(&self) -> u64 {
        self.adj.iter().flatten().map(|&(_, w)| w).sum()
    }

    /// `<item>: <nbr>:<weight>,…` per item.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (v, nbrs) in self.adj.iter().enumerate() {
            let _ = write!(out, "{v}:");
            for (i, (n, w)) in nbrs.iter().enumerate() {
                let sep = if i == 0 { " " } else { "," };
                let _ = write!(out, "{sep}{n}:{w}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut adj = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let (node, rest) = split_node(line, line_no)?;
            let bad = |what: &str| Error::Parse {
                line: line_no,
                message: format!("bad {what}"),
            };
            let id: usize = node.parse().map_err(|_| bad("node"))?;
            if id != adj.len() {
                return Err(bad("node order"));
            }
            let nbrs = rest
                .split(',')
                .filter(|t| !t.is_empty())
                .map(|t| {
                    let (n, w) = t.split_once(':').ok_or_else(|| bad("neighbor:weight pair"))?;
                    let w: u64 = w.parse().map_err(|_| bad("weight"))?;
                    if w == 0 {
                        return Err(bad("weight (must be positive)"));
                    }
                    Ok((n.parse().map_err(|_| bad("neighbor"))?, w))
                })
                .collect::<Result<Vec<_>>>()?;
            adj.push(nbrs);
        }
        Ok(CoocGraph::from_adjacency(adj))
    }
}

fn split_node(line: &str, line_no: usize) -> Result<(&str, &str)> {
    line.split_once(':')
        .map(|(a, b)| (a.trim(), b.trim()))
        .ok_or_else(|| Error::Parse {
            line: line_no,
            message: "expected `node: neighbors`".into(),
        })
}

fn join_ids(ids: &[usize]) -> String {
    let mut s = String::new();
    for (i, x) in ids.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{x}");
    }
    s
}

/// Draws `n` neighbors uniformly: without replacement when the degree is at
/// least `n`, with replacement otherwise.
pub fn sample_neighbors_uniform<R: Rng + ?Sized>(
    graph: &BipartiteGraph,
    node: NodeRef,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let nbrs = graph.neighbors(node);
    if nbrs.is_empty() {
        return Err(Error::IsolatedNode(node.id()));
    }
    if nbrs.len() >= n {
        Ok(index::sample(rng, nbrs.len(), n)
            .into_iter()
            .map(|i| nbrs[i])
            .collect())
    } else {
        Ok((0..n).map(|_| nbrs[rng.gen_range(0..nbrs.len())]).collect())
    }
}

/// Draws `n` neighbors independently with probability proportional to edge weight.
pub fn sample_neighbors_importance<R: Rng + ?Sized>(
    graph: &CoocGraph,
    item: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let nbrs = &graph.adj[item];
    let cumulative = &graph.cumulative[item];
    let total = match cumulative.last() {
        Some(&t) if t > 0 => t,
        _ => return Err(Error::IsolatedNode(item)),
    };
    Ok((0..n)
        .map(|_| {
            let r = rng.gen_range(0..total);
            // first running total strictly above r
            let i = cumulative.partition_point(|&c| c <= r);
            nbrs[i].0
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UserSplit;
    use crate::seed;

    fn train_only(seqs: &[Vec<usize>], num_items: usize) -> SplitDataset {
        SplitDataset::new(
            num_items,
            seqs.iter()
                .map(|s| UserSplit {
                    train: s.clone(),
                    ..Default::default()
                })
                .collect(),
        )
    }

    #[test]
    fn bipartite_dedups_edges() {
        let (a, b, c) = (0, 1, 2);
        let g = build_bipartite(&train_only(&[vec![a, b, a], vec![c], vec![c]], 3));
        assert_eq!(g.user_adj[0], [a, b]);
        assert_eq!(g.item_adj[a], [0]);
        assert_eq!(g.item_adj[c], [1, 2]);
    }

    #[test]
    fn cooccurrence_counts_adjacent_pairs() {
        let g = build_cooccurrence(&train_only(&[vec![0, 1, 2]], 3));
        assert_eq!(g.weight(0, 1), 1);
        assert_eq!(g.weight(1, 2), 1);
        assert_eq!(g.weight(0, 2), 0);
        let g = build_cooccurrence(&train_only(&[vec![0, 1], vec![0, 1]], 2));
        assert_eq!(g.weight(0, 1), 2);
        assert_eq!(g.weight(1, 0), 2);
    }

    #[test]
    fn consecutive_repeats_make_self_edges() {
        let g = build_cooccurrence(&train_only(&[vec![3, 3, 3, 1]], 4));
        assert_eq!(g.weight(3, 3), 2);
        assert_eq!(g.weight(3, 1), 1);
        assert_eq!(g.total_weight(), 4);
    }

    #[test]
    fn val_and_test_items_do_not_leak() {
        let mut split = train_only(&[vec![0, 1, 2]], 5);
        let before = (build_bipartite(&split), build_cooccurrence(&split));
        split.users[0].val = vec![3];
        split.users[0].test = vec![4, 0];
        let after = (build_bipartite(&split), build_cooccurrence(&split));
        assert_eq!(before, after);
    }

    #[test]
    fn uniform_sampling_contracts() {
        let g = build_bipartite(&train_only(&[vec![0], (0..15).collect()], 15));
        let mut rng = seed::rng(3, &[]);
        let one = sample_neighbors_uniform(&g, NodeRef::User(0), 10, &mut rng).unwrap();
        assert_eq!(one, vec![0; 10]);
        let mut many = sample_neighbors_uniform(&g, NodeRef::User(1), 10, &mut rng).unwrap();
        many.sort_unstable();
        many.dedup();
        assert_eq!(many.len(), 10);

        let a = sample_neighbors_uniform(&g, NodeRef::User(1), 10, &mut seed::rng(8, &[2])).unwrap();
        let b = sample_neighbors_uniform(&g, NodeRef::User(1), 10, &mut seed::rng(8, &[2])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn isolated_nodes_error() {
        let g = build_bipartite(&train_only(&[vec![0]], 2));
        let mut rng = seed::rng(0, &[]);
        assert!(matches!(
            sample_neighbors_uniform(&g, NodeRef::Item(1), 10, &mut rng),
            Err(Error::IsolatedNode(1))
        ));
        let c = build_cooccurrence(&train_only(&[vec![0]], 2));
        assert!(sample_neighbors_importance(&c, 0, 10, &mut rng).is_err());
    }

    #[test]
    fn importance_single_neighbor_is_forced() {
        let c = CoocGraph::from_adjacency(vec![vec![(1, 7)], vec![(0, 7)]]);
        let mut rng = seed::rng(0, &[]);
        assert_eq!(sample_neighbors_importance(&c, 0, 10, &mut rng).unwrap(), vec![1; 10]);
    }

    #[test]
    fn text_formats_round_trip() {
        let split = train_only(&[vec![0, 1, 2, 1], vec![2, 2, 3]], 5);
        let b = build_bipartite(&split);
        assert_eq!(BipartiteGraph::from_text(&b.to_text()).unwrap(), b);
        let c = build_cooccurrence(&split);
        assert_eq!(CoocGraph::from_text(&c.to_text()).unwrap(), c);
        assert!(c.to_text().starts_with("0: 1:1\n1: 0:1,2:2\n"));
    }

    #[test]
    fn malformed_graph_text_is_rejected() {
        assert!(CoocGraph::from_text("0: 1:x\n").is_err());
        assert!(CoocGraph::from_text("1: 0:1\n").is_err());
        assert!(BipartiteGraph::from_text("x0: 1\n").is_err());
    }
}
