//! Inter-sequence item encoder: sampled graph convolutions over the
//! bipartite and co-occurrence graphs, a residual transform of the raw item
//! embedding, and their element-wise sum.
//!
//! A convolution layer `k` for a node with sampled children `C` computes
//!
//! ```text
//! z   = σ(Q_k · mean{g_c^{k-1} : c ∈ C} + q_k)      (z = 0 when C is empty)
//! g^k = σ(P_k · [g^{k-1}; z] + p_k)
//! ```
//!
//! with `g^0` the raw embedding. Because the pooling is a mean, pooling the
//! children before the affine map is identical to averaging `Q·g + q` over
//! them. On the bipartite graph node types alternate with depth and each type
//! has its own `Q, q, P, p`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graphs::{sample_neighbors_importance, sample_neighbors_uniform, BipartiteGraph, CoocGraph, NodeRef};
use crate::numerics::{self, affine, affine_backward, concat, Activation, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    /// `|V| × d`
    pub items: Tensor,
    /// `|U| × d`
    pub users: Tensor,
}

impl EmbeddingTables {
    pub fn dim(&self) -> usize {
        self.items.cols()
    }

    pub fn row(&self, node: NodeRef) -> &[f64] {
        match node {
            NodeRef::Item(v) => self.items.row(v),
            NodeRef::User(u) => self.users.row(u),
        }
    }
}

/// Sparse row gradients of the embedding tables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingGrads {
    pub items: BTreeMap<usize, Vec<f64>>,
    pub users: BTreeMap<usize, Vec<f64>>,
}

impl EmbeddingGrads {
    pub fn add(&mut self, node: NodeRef, g: &[f64]) {
        let map = match node {
            NodeRef::Item(_) => &mut self.items,
            NodeRef::User(_) => &mut self.users,
        };
        match map.get_mut(&node.id()) {
            Some(row) => numerics::add_into(row, g),
            None => {
                map.insert(node.id(), g.to_vec());
            }
        }
    }

    pub fn merge(&mut self, other: &EmbeddingGrads) {
        for (&v, g) in &other.items {
            self.add(NodeRef::Item(v), g);
        }
        for (&u, g) in &other.users {
            self.add(NodeRef::User(u), g);
        }
    }

    /// Densifies into `rows × dim` tensors.
    pub fn to_dense(&self, num_items: usize, num_users: usize, dim: usize) -> (Tensor, Tensor) {
        let mut items = Tensor::zeros(&[num_items, dim]);
        let mut users = Tensor::zeros(&[num_users, dim]);
        for (&v, g) in &self.items {
            items.row_mut(v).copy_from_slice(g);
        }
        for (&u, g) in &self.users {
            users.row_mut(u).copy_from_slice(g);
        }
        (items, users)
    }
}

/// Aggregator `(Q, q)` and transform `(P, p)` of one layer for one node type.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    /// `d × d`
    pub agg_w: Tensor,
    pub agg_b: Tensor,
    /// `d × 2d`, applied to `[g^{k-1}; z]`
    pub tr_w: Tensor,
    pub tr_b: Tensor,
}

impl ConvWeights {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        ConvWeights {
            agg_w: Tensor::uniform(&[dim, dim], bound, rng),
            agg_b: Tensor::zeros(&[dim]),
            tr_w: Tensor::uniform(&[dim, 2 * dim], bound, rng),
            tr_b: Tensor::zeros(&[dim]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ConvWeights {
            agg_w: self.agg_w.zeros_like(),
            agg_b: self.agg_b.zeros_like(),
            tr_w: self.tr_w.zeros_like(),
            tr_b: self.tr_b.zeros_like(),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.agg_w, &self.agg_b, &self.tr_w, &self.tr_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.agg_w, &mut self.agg_b, &mut self.tr_w, &mut self.tr_b]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnBLayer {
    /// Used when the target node is an item (aggregates user neighbors).
    pub item: ConvWeights,
    /// Used when the target node is a user (aggregates item neighbors).
    pub user: ConvWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnBParams {
    pub layers: Vec<GcnBLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnCParams {
    pub layers: Vec<ConvWeights>,
}

/// Lookup of the weights applied to `node` at (0-based) `layer`.
pub trait LayerStack {
    fn depth(&self) -> usize;
    fn weights(&self, layer: usize, node: NodeRef) -> &ConvWeights;
    fn weights_mut(&mut self, layer: usize, node: NodeRef) -> &mut ConvWeights;
}

impl GcnBParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, layers: usize, rng: &mut R) -> Self {
        GcnBParams {
            layers: (0..layers)
                .map(|_| GcnBLayer {
                    item: ConvWeights::init(dim, rng),
                    user: ConvWeights::init(dim, rng),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        GcnBParams {
            layers: self
                .layers
                .iter()
                .map(|l| GcnBLayer {
                    item: l.item.zeros_like(),
                    user: l.user.zeros_like(),
                })
                .collect(),
        }
    }
}

impl LayerStack for GcnBParams {
    fn depth(&self) -> usize {
        self.layers.len()
    }

    fn weights(&self, layer: usize, node: NodeRef) -> &ConvWeights {
        match node {
            NodeRef::Item(_) => &self.layers[layer].item,
            NodeRef::User(_) => &self.layers[layer].user,
        }
    }

    fn weights_mut(&mut self, layer: usize, node: NodeRef) -> &mut ConvWeights {
        match node {
            NodeRef::Item(_) => &mut self.layers[layer].item,
            NodeRef::User(_) => &mut self.layers[layer].user,
        }
    }
}

impl GcnCParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, layers: usize, rng: &mut R) -> Self {
        GcnCParams {
            layers: (0..layers).map(|_| ConvWeights::init(dim, rng)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        GcnCParams {
            layers: self.layers.iter().map(ConvWeights::zeros_like).collect(),
        }
    }
}

impl LayerStack for GcnCParams {
    fn depth(&self) -> usize {
        self.layers.len()
    }

    fn weights(&self, layer: usize, _node: NodeRef) -> &ConvWeights {
        &self.layers[layer]
    }

    fn weights_mut(&mut self, layer: usize, _node: NodeRef) -> &mut ConvWeights {
        &mut self.layers[layer]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl ResidualParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, identity: bool, rng: &mut R) -> Self {
        let w = if identity {
            Tensor::identity(dim)
        } else {
            Tensor::uniform(&[dim, dim], 1.0 / (dim as f64).sqrt(), rng)
        };
        ResidualParams {
            w,
            b: Tensor::zeros(&[dim]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ResidualParams {
            w: self.w.zeros_like(),
            b: self.b.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct TreeNode {
    node: NodeRef,
    depth: usize,
    children: Vec<usize>,
}

/// A sampled K-hop neighborhood, nodes in breadth-first order (children
/// always follow their parent).
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTree {
    nodes: Vec<TreeNode>,
    hops: usize,
}

impl SampledTree {
    fn expand<F>(root: NodeRef, hops: usize, mut sample: F) -> Self
    where
        F: FnMut(NodeRef) -> Option<Vec<NodeRef>>,
    {
        let mut nodes = vec![TreeNode {
            node: root,
            depth: 0,
            children: Vec::new(),
        }];
        let mut i = 0;
        while i < nodes.len() {
            if nodes[i].depth < hops {
                // isolated nodes keep no children
                if let Some(nbrs) = sample(nodes[i].node) {
                    let depth = nodes[i].depth + 1;
                    let first = nodes.len();
                    nodes.extend(nbrs.into_iter().map(|node| TreeNode {
                        node,
                        depth,
                        children: Vec::new(),
                    }));
                    nodes[i].children = (first..nodes.len()).collect();
                }
            }
            i += 1;
        }
        SampledTree { nodes, hops }
    }

    /// Item-rooted tree alternating item/user levels, uniform sampling.
    pub fn bipartite<R: Rng + ?Sized>(
        graph: &BipartiteGraph,
        item: usize,
        hops: usize,
        samples: usize,
        rng: &mut R,
    ) -> Self {
        SampledTree::expand(NodeRef::Item(item), hops, |node| {
            let ids = sample_neighbors_uniform(graph, node, samples, rng).ok()?;
            Some(match node {
                NodeRef::Item(_) => ids.into_iter().map(NodeRef::User).collect(),
                NodeRef::User(_) => ids.into_iter().map(NodeRef::Item).collect(),
            })
        })
    }

    /// Item tree over the co-occurrence graph, weight-proportional sampling.
    pub fn cooccurrence<R: Rng + ?Sized>(
        graph: &CoocGraph,
        item: usize,
        hops: usize,
        samples: usize,
        rng: &mut R,
    ) -> Self {
        SampledTree::expand(NodeRef::Item(item), hops, |node| {
            let ids = sample_neighbors_importance(graph, node.id(), samples, rng).ok()?;
            Some(ids.into_iter().map(NodeRef::Item).collect())
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn hops(&self) -> usize {
        self.hops
    }

    pub fn root_children(&self) -> Vec<NodeRef> {
        self.nodes[0]
            .children
            .iter()
            .map(|&c| self.nodes[c].node)
            .collect()
    }
}

/// Cached activations of one tree pass.
#[derive(Debug, Clone)]
pub struct TreePass {
    /// `reps[node][k]` for `k ≤ hops − depth(node)`.
    reps: Vec<Vec<Vec<f64>>>,
    /// `(pooled children, z)` per node per layer `k ≥ 1`; `None` when isolated.
    neighborhoods: Vec<Vec<Option<(Vec<f64>, Vec<f64>)>>>,
}

impl TreePass {
    pub fn output(&self) -> &[f64] {
        self.reps[0].last().expect("root always has a layer-0 representation")
    }
}

pub fn tree_forward<P: LayerStack>(
    tree: &SampledTree,
    tables: &EmbeddingTables,
    params: &P,
    act: Activation,
) -> TreePass {
    let hops = tree.hops;
    let dim = tables.dim();
    let mut reps: Vec<Vec<Vec<f64>>> = tree
        .nodes
        .iter()
        .map(|n| vec![tables.row(n.node).to_vec()])
        .collect();
    let mut neighborhoods: Vec<Vec<Option<(Vec<f64>, Vec<f64>)>>> =
        tree.nodes.iter().map(|_| vec![None]).collect();
    for k in 1..=hops {
        for (i, n) in tree.nodes.iter().enumerate() {
            if n.depth > hops - k {
                continue;
            }
            let w = params.weights(k - 1, n.node);
            let hood = if n.children.is_empty() {
                None
            } else {
                let kids: Vec<&[f64]> = n.children.iter().map(|&c| reps[c][k - 1].as_slice()).collect();
                let pooled = numerics::mean_pool(&kids);
                let mut z = affine(&w.agg_w, &pooled, &w.agg_b.data);
                act.forward(&mut z);
                Some((pooled, z))
            };
            let zero = vec![0.0; dim];
            let z = hood.as_ref().map(|(_, z)| z.as_slice()).unwrap_or(&zero);
            let input = concat(&reps[i][k - 1], z);
            let mut g = affine(&w.tr_w, &input, &w.tr_b.data);
            act.forward(&mut g);
            reps[i].push(g);
            neighborhoods[i].push(hood);
        }
    }
    TreePass {
        reps,
        neighborhoods,
    }
}

/// Backpropagates `grad_out` (gradient of the root output) through a tree
/// pass, accumulating into `grads` and `emb`.
pub fn tree_backward<P: LayerStack>(
    tree: &SampledTree,
    pass: &TreePass,
    params: &P,
    act: Activation,
    grad_out: &[f64],
    grads: &mut P,
    emb: &mut EmbeddingGrads,
) {
    let hops = tree.hops;
    let dim = grad_out.len();
    let mut g_reps: Vec<Vec<Vec<f64>>> = pass
        .reps
        .iter()
        .map(|levels| vec![vec![0.0; dim]; levels.len()])
        .collect();
    g_reps[0][hops].copy_from_slice(grad_out);
    for k in (1..=hops).rev() {
        for (i, n) in tree.nodes.iter().enumerate() {
            if n.depth > hops - k {
                continue;
            }
            let w = params.weights(k - 1, n.node);
            let gw = grads.weights_mut(k - 1, n.node);
            let g_pre = act.backward(&pass.reps[i][k], &g_reps[i][k]);
            let hood = pass.neighborhoods[i][k].as_ref();
            let zero = vec![0.0; dim];
            let z = hood.map(|(_, z)| z.as_slice()).unwrap_or(&zero);
            let input = concat(&pass.reps[i][k - 1], z);
            let g_in = affine_backward(&w.tr_w, &input, &g_pre, &mut gw.tr_w, Some(&mut gw.tr_b.data));
            numerics::add_into(&mut g_reps[i][k - 1], &g_in[..dim]);
            if let Some((pooled, z)) = hood {
                let g_zpre = act.backward(z, &g_in[dim..]);
                let g_pool =
                    affine_backward(&w.agg_w, pooled, &g_zpre, &mut gw.agg_w, Some(&mut gw.agg_b.data));
                let share = numerics::mean_pool_backward(n.children.len(), &g_pool);
                for &c in &n.children {
                    numerics::add_into(&mut g_reps[c][k - 1], &share);
                }
            }
        }
    }
    for (i, n) in tree.nodes.iter().enumerate() {
        if g_reps[i][0].iter().any(|&g| g != 0.0) {
            emb.add(n.node, &g_reps[i][0]);
        }
    }
}

/// Bipartite-graph convolution outputs for `items`, trees drawn sequentially from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn gcnb_embed<R: Rng + ?Sized>(
    items: &[usize],
    graph: &BipartiteGraph,
    tables: &EmbeddingTables,
    params: &GcnBParams,
    hops: usize,
    samples: usize,
    act: Activation,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    items
        .iter()
        .map(|&v| {
            let tree = SampledTree::bipartite(graph, v, hops, samples, rng);
            tree_forward(&tree, tables, params, act).output().to_vec()
        })
        .collect()
}

/// Co-occurrence-graph convolution outputs for `items`.
#[allow(clippy::too_many_arguments)]
pub fn gcnc_embed<R: Rng + ?Sized>(
    items: &[usize],
    graph: &CoocGraph,
    tables: &EmbeddingTables,
    params: &GcnCParams,
    hops: usize,
    samples: usize,
    act: Activation,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    items
        .iter()
        .map(|&v| {
            let tree = SampledTree::cooccurrence(graph, v, hops, samples, rng);
            tree_forward(&tree, tables, params, act).output().to_vec()
        })
        .collect()
}

/// `r = σ(W_r e + b_r)` for one embedding.
pub fn residual_one(e: &[f64], params: &ResidualParams, act: Activation) -> Vec<f64> {
    let mut r = affine(&params.w, e, &params.b.data);
    act.forward(&mut r);
    r
}

/// Returns the gradient with respect to `e`.
pub fn residual_backward(
    e: &[f64],
    r: &[f64],
    params: &ResidualParams,
    act: Activation,
    grad_out: &[f64],
    grads: &mut ResidualParams,
) -> Vec<f64> {
    let g_pre = act.backward(r, grad_out);
    affine_backward(&params.w, e, &g_pre, &mut grads.w, Some(&mut grads.b.data))
}

pub fn residual(
    items: &[usize],
    tables: &EmbeddingTables,
    params: &ResidualParams,
    act: Activation,
) -> Vec<Vec<f64>> {
    items
        .iter()
        .map(|&v| residual_one(tables.items.row(v), params, act))
        .collect()
}

/// Element-wise sum of the three branch outputs.
pub fn fuse(g: &[f64], c: &[f64], r: &[f64]) -> Result<Vec<f64>> {
    if g.len() != c.len() || g.len() != r.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![g.len(); 3],
            actual: vec![g.len(), c.len(), r.len()],
        });
    }
    Ok(g.iter().zip(c).zip(r).map(|((a, b), c)| a + b + c).collect())
}

/// Raw item embeddings, used in place of both graph branches by the
/// factorization ablation.
pub fn mf_inter_embed(items: &[usize], tables: &EmbeddingTables) -> Vec<Vec<f64>> {
    items.iter().map(|&v| tables.items.row(v).to_vec()).collect()
}

/// Auxiliary factorization objective: mean binary cross-entropy of
/// `sigmoid(e_u · e_v)` against `labels`. Gradients go to `emb`, scaled by `weight`.
pub fn mf_auxiliary_loss(
    user: usize,
    candidates: &[usize],
    labels: &[f64],
    tables: &EmbeddingTables,
    weight: f64,
    emb: &mut EmbeddingGrads,
) -> f64 {
    let e_u = tables.users.row(user);
    let n = candidates.len() as f64;
    let mut loss = 0.0;
    let mut g_user = vec![0.0; e_u.len()];
    for (&v, &y) in candidates.iter().zip(labels) {
        let e_v = tables.items.row(v);
        let logit = numerics::dot(e_u, e_v);
        let p = numerics::sigmoid(logit).clamp(crate::decoder_loss::PROB_EPS, 1.0 - crate::decoder_loss::PROB_EPS);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        // d/dlogit of BCE(sigmoid) is p − y (clamp inactive in practice)
        let g = weight * (numerics::sigmoid(logit) - y) / n;
        let (gu, gv) = numerics::dot_backward(e_u, e_v, g);
        numerics::add_into(&mut g_user, &gu);
        emb.add(NodeRef::Item(v), &gv);
    }
    emb.add(NodeRef::User(user), &g_user);
    weight * loss / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SplitDataset, UserSplit};
    use crate::graphs::{build_bipartite, build_cooccurrence};
    use crate::numerics::grad_check;
    use crate::seed;

    fn toy_split() -> SplitDataset {
        let seqs = [vec![0, 1, 2], vec![1, 2], vec![2, 0, 0]];
        SplitDataset::new(
            4,
            seqs.iter()
                .map(|s| UserSplit {
                    train: s.clone(),
                    ..Default::default()
                })
                .collect(),
        )
    }

    fn tables(dim: usize, items: usize, users: usize, s: u64) -> EmbeddingTables {
        let mut rng = seed::rng(s, &[]);
        EmbeddingTables {
            items: Tensor::uniform(&[items, dim], 1.0, &mut rng),
            users: Tensor::uniform(&[users, dim], 1.0, &mut rng),
        }
    }

    #[test]
    fn single_user_neighbor_closed_form() {
        // item 0 has only user 0; identity-padded weights, identity activation
        let split = SplitDataset::new(
            2,
            vec![UserSplit {
                train: vec![0],
                ..Default::default()
            }],
        );
        let graph = build_bipartite(&split);
        let d = 2;
        let t = EmbeddingTables {
            items: Tensor::from_vec(&[2, d], vec![1.0, 2.0, 0.0, 0.0]).unwrap(),
            users: Tensor::from_vec(&[1, d], vec![3.0, -4.0]).unwrap(),
        };
        let mut params = GcnBParams::init(d, 1, &mut seed::rng(0, &[]));
        let layer = &mut params.layers[0].item;
        layer.agg_w = Tensor::identity(d);
        layer.agg_b.fill(0.0);
        // P = [I | I]: g = e_v + z
        layer.tr_w = Tensor::from_vec(&[d, 2 * d], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        layer.tr_b.fill(0.0);
        let out = gcnb_embed(&[0], &graph, &t, &params, 1, 10, Activation::Identity, &mut seed::rng(1, &[]));
        assert_eq!(out[0], [4.0, -2.0]);

        // hand evaluation with relu and bias: z = relu(Q e_u + q), g = relu(P[e_v; z] + p)
        let layer = &mut params.layers[0].item;
        layer.agg_b = Tensor::from_vec(&[d], vec![0.5, 0.5]).unwrap();
        layer.tr_b = Tensor::from_vec(&[d], vec![-1.0, 0.0]).unwrap();
        let out = gcnb_embed(&[0], &graph, &t, &params, 1, 10, Activation::Relu, &mut seed::rng(1, &[]));
        // z = relu([3.5, -3.5]) = [3.5, 0]; g = relu([1+3.5-1, 2+0+0]) = [3.5, 2]
        assert_eq!(out[0], [3.5, 2.0]);
    }

    #[test]
    fn isolated_item_uses_zero_neighborhood() {
        let graph = build_bipartite(&toy_split());
        let t = tables(3, 4, 3, 2);
        let params = GcnBParams::init(3, 1, &mut seed::rng(3, &[]));
        let out = gcnb_embed(&[3], &graph, &t, &params, 1, 10, Activation::Relu, &mut seed::rng(4, &[]));
        let w = &params.layers[0].item;
        let mut expect = affine(&w.tr_w, &concat(t.items.row(3), &[0.0; 3]), &w.tr_b.data);
        Activation::Relu.forward(&mut expect);
        assert_eq!(out[0], expect);
    }

    #[test]
    fn zero_hops_returns_raw_embeddings() {
        let graph = build_bipartite(&toy_split());
        let cooc = build_cooccurrence(&toy_split());
        let t = tables(3, 4, 3, 2);
        let pb = GcnBParams::init(3, 2, &mut seed::rng(3, &[]));
        let pc = GcnCParams::init(3, 1, &mut seed::rng(3, &[]));
        let mut rng = seed::rng(0, &[]);
        let b = gcnb_embed(&[0, 2], &graph, &t, &pb, 0, 10, Activation::Relu, &mut rng);
        let c = gcnc_embed(&[0, 2], &cooc, &t, &pc, 0, 10, Activation::Relu, &mut rng);
        assert_eq!(b, mf_inter_embed(&[0, 2], &t));
        assert_eq!(c, mf_inter_embed(&[0, 2], &t));
    }

    #[test]
    fn single_cooc_neighbor_matches_uniform_tree_shape() {
        let cooc = CoocGraph::from_adjacency(vec![vec![(1, 9)], vec![(0, 9)]]);
        let tree = SampledTree::cooccurrence(&cooc, 0, 1, 10, &mut seed::rng(0, &[]));
        assert_eq!(tree.root_children(), vec![NodeRef::Item(1); 10]);
        let t = tables(3, 2, 1, 5);
        let pc = GcnCParams::init(3, 1, &mut seed::rng(3, &[]));
        let a = gcnc_embed(&[0], &cooc, &t, &pc, 1, 10, Activation::Relu, &mut seed::rng(1, &[]));
        let b = gcnc_embed(&[0], &cooc, &t, &pc, 1, 10, Activation::Relu, &mut seed::rng(2, &[]));
        assert_eq!(a, b);
        // mean over ten copies of e_1 is e_1
        let w = &pc.layers[0];
        let mut z = affine(&w.agg_w, t.items.row(1), &w.agg_b.data);
        Activation::Relu.forward(&mut z);
        let mut g = affine(&w.tr_w, &concat(t.items.row(0), &z), &w.tr_b.data);
        Activation::Relu.forward(&mut g);
        for (x, y) in a[0].iter().zip(&g) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn trees_are_seed_deterministic() {
        let graph = build_bipartite(&toy_split());
        let a = SampledTree::bipartite(&graph, 1, 2, 10, &mut seed::rng(9, &[1]));
        let b = SampledTree::bipartite(&graph, 1, 2, 10, &mut seed::rng(9, &[1]));
        assert_eq!(a, b);
        // 1 + 10 users + 100 items
        assert_eq!(a.len(), 111);
    }

    /// Flattens GCN weights so a closure can perturb them.
    fn flatten_b(p: &GcnBParams) -> Vec<f64> {
        p.layers
            .iter()
            .flat_map(|l| l.item.tensors().into_iter().chain(l.user.tensors()))
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    fn unflatten_b(p: &mut GcnBParams, flat: &[f64]) {
        let mut off = 0;
        for l in &mut p.layers {
            for t in l.item.tensors_mut().into_iter().chain(l.user.tensors_mut()) {
                let n = t.len();
                t.data.copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
    }

    #[test]
    fn gcnb_gradient_check_on_toy_graph() {
        let graph = build_bipartite(&toy_split());
        let dim = 3;
        let base_t = tables(dim, 4, 3, 21);
        let base_p = GcnBParams::init(dim, 2, &mut seed::rng(22, &[]));
        let upstream: Vec<f64> = vec![0.7, -1.3, 0.4];
        let tree = SampledTree::bipartite(&graph, 1, 2, 10, &mut seed::rng(23, &[]));
        let n_w = flatten_b(&base_p).len();
        let mut theta = flatten_b(&base_p);
        theta.extend(&base_t.items.data);
        theta.extend(&base_t.users.data);
        let f = |x: &[f64]| {
            let mut p = base_p.clone();
            unflatten_b(&mut p, &x[..n_w]);
            let mut t = base_t.clone();
            let ni = t.items.len();
            t.items.data.copy_from_slice(&x[n_w..n_w + ni]);
            t.users.data.copy_from_slice(&x[n_w + ni..]);
            let pass = tree_forward(&tree, &t, &p, Activation::Tanh);
            let loss = numerics::dot(pass.output(), &upstream);
            let mut g = p.zeros_like();
            let mut e = EmbeddingGrads::default();
            tree_backward(&tree, &pass, &p, Activation::Tanh, &upstream, &mut g, &mut e);
            let (gi, gu) = e.to_dense(4, 3, dim);
            let mut grad = flatten_b(&g);
            grad.extend(gi.data);
            grad.extend(gu.data);
            (loss, grad)
        };
        assert!(grad_check(f, &theta, 1e-5) < 1e-4);
    }

    #[test]
    fn gcnc_gradient_check_on_toy_graph() {
        let cooc = build_cooccurrence(&toy_split());
        let dim = 3;
        let base_t = tables(dim, 4, 3, 31);
        let base_p = GcnCParams::init(dim, 1, &mut seed::rng(32, &[]));
        let upstream = vec![1.1, 0.2, -0.9];
        let tree = SampledTree::cooccurrence(&cooc, 2, 1, 10, &mut seed::rng(33, &[]));
        let flat = |p: &GcnCParams| -> Vec<f64> {
            p.layers.iter().flat_map(|l| l.tensors()).flat_map(|t| t.data.clone()).collect()
        };
        let n_w = flat(&base_p).len();
        let mut theta = flat(&base_p);
        theta.extend(&base_t.items.data);
        let f = |x: &[f64]| {
            let mut p = base_p.clone();
            let mut off = 0;
            for l in &mut p.layers {
                for t in l.tensors_mut() {
                    let n = t.len();
                    t.data.copy_from_slice(&x[off..off + n]);
                    off += n;
                }
            }
            let mut t = base_t.clone();
            t.items.data.copy_from_slice(&x[n_w..]);
            let pass = tree_forward(&tree, &t, &p, Activation::Sigmoid);
            let loss = numerics::dot(pass.output(), &upstream);
            let mut g = p.zeros_like();
            let mut e = EmbeddingGrads::default();
            tree_backward(&tree, &pass, &p, Activation::Sigmoid, &upstream, &mut g, &mut e);
            let (gi, _) = e.to_dense(4, 3, dim);
            let mut grad = flat(&g);
            grad.extend(gi.data);
            (loss, grad)
        };
        assert!(grad_check(f, &theta, 1e-5) < 1e-4);
    }

    #[test]
    fn residual_cases() {
        let t = tables(3, 2, 1, 40);
        let id = ResidualParams::init(3, true, &mut seed::rng(0, &[]));
        assert_eq!(residual(&[1], &t, &id, Activation::Identity)[0], t.items.row(1));
        let mut p = ResidualParams::init(3, false, &mut seed::rng(0, &[]));
        p.b = Tensor::from_vec(&[3], vec![-1.0, 0.5, 2.0]).unwrap();
        assert_eq!(residual_one(&[0.0; 3], &p, Activation::Relu), [0.0, 0.5, 2.0]);

        let e = vec![0.3, -0.2, 0.9];
        let up = vec![1.0, 2.0, -1.0];
        let mut theta = p.w.data.clone();
        theta.extend(&p.b.data);
        theta.extend(&e);
        let f = |x: &[f64]| {
            let mut q = p.clone();
            q.w.data.copy_from_slice(&x[..9]);
            q.b.data.copy_from_slice(&x[9..12]);
            let e = &x[12..];
            let r = residual_one(e, &q, Activation::Tanh);
            let mut g = q.zeros_like();
            let ge = residual_backward(e, &r, &q, Activation::Tanh, &up, &mut g);
            let mut grad = g.w.data;
            grad.extend(g.b.data);
            grad.extend(ge);
            (numerics::dot(&r, &up), grad)
        };
        assert!(grad_check(f, &theta, 1e-5) < 1e-4);
    }

    #[test]
    fn fuse_cases() {
        let g = [1.0, -2.0];
        assert_eq!(fuse(&g, &[0.0; 2], &[0.0; 2]).unwrap(), g);
        assert_eq!(fuse(&[1.0; 3], &[1.0; 3], &[1.0; 3]).unwrap(), [3.0; 3]);
        let (a, b, c) = ([0.25, 0.5], [0.75, -0.5], [5.0, 6.0]);
        assert_eq!(fuse(&a, &b, &c).unwrap(), fuse(&c, &a, &b).unwrap());
        assert!(fuse(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn mf_auxiliary_loss_decreases_after_one_adam_step() {
        use crate::numerics::{AdamConfig, AdamState};
        let mut t = tables(4, 3, 2, 50);
        let loss_at = |t: &EmbeddingTables| {
            let mut e = EmbeddingGrads::default();
            let l = mf_auxiliary_loss(1, &[2], &[1.0], t, 1.0, &mut e);
            (l, e)
        };
        let (before, e) = loss_at(&t);
        let (gi, gu) = e.to_dense(3, 2, 4);
        let mut adam = AdamState::new(
            AdamConfig {
                lr: 0.01,
                ..Default::default()
            },
            &[&t.items, &t.users],
        );
        adam.step(&mut [&mut t.items, &mut t.users], &[&gi, &gu]).unwrap();
        let (after, _) = loss_at(&t);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn mf_auxiliary_gradient() {
        let base = tables(3, 4, 2, 60);
        let mut theta = base.items.data.clone();
        theta.extend(&base.users.data);
        let f = |x: &[f64]| {
            let mut t = base.clone();
            t.items.data.copy_from_slice(&x[..12]);
            t.users.data.copy_from_slice(&x[12..]);
            let mut e = EmbeddingGrads::default();
            let l = mf_auxiliary_loss(0, &[1, 3, 0], &[1.0, 0.0, 0.0], &t, 1.0, &mut e);
            let (gi, gu) = e.to_dense(4, 2, 3);
            let mut g = gi.data;
            g.extend(gu.data);
            (l, g)
        };
        assert!(grad_check(f, &theta, 1e-5) < 1e-4);
    }
}
