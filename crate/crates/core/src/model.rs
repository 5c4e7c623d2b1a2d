//! The assembled network: inter-sequence encoder → intra-sequence encoder →
//! decoder, with batched forward/backward.
//!
//! Sampled neighborhoods depend only on `(sample_seed, item)`, so every
//! occurrence of an item within a batch shares one tree and evaluation with a
//! fixed seed is independent of batch composition. Work is split into
//! fixed-size chunks whose partial gradients are summed in chunk order, which
//! keeps results bitwise identical for any thread count.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use rayon::prelude::*;

use crate::config::{TrainConfig, Wiring};
use crate::data::TrainingInstance;
use crate::decoder_loss;
use crate::error::{Error, Result};
use crate::graphs::{build_bipartite, build_cooccurrence, BipartiteGraph, CoocGraph, NodeRef};
use crate::inter_encoder::{
    self, tree_backward, tree_forward, EmbeddingGrads, EmbeddingTables, GcnBParams, GcnCParams, ResidualParams,
    SampledTree, TreePass,
};
use crate::intra_encoder::{intra_backward, intra_forward, IntraParams};
use crate::numerics::{self, Tensor};
use crate::seed::{self, tag};

const INSTANCE_CHUNK: usize = 16;
const ITEM_CHUNK: usize = 32;

/// Both graphs, built from the same train split.
#[derive(Debug, Clone, PartialEq)]
pub struct Graphs {
    pub bipartite: BipartiteGraph,
    pub cooc: CoocGraph,
}

impl Graphs {
    pub fn build(split: &crate::data::SplitDataset) -> Self {
        Graphs {
            bipartite: build_bipartite(split),
            cooc: build_cooccurrence(split),
        }
    }
}

/// Every trainable tensor except the embedding tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub gcn_b: GcnBParams,
    pub gcn_c: GcnCParams,
    pub residual: ResidualParams,
    pub intra: IntraParams,
}

impl Weights {
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (k, l) in self.gcn_b.layers.iter().enumerate() {
            for (side, w) in [("item", &l.item), ("user", &l.user)] {
                for (n, t) in ["agg_w", "agg_b", "tr_w", "tr_b"].iter().zip(w.tensors()) {
                    out.push((format!("gcn_b.{k}.{side}.{n}"), t));
                }
            }
        }
        for (k, w) in self.gcn_c.layers.iter().enumerate() {
            for (n, t) in ["agg_w", "agg_b", "tr_w", "tr_b"].iter().zip(w.tensors()) {
                out.push((format!("gcn_c.{k}.{n}"), t));
            }
        }
        out.push(("residual.w".into(), &self.residual.w));
        out.push(("residual.b".into(), &self.residual.b));
        let gru = ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_c", "u_c", "b_c"];
        for (n, t) in gru.iter().zip(self.intra.gru.tensors()) {
            out.push((format!("gru.{n}"), t));
        }
        for (n, t) in ["w2", "b2", "w1", "b1"].iter().zip(self.intra.attention.tensors()) {
            out.push((format!("attention.{n}"), t));
        }
        out.push(("combine.w_h".into(), &self.intra.combine.w_h));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.gcn_b.layers {
            out.extend(l.item.tensors_mut());
            out.extend(l.user.tensors_mut());
        }
        for w in &mut self.gcn_c.layers {
            out.extend(w.tensors_mut());
        }
        out.push(&mut self.residual.w);
        out.push(&mut self.residual.b);
        out.extend(self.intra.gru.tensors_mut());
        out.extend(self.intra.attention.tensors_mut());
        out.push(&mut self.intra.combine.w_h);
        out
    }

    pub fn zeros_like(&self) -> Self {
        Weights {
            gcn_b: self.gcn_b.zeros_like(),
            gcn_c: self.gcn_c.zeros_like(),
            residual: self.residual.zeros_like(),
            intra: self.intra.zeros_like(),
        }
    }

    pub fn add_assign(&mut self, other: &Weights) {
        let theirs: Vec<&Tensor> = other.named().into_iter().map(|(_, t)| t).collect();
        for (a, b) in self.tensors_mut().into_iter().zip(theirs) {
            a.add_assign(b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tables: EmbeddingTables,
    pub weights: Weights,
}

impl ModelParams {
    /// Uniform(−1/√d, 1/√d) for matrices and embeddings, zero biases.
    pub fn init(config: &TrainConfig, num_users: usize, num_items: usize) -> Self {
        let dim = config.dim;
        let bound = 1.0 / (dim as f64).sqrt();
        let mut rng = seed::rng(config.seed, &[tag::INIT]);
        let tables = EmbeddingTables {
            items: Tensor::uniform(&[num_items, dim], bound, &mut rng),
            users: Tensor::uniform(&[num_users, dim], bound, &mut rng),
        };
        let gcn_b = GcnBParams::init(dim, config.gcn_b_layers, &mut rng);
        let gcn_c = GcnCParams::init(dim, config.gcn_c_layers, &mut rng);
        let residual = ResidualParams::init(dim, config.variant.wiring().identity_residual_init, &mut rng);
        let intra = IntraParams::init(dim, &mut rng);
        ModelParams {
            tables,
            weights: Weights {
                gcn_b,
                gcn_c,
                residual,
                intra,
            },
        }
    }

    /// All tensors with stable names; embeddings first.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("emb.items".to_string(), &self.tables.items),
            ("emb.users".to_string(), &self.tables.users),
        ];
        out.extend(self.weights.named());
        out
    }

    /// Same order as [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tables.items, &mut self.tables.users];
        out.extend(self.weights.tensors_mut());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub embeddings: EmbeddingGrads,
    pub weights: Weights,
}

impl ModelGrads {
    pub fn zeros_for(params: &ModelParams) -> Self {
        ModelGrads {
            embeddings: EmbeddingGrads::default(),
            weights: params.weights.zeros_like(),
        }
    }

    /// Dense gradients aligned with [`ModelParams::named_tensors`].
    pub fn dense(&self, params: &ModelParams) -> Vec<Tensor> {
        let (items, users) = self.embeddings.to_dense(
            params.tables.items.rows(),
            params.tables.users.rows(),
            params.tables.dim(),
        );
        let mut out = vec![items, users];
        out.extend(self.weights.named().into_iter().map(|(_, t)| t.clone()));
        out
    }
}

/// Branch outputs for one item.
#[derive(Debug, Clone)]
pub struct ItemPass {
    pub item: usize,
    bipartite: Option<(SampledTree, TreePass)>,
    cooc: Option<(SampledTree, TreePass)>,
    residual: Vec<f64>,
    pub fused: Vec<f64>,
}

impl ItemPass {
    /// `(g, c, r)`: zero vectors for disabled branches. Under the
    /// factorization ablation `g` holds the raw embedding.
    pub fn branches(&self, tables: &EmbeddingTables, wiring: Wiring) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let dim = self.fused.len();
        let g = match (&self.bipartite, wiring.mf_branch) {
            (Some((_, p)), _) => p.output().to_vec(),
            (None, true) => tables.items.row(self.item).to_vec(),
            (None, false) => vec![0.0; dim],
        };
        let c = self
            .cooc
            .as_ref()
            .map(|(_, p)| p.output().to_vec())
            .unwrap_or_else(|| vec![0.0; dim]);
        (g, c, self.residual.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLoss {
    /// Mean cross-entropy over all scored entries.
    pub main: f64,
    /// Mean auxiliary factorization loss (factorization ablation only).
    pub auxiliary: f64,
}

impl BatchLoss {
    pub fn total(&self) -> f64 {
        self.main + self.auxiliary
    }
}

/// Parameters plus the configuration that fixes their topology.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub params: ModelParams,
}

struct InstanceChunk {
    loss: BatchLoss,
    intra: IntraParams,
    embeddings: EmbeddingGrads,
    item_grads: BTreeMap<usize, Vec<f64>>,
}

impl Model {
    pub fn new(config: TrainConfig, num_users: usize, num_items: usize) -> Self {
        let params = ModelParams::init(&config, num_users, num_items);
        Model { config, params }
    }

    pub fn wiring(&self) -> Wiring {
        self.config.variant.wiring()
    }

    pub fn num_items(&self) -> usize {
        self.params.tables.items.rows()
    }

    pub fn num_users(&self) -> usize {
        self.params.tables.users.rows()
    }

    /// Fused representation `x_v` and the cached branch passes.
    pub fn encode_item(&self, graphs: &Graphs, item: usize, sample_seed: u64) -> ItemPass {
        let wiring = self.wiring();
        let c = &self.config;
        let tables = &self.params.tables;
        let w = &self.params.weights;
        let bipartite = wiring.bipartite.then(|| {
            let mut rng = seed::rng(sample_seed, &[tag::BIPARTITE, item as u64]);
            let tree = SampledTree::bipartite(&graphs.bipartite, item, c.gcn_b_layers, c.neighbor_samples, &mut rng);
            let pass = tree_forward(&tree, tables, &w.gcn_b, c.gcn_activation);
            (tree, pass)
        });
        let cooc = wiring.cooc.then(|| {
            let mut rng = seed::rng(sample_seed, &[tag::COOC, item as u64]);
            let tree = SampledTree::cooccurrence(&graphs.cooc, item, c.gcn_c_layers, c.neighbor_samples, &mut rng);
            let pass = tree_forward(&tree, tables, &w.gcn_c, c.gcn_activation);
            (tree, pass)
        });
        let residual = inter_encoder::residual_one(tables.items.row(item), &w.residual, c.residual_activation);
        let dim = c.dim;
        let zero = vec![0.0; dim];
        let g: &[f64] = match (&bipartite, wiring.mf_branch) {
            (Some((_, p)), _) => p.output(),
            (None, true) => tables.items.row(item),
            (None, false) => &zero,
        };
        let cv: &[f64] = cooc.as_ref().map(|(_, p)| p.output()).unwrap_or(&zero);
        let fused = inter_encoder::fuse(g, cv, &residual).expect("branch widths are all d");
        ItemPass {
            item,
            bipartite,
            cooc,
            residual,
            fused,
        }
    }

    fn backward_item(&self, pass: &ItemPass, grad: &[f64], weights: &mut InterWeights, emb: &mut EmbeddingGrads) {
        let c = &self.config;
        let tables = &self.params.tables;
        let w = &self.params.weights;
        if let Some((tree, tp)) = &pass.bipartite {
            tree_backward(tree, tp, &w.gcn_b, c.gcn_activation, grad, &mut weights.gcn_b, emb);
        } else if self.wiring().mf_branch {
            emb.add(NodeRef::Item(pass.item), grad);
        }
        if let Some((tree, tp)) = &pass.cooc {
            tree_backward(tree, tp, &w.gcn_c, c.gcn_activation, grad, &mut weights.gcn_c, emb);
        }
        let e = tables.items.row(pass.item);
        let g_e = inter_encoder::residual_backward(
            e,
            &pass.residual,
            &w.residual,
            c.residual_activation,
            grad,
            &mut weights.residual,
        );
        emb.add(NodeRef::Item(pass.item), &g_e);
    }

    fn encode_items(&self, graphs: &Graphs, items: &[usize], sample_seed: u64) -> Vec<ItemPass> {
        items
            .par_iter()
            .map(|&v| self.encode_item(graphs, v, sample_seed))
            .collect()
    }

    /// Interest vector `s_u` for a user and context.
    pub fn interest(&self, graphs: &Graphs, user: usize, context: &[usize], sample_seed: u64) -> Vec<f64> {
        let xs: Vec<Vec<f64>> = context
            .iter()
            .map(|&v| self.encode_item(graphs, v, sample_seed).fused)
            .collect();
        self.interest_from_fused(user, &xs)
    }

    fn interest_from_fused(&self, user: usize, xs: &[Vec<f64>]) -> Vec<f64> {
        intra_forward(
            self.params.tables.users.row(user),
            xs,
            &self.params.weights.intra,
            self.wiring().attention,
            self.config.attention_activation,
        )
        .interest
    }

    /// Interest vectors for many instances, sharing item encodings.
    pub fn interests(&self, graphs: &Graphs, instances: &[TrainingInstance], sample_seed: u64) -> Vec<Vec<f64>> {
        let items: Vec<usize> = instances
            .iter()
            .flat_map(|x| x.context.iter().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let passes = self.encode_items(graphs, &items, sample_seed);
        let pos: HashMap<usize, usize> = items.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        instances
            .par_iter()
            .map(|x| {
                let xs: Vec<Vec<f64>> = x.context.iter().map(|v| passes[pos[v]].fused.clone()).collect();
                self.interest_from_fused(x.user, &xs)
            })
            .collect()
    }

    /// Raw scores `s · e_v` for the whole catalogue.
    pub fn score_all(&self, interest: &[f64]) -> Vec<f64> {
        numerics::matvec(&self.params.tables.items, interest)
    }

    /// Mean loss over `batch` and its gradient with respect to every parameter.
    pub fn batch_loss_and_grads(
        &self,
        graphs: &Graphs,
        batch: &[TrainingInstance],
        sample_seed: u64,
    ) -> Result<(BatchLoss, ModelGrads)> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let wiring = self.wiring();
        let c = &self.config;
        let tables = &self.params.tables;
        let intra_params = &self.params.weights.intra;

        let items: Vec<usize> = batch
            .iter()
            .flat_map(|x| x.context.iter().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let passes = self.encode_items(graphs, &items, sample_seed);
        let pos: HashMap<usize, usize> = items.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let scale = 1.0 / batch.len() as f64;

        let chunks: Vec<Result<InstanceChunk>> = batch
            .par_chunks(INSTANCE_CHUNK)
            .map(|chunk| {
                let mut out = InstanceChunk {
                    loss: BatchLoss::default(),
                    intra: intra_params.zeros_like(),
                    embeddings: EmbeddingGrads::default(),
                    item_grads: BTreeMap::new(),
                };
                for inst in chunk {
                    let xs: Vec<Vec<f64>> = inst.context.iter().map(|v| passes[pos[v]].fused.clone()).collect();
                    let e_u = tables.users.row(inst.user);
                    let ipass = intra_forward(e_u, &xs, intra_params, wiring.attention, c.attention_activation);
                    let (loss, dec) = decoder_loss::instance_loss(
                        &ipass.interest,
                        &inst.positives,
                        &inst.negatives,
                        &tables.items,
                        scale,
                    )?;
                    out.loss.main += loss * scale;
                    for (v, g) in &dec.items {
                        out.embeddings.add(NodeRef::Item(*v), g);
                    }
                    let (g_user, g_xs) = intra_backward(
                        &xs,
                        &ipass,
                        &dec.interest,
                        intra_params,
                        c.attention_activation,
                        &mut out.intra,
                    );
                    if wiring.attention {
                        out.embeddings.add(NodeRef::User(inst.user), &g_user);
                    }
                    for (v, g) in inst.context.iter().zip(&g_xs) {
                        let p = pos[v];
                        match out.item_grads.get_mut(&p) {
                            Some(acc) => numerics::add_into(acc, g),
                            None => {
                                out.item_grads.insert(p, g.clone());
                            }
                        }
                    }
                    if wiring.mf_branch {
                        let candidates = inst.candidates();
                        let labels: Vec<f64> = (0..candidates.len())
                            .map(|i| if i < inst.positives.len() { 1.0 } else { 0.0 })
                            .collect();
                        out.loss.auxiliary += inter_encoder::mf_auxiliary_loss(
                            inst.user,
                            &candidates,
                            &labels,
                            tables,
                            scale,
                            &mut out.embeddings,
                        );
                    }
                }
                Ok(out)
            })
            .collect();

        let mut grads = ModelGrads::zeros_for(&self.params);
        let mut loss = BatchLoss::default();
        let mut item_grads: Vec<Option<Vec<f64>>> = vec![None; items.len()];
        for chunk in chunks {
            let chunk = chunk?;
            loss.main += chunk.loss.main;
            loss.auxiliary += chunk.loss.auxiliary;
            grads.weights.intra.add_assign_from(&chunk.intra);
            grads.embeddings.merge(&chunk.embeddings);
            for (p, g) in chunk.item_grads {
                match &mut item_grads[p] {
                    Some(acc) => numerics::add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let zero = InterWeights::zeros_like(&self.params.weights);
        let inter: Vec<(InterWeights, EmbeddingGrads)> = passes
            .par_chunks(ITEM_CHUNK)
            .zip(item_grads.par_chunks(ITEM_CHUNK))
            .map(|(ps, gs)| {
                let mut w = zero.clone();
                let mut e = EmbeddingGrads::default();
                for (p, g) in ps.iter().zip(gs) {
                    if let Some(g) = g {
                        self.backward_item(p, g, &mut w, &mut e);
                    }
                }
                (w, e)
            })
            .collect();
        for (w, e) in inter {
            w.add_into(&mut grads.weights);
            grads.embeddings.merge(&e);
        }
        Ok((loss, grads))
    }
}

impl IntraParams {
    fn add_assign_from(&mut self, other: &IntraParams) {
        let mut mine: Vec<&mut Tensor> = self.gru.tensors_mut().into();
        mine.extend(self.attention.tensors_mut());
        mine.push(&mut self.combine.w_h);
        let mut theirs: Vec<&Tensor> = other.gru.tensors().into();
        theirs.extend(other.attention.tensors());
        theirs.push(&other.combine.w_h);
        for (a, b) in mine.into_iter().zip(theirs) {
            a.add_assign(b);
        }
    }
}

/// Gradient accumulator for the inter-sequence encoder weights.
#[derive(Debug, Clone)]
struct InterWeights {
    gcn_b: GcnBParams,
    gcn_c: GcnCParams,
    residual: ResidualParams,
}

impl InterWeights {
    fn zeros_like(w: &Weights) -> Self {
        InterWeights {
            gcn_b: w.gcn_b.zeros_like(),
            gcn_c: w.gcn_c.zeros_like(),
            residual: w.residual.zeros_like(),
        }
    }

    fn add_into(&self, target: &mut Weights) {
        for (a, b) in target.gcn_b.layers.iter_mut().zip(&self.gcn_b.layers) {
            for (x, y) in a.item.tensors_mut().into_iter().zip(b.item.tensors()) {
                x.add_assign(y);
            }
            for (x, y) in a.user.tensors_mut().into_iter().zip(b.user.tensors()) {
                x.add_assign(y);
            }
        }
        for (a, b) in target.gcn_c.layers.iter_mut().zip(&self.gcn_c.layers) {
            for (x, y) in a.tensors_mut().into_iter().zip(b.tensors()) {
                x.add_assign(y);
            }
        }
        target.residual.w.add_assign(&self.residual.w);
        target.residual.b.add_assign(&self.residual.b);
    }
}

/// Random catalogue scores; a baseline for sanity checks.
pub fn random_scores<R: Rng + ?Sized>(num_items: usize, rng: &mut R) -> Vec<f64> {
    (0..num_items).map(|_| rng.gen::<f64>()).collect()
}
