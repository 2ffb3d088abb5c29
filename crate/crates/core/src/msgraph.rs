//! Structure encoder: per-scale GCN, softmax-weighted scale fusion and stacked
//! edge-aware attention layers, read out by a node mean.
//!
//! A batch of graphs is processed as one disjoint union so every stage is a
//! handful of sparse or gathered products.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::data::{EdgeKind, StructureGraph};
use crate::error::{Error, Result};
use crate::numerics::nn::{self, dropout, layer_norm, ForwardCtx, LAYER_NORM_EPS};
use crate::numerics::{stack, Csr, InitSpec, NDArray, ParamStore, Tape, Var};

/// Width of the one-hot node features.
pub const NODE_FEATURES: usize = 4;
/// Width of the one-hot edge attributes.
pub const EDGE_FEATURES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsGraphConfig {
    pub scales: Vec<usize>,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl Default for MsGraphConfig {
    fn default() -> Self {
        Self {
            scales: vec![1, 2, 3],
            d: 64,
            heads: 4,
            layers: 3,
            dropout: 0.1,
        }
    }
}

impl MsGraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::config("msgraph", "scales", "need at least one positive scale"));
        }
        if self.heads == 0 || self.d == 0 || self.d % self.heads != 0 {
            return Err(Error::config(
                "msgraph",
                "heads",
                format!("width {} is not divisible by {} heads", self.d, self.heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("msgraph", "dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Disjoint union of structure graphs with everything the encoder needs precomputed.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub num_nodes: usize,
    /// Nodes of graph `g` are `graph_offsets[g]..graph_offsets[g + 1]`.
    pub graph_offsets: Vec<usize>,
    pub node_feats: NDArray,
    pub node_graph: Rc<Vec<usize>>,
    pub scales: Vec<usize>,
    /// `D̂^{-1/2}(A^(s) + I)D̂^{-1/2}` per scale.
    pub adjacency: Vec<Rc<Csr>>,
    /// Attention entries grouped by target: group `i` spans `attn_offsets[i]..attn_offsets[i+1]`,
    /// self entry first, then distance-1 neighbors in index order.
    pub attn_src: Rc<Vec<usize>>,
    pub attn_dst: Rc<Vec<usize>>,
    pub attn_offsets: Rc<Vec<usize>>,
    /// `[entries, 2]` one-hot edge attributes; the self entry is all zero.
    pub attn_attrs: NDArray,
}

impl GraphBatch {
    pub fn new(graphs: &[&StructureGraph], scales: &[usize]) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::Shape("empty graph batch".into()));
        }
        let mut graph_offsets = vec![0];
        for g in graphs {
            if g.n == 0 {
                return Err(Error::Shape("structure graph has no nodes".into()));
            }
            if g.node_feats.shape() != [g.n, NODE_FEATURES] {
                return Err(Error::Shape(format!("node features {:?} for {} nodes", g.node_feats.shape(), g.n)));
            }
            for s in scales.iter().chain([&1]) {
                if !g.edges_by_scale.contains_key(s) {
                    return Err(Error::Shape(format!("graph lacks edges for scale {s}")));
                }
            }
            graph_offsets.push(graph_offsets.last().unwrap() + g.n);
        }
        let num_nodes = *graph_offsets.last().unwrap();

        let mut feats = Vec::with_capacity(num_nodes * NODE_FEATURES);
        let mut node_graph = Vec::with_capacity(num_nodes);
        for (gi, g) in graphs.iter().enumerate() {
            feats.extend_from_slice(g.node_feats.data());
            node_graph.extend(std::iter::repeat_n(gi, g.n));
        }

        let adjacency = scales
            .iter()
            .map(|s| {
                let mut degree = vec![1.0; num_nodes];
                let mut edges = Vec::new();
                for (g, &base) in graphs.iter().zip(&graph_offsets) {
                    for &(i, j) in g.edges(*s) {
                        edges.push((base + i, base + j));
                        degree[base + i] += 1.0;
                    }
                }
                let inv: Vec<f64> = degree.iter().map(|d: &f64| 1.0 / d.sqrt()).collect();
                let mut triplets: Vec<(usize, usize, f64)> =
                    (0..num_nodes).map(|i| (i, i, inv[i] * inv[i])).collect();
                triplets.extend(edges.into_iter().map(|(i, j)| (i, j, inv[i] * inv[j])));
                Rc::new(Csr::from_triplets(num_nodes, num_nodes, triplets))
            })
            .collect();

        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut offsets = vec![0];
        let mut attrs = Vec::new();
        for (g, &base) in graphs.iter().zip(&graph_offsets) {
            let edges = g.base_edges();
            let mut e = 0;
            for i in 0..g.n {
                src.push(base + i);
                dst.push(base + i);
                attrs.extend([0.0; EDGE_FEATURES]);
                while e < edges.len() && edges[e].0 == i {
                    src.push(base + edges[e].1);
                    dst.push(base + i);
                    let mut one_hot = [0.0; EDGE_FEATURES];
                    one_hot[g.edge_attrs.get(e).copied().unwrap_or(EdgeKind::Backbone).one_hot_index()] = 1.0;
                    attrs.extend(one_hot);
                    e += 1;
                }
                offsets.push(src.len());
            }
        }
        let entries = src.len();
        Ok(Self {
            num_nodes,
            graph_offsets,
            node_feats: NDArray::new(vec![num_nodes, NODE_FEATURES], feats)?,
            node_graph: Rc::new(node_graph),
            scales: scales.to_vec(),
            adjacency,
            attn_src: Rc::new(src),
            attn_dst: Rc::new(dst),
            attn_offsets: Rc::new(offsets),
            attn_attrs: NDArray::new(vec![entries, EDGE_FEATURES], attrs)?,
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.graph_offsets.len() - 1
    }
}

/// `ReLU(Â_norm · X · W)` for one scale.
pub fn gcn_scale<'t>(adjacency: &Rc<Csr>, x: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    Ok(x.matmul(w)?.spmm(adjacency.clone()).relu())
}

/// `Σ_s ω_s H^(s)` with `ω` a vector over scales.
pub fn fuse_scales<'t>(h: &[Var<'t>], omega: Var<'t>) -> Result<Var<'t>> {
    let first = h.first().ok_or_else(|| Error::Shape("no scales to fuse".into()))?.shape();
    if let Some(bad) = h.iter().find(|v| v.shape() != first) {
        return Err(Error::Shape(format!("scale outputs {:?} and {:?} differ", first, bad.shape())));
    }
    if omega.shape() != [h.len()] {
        return Err(Error::Shape(format!("{} scale weights for {} scales", omega.shape().iter().product::<usize>(), h.len())));
    }
    let mut wshape = vec![h.len()];
    wshape.extend(std::iter::repeat_n(1, first.len()));
    Ok((stack(h, 0) * omega.reshape(&wshape)).sum_axis(0))
}

/// One edge-aware attention layer with residual and LayerNorm.
/// Returns the new node states and the attention weights `[entries, heads]`.
#[allow(clippy::too_many_arguments)]
pub fn edge_attention_layer<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    ctx: &ForwardCtx,
    prefix: &str,
    heads: usize,
    dropout_p: f64,
    h: Var<'t>,
    batch: &GraphBatch,
) -> Result<(Var<'t>, Var<'t>)> {
    let p = |n: &str| tape.param(store, &format!("{prefix}.{n}"));
    let d = h.shape()[1];
    let dh = d / heads;
    let entries = batch.attn_src.len();
    let q = h.matmul(p("W_Q"))?.gather_rows(batch.attn_dst.clone());
    let e = tape.constant(batch.attn_attrs.clone()).matmul(p("W_E"))?;
    let k = h.matmul(p("W_K"))?.gather_rows(batch.attn_src.clone()) + e;
    let v = h.matmul(p("W_V"))?.gather_rows(batch.attn_src.clone());
    let scores = (q * k)
        .reshape(&[entries, heads, dh])
        .sum_axis(2)
        .scale(1.0 / (dh as f64).sqrt());
    let alpha = scores.segment_softmax(batch.attn_offsets.clone());
    let msg = (v.reshape(&[entries, heads, dh]) * alpha.reshape(&[entries, heads, 1])).reshape(&[entries, d]);
    let agg = msg.segment_sum(batch.attn_dst.clone(), batch.num_nodes);
    let delta = dropout(nn::linear(tape, store, &format!("{prefix}.out"), agg)?, dropout_p, ctx);
    let out = layer_norm(h + delta, p("ln.gamma"), p("ln.beta"), LAYER_NORM_EPS);
    Ok((out, alpha))
}

pub fn register_attention_layer(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    let bound = 1.0 / (d as f64).sqrt();
    for name in ["W_Q", "W_K", "W_V"] {
        store.register(&format!("{prefix}.{name}"), &[d, d], InitSpec::Uniform { lo: -bound, hi: bound })?;
    }
    let eb = 1.0 / (EDGE_FEATURES as f64).sqrt();
    store.register(&format!("{prefix}.W_E"), &[EDGE_FEATURES, d], InitSpec::Uniform { lo: -eb, hi: eb })?;
    nn::register_linear(store, &format!("{prefix}.out"), d, d, true)?;
    store.register(&format!("{prefix}.ln.gamma"), &[d], InitSpec::Constant(1.0))?;
    store.register(&format!("{prefix}.ln.beta"), &[d], InitSpec::Constant(0.0))?;
    Ok(())
}

/// Encoder output for a batch.
pub struct MsGraphOutput<'t> {
    /// `F_str`, `[graphs, d]`.
    pub features: Var<'t>,
    /// Per layer, `[entries, heads]` aligned with the batch's attention entries.
    pub attention: Vec<Rc<NDArray>>,
}

/// Registered structure encoder under `prefix`. Per-head projections are stored as
/// column blocks of one `[d, d]` matrix per layer.
#[derive(Clone, Debug)]
pub struct MsGraph {
    pub config: MsGraphConfig,
    pub prefix: String,
}

impl MsGraph {
    pub fn register(store: &mut ParamStore, prefix: &str, config: MsGraphConfig) -> Result<Self> {
        config.validate()?;
        for s in &config.scales {
            store.register(
                &format!("{prefix}.gcn{s}.W"),
                &[NODE_FEATURES, config.d],
                InitSpec::KaimingFanIn {
                    fan_in: NODE_FEATURES,
                    gain: 1.0,
                },
            )?;
        }
        store.register(
            &format!("{prefix}.scale_logits"),
            &[config.scales.len()],
            InitSpec::Constant(0.0),
        )?;
        for l in 0..config.layers {
            register_attention_layer(store, &format!("{prefix}.attn{l}"), config.d)?;
        }
        Ok(Self {
            config,
            prefix: prefix.to_string(),
        })
    }

    /// Current `ω = softmax(scale_logits)`.
    pub fn scale_weights(&self, store: &ParamStore) -> Vec<f64> {
        crate::numerics::ops::softmax_slice(store.value(&format!("{}.scale_logits", self.prefix)).data())
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        ctx: &ForwardCtx,
        batch: &GraphBatch,
    ) -> Result<MsGraphOutput<'t>> {
        if batch.scales != self.config.scales {
            return Err(Error::Shape(format!(
                "batch built for scales {:?}, encoder uses {:?}",
                batch.scales, self.config.scales
            )));
        }
        let x = tape.constant(batch.node_feats.clone());
        let per_scale = self
            .config
            .scales
            .iter()
            .zip(&batch.adjacency)
            .map(|(s, a)| gcn_scale(a, x, tape.param(store, &format!("{}.gcn{s}.W", self.prefix))))
            .collect::<Result<Vec<_>>>()?;
        let omega = tape.param(store, &format!("{}.scale_logits", self.prefix)).softmax();
        let mut h = fuse_scales(&per_scale, omega)?;
        let mut attention = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let (next, alpha) = edge_attention_layer(
                tape,
                store,
                ctx,
                &format!("{}.attn{l}", self.prefix),
                self.config.heads,
                self.config.dropout,
                h,
                batch,
            )?;
            attention.push(alpha.value());
            h = next;
        }
        let g = batch.num_graphs();
        let inv_count: Vec<f64> = batch
            .graph_offsets
            .windows(2)
            .map(|w| 1.0 / (w[1] - w[0]) as f64)
            .collect();
        let features = h.segment_sum(batch.node_graph.clone(), g) * tape.constant(NDArray::new(vec![g, 1], inv_count)?);
        Ok(MsGraphOutput { features, attention })
    }
}
