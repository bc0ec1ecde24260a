//! Relational graph transformer layers.
//!
//! Per relation, every node attends over its in-neighbors plus itself with
//! scaled dot-product multi-head attention. Relation outputs are combined by
//! a per-node softmax over scorer values `q . tanh(W h + b)` restricted to the
//! relations the node actually has neighbors in (all relations when it has
//! none). The combination goes through an output map, an identity residual
//! and a leaky-ReLU.

use std::sync::Arc;

use rand::Rng;
use sega_autodiff::{ParamId, ParamStore, Scalar, Tape, Var, LEAKY_RELU_SLOPE};

use crate::error::{Result, SegaError};
use crate::features::Affine;
use crate::graph::{HeteroGraph, NodeKind, NodeRef, Relation};
use crate::model::Dims;

/// Attention edges of one relation, self-loops included. Edges are grouped
/// by destination and ordered by source node id inside each group, so the
/// summation order for a node does not depend on where it sits in the graph.
#[derive(Clone, Debug)]
pub struct RelationEdges {
    pub relation: Relation,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    /// Whether the node has at least one in-neighbor besides itself.
    pub present: Vec<bool>,
}

/// Node positions are users first (graph order), then lists.
#[derive(Clone, Debug)]
pub struct GraphIndex {
    pub users: usize,
    pub lists: usize,
    pub relations: Vec<RelationEdges>,
    user_rows: Arc<[usize]>,
    sem_pick: Arc<[usize]>,
    sem_node: Arc<[usize]>,
    h_pick: Arc<[usize]>,
}

impl GraphIndex {
    pub fn build(graph: &HeteroGraph, relations: &[Relation]) -> Result<Self> {
        let users = graph.users().len();
        let lists = graph.lists().len();
        let n = users + lists;
        let position = |r: NodeRef| match r.kind {
            NodeKind::User => r.index,
            NodeKind::List => users + r.index,
        };
        let ids: Vec<&str> = graph
            .users()
            .iter()
            .map(|u| u.id.as_str())
            .chain(graph.lists().iter().map(|l| l.id.as_str()))
            .collect();

        let mut out = Vec::with_capacity(relations.len());
        for &rel in relations {
            let mut incoming: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
            let mut present = vec![false; n];
            for e in graph.edges().iter().filter(|e| e.relation == rel) {
                let s = graph.node(&e.src).ok_or_else(|| SegaError::UnknownNode(e.src.clone()))?;
                let d = graph.node(&e.dst).ok_or_else(|| SegaError::UnknownNode(e.dst.clone()))?;
                let (s, d) = (position(s), position(d));
                if s != d {
                    incoming[d].push(s);
                    present[d] = true;
                }
            }
            let mut src = Vec::new();
            let mut dst = Vec::new();
            for (d, sources) in incoming.iter_mut().enumerate() {
                sources.sort_by(|a, b| ids[*a].cmp(ids[*b]));
                sources.dedup();
                for &s in sources.iter() {
                    src.push(s);
                    dst.push(d);
                }
            }
            out.push(RelationEdges {
                relation: rel,
                src: src.into(),
                dst: dst.into(),
                present,
            });
        }

        let r = out.len();
        let mut sem_pick = Vec::new();
        let mut sem_node = Vec::new();
        let mut h_pick = Vec::new();
        for i in 0..n {
            let any = out.iter().any(|e| e.present[i]);
            for (k, e) in out.iter().enumerate() {
                if e.present[i] || !any {
                    sem_pick.push(i * r + k);
                    sem_node.push(i);
                    h_pick.push(k * n + i);
                }
            }
        }
        Ok(Self {
            users,
            lists,
            relations: out,
            user_rows: (0..users).collect(),
            sem_pick: sem_pick.into(),
            sem_node: sem_node.into(),
            h_pick: h_pick.into(),
        })
    }

    pub fn nodes(&self) -> usize {
        self.users + self.lists
    }
}

#[derive(Clone, Copy, Debug)]
struct RelationParams {
    q: Affine,
    k: Affine,
    v: Affine,
}

#[derive(Clone, Debug)]
pub struct RgtLayer {
    relations: Vec<(Relation, RelationParams)>,
    scorer: Affine,
    scorer_q: ParamId,
    out: Affine,
    heads: usize,
}

/// Attention weights recorded during a forward pass: per layer, per relation.
pub type AttentionTrace = Vec<Vec<Var>>;

impl RgtLayer {
    fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        layer: usize,
        relations: &[Relation],
        dims: &Dims,
        rng: &mut R,
    ) -> Result<Self> {
        let p = format!("rgt.{layer}");
        let mut rel = Vec::new();
        for &r in relations {
            let name = format!("{p}.{}", r.as_str());
            rel.push((
                r,
                RelationParams {
                    q: Affine::register(store, &format!("{name}.q"), dims.out, dims.out, rng)?,
                    k: Affine::register(store, &format!("{name}.k"), dims.out, dims.out, rng)?,
                    v: Affine::register(store, &format!("{name}.v"), dims.out, dims.out, rng)?,
                },
            ));
        }
        Ok(Self {
            relations: rel,
            scorer: Affine::register(store, &format!("{p}.sem"), dims.out, dims.semantic, rng)?,
            scorer_q: store.add_weight(format!("{p}.sem.q"), dims.semantic, 1, 1.0, rng)?,
            out: Affine::register(store, &format!("{p}.out"), dims.out, dims.out, rng)?,
            heads: dims.heads,
        })
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        index: &GraphIndex,
        dropout: f64,
        trace: &mut Vec<Var>,
    ) -> Result<Var> {
        let n = index.nodes();
        if index.relations.len() != self.relations.len()
            || index.relations.iter().zip(&self.relations).any(|(e, (r, _))| e.relation != *r)
        {
            return Err(SegaError::Invalid("graph index relations do not match the encoder".into()));
        }
        let width = tape.value(x).shape()[1];
        let scale = T::from_f64_lossy(1.0 / ((width / self.heads) as f64).sqrt());

        let mut per_relation = Vec::with_capacity(self.relations.len());
        for ((_, p), edges) in self.relations.iter().zip(&index.relations) {
            let q = p.q.forward(tape, store, x)?;
            let k = p.k.forward(tape, store, x)?;
            let v = p.v.forward(tape, store, x)?;
            let qe = tape.gather_rows(q, edges.dst.clone())?;
            let ke = tape.gather_rows(k, edges.src.clone())?;
            let scores = tape.head_dot(qe, ke, self.heads)?;
            let scores = tape.scale(scores, scale)?;
            let alpha = tape.segment_softmax(scores, edges.dst.clone(), n)?;
            trace.push(alpha);
            let alpha = tape.dropout(alpha, dropout)?;
            let ve = tape.gather_rows(v, edges.src.clone())?;
            let msg = tape.head_scale(ve, alpha)?;
            per_relation.push(tape.scatter_add_rows(msg, edges.dst.clone(), n)?);
        }

        let q = tape.param(store, self.scorer_q)?;
        let mut scores = Vec::with_capacity(per_relation.len());
        for &h in &per_relation {
            let s = self.scorer.forward(tape, store, h)?;
            let s = tape.tanh(s)?;
            scores.push(tape.matmul(s, q)?);
        }
        let r = per_relation.len();
        let scores = tape.concat_cols(&scores)?;
        let scores = tape.reshape(scores, vec![n * r, 1])?;
        let picked = tape.gather_rows(scores, index.sem_pick.clone())?;
        let beta = tape.segment_softmax(picked, index.sem_node.clone(), n)?;
        let stacked = tape.concat_rows(&per_relation)?;
        let picked_h = tape.gather_rows(stacked, index.h_pick.clone())?;
        let weighted = tape.head_scale(picked_h, beta)?;
        let combined = tape.scatter_add_rows(weighted, index.sem_node.clone(), n)?;

        let y = self.out.forward(tape, store, combined)?;
        let y = tape.add(y, x)?;
        let y = tape.leaky_relu(y, T::from_f64_lossy(LEAKY_RELU_SLOPE))?;
        Ok(tape.dropout(y, dropout)?)
    }
}

/// Stacked graph layers and the user projection.
#[derive(Clone, Debug)]
pub struct RgtEncoder {
    pub relations: Vec<Relation>,
    layers: Vec<RgtLayer>,
    user_head: Affine,
}

impl RgtEncoder {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        relations: &[Relation],
        dims: &Dims,
        rng: &mut R,
    ) -> Result<Self> {
        dims.check().map_err(SegaError::Config)?;
        if dims.node_input() != dims.out {
            return Err(SegaError::Config(format!(
                "node input width {} must equal layer width {} for the residual path",
                dims.node_input(),
                dims.out
            )));
        }
        if relations.is_empty() {
            return Err(SegaError::Config("encoder needs at least one relation".into()));
        }
        let layers = (0..dims.layers)
            .map(|l| RgtLayer::register(store, l, relations, dims, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            relations: relations.to_vec(),
            layers,
            user_head: Affine::register(store, "rgt.user", dims.out, dims.user, rng)?,
        })
    }

    /// All node embeddings after the graph layers, plus attention weights.
    pub fn forward_traced<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        index: &GraphIndex,
        dropout: f64,
    ) -> Result<(Var, AttentionTrace)> {
        let mut h = x;
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut t = Vec::new();
            h = layer.forward(tape, store, h, index, dropout, &mut t)?;
            trace.push(t);
        }
        Ok((h, trace))
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        index: &GraphIndex,
        dropout: f64,
    ) -> Result<Var> {
        Ok(self.forward_traced(tape, store, x, index, dropout)?.0)
    }

    /// `[users, d_u]` embeddings from the final node states.
    pub fn encode_users<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        nodes: Var,
        index: &GraphIndex,
        dropout: f64,
    ) -> Result<Var> {
        let users = tape.gather_rows(nodes, index.user_rows.clone())?;
        let z = self.user_head.forward_act(tape, store, users)?;
        Ok(tape.dropout(z, dropout)?)
    }
}
