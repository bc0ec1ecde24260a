//! Layer widths and the shared encoder stack.

use rand::Rng;
use sega_autodiff::{ParamStore, Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::embed::EMBED_DIM;
use crate::error::{Result, SegaError};
use crate::features::{FeatureEncoder, NodeInputs};
use crate::graph::{HeteroGraph, Relation};
use crate::rgt::{GraphIndex, RgtEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dims {
    /// Width of description, tweet and prompt embeddings.
    pub text: usize,
    /// Per-feature projection width; the assembled node input is `4 * hidden`.
    pub hidden: usize,
    /// Graph layer width.
    pub out: usize,
    /// User embedding width.
    pub user: usize,
    /// Contrastive projection width.
    pub align: usize,
    pub heads: usize,
    pub layers: usize,
    /// Hidden width of the relation scorer.
    pub semantic: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            text: EMBED_DIM,
            hidden: 32,
            out: 128,
            user: 64,
            align: 64,
            heads: 4,
            layers: 2,
            semantic: 128,
        }
    }
}

impl Dims {
    pub fn node_input(&self) -> usize {
        4 * self.hidden
    }

    pub fn check(&self) -> Result<(), String> {
        let widths = [self.text, self.hidden, self.out, self.user, self.align, self.heads, self.semantic];
        if widths.contains(&0) {
            return Err("layer widths and head count must be positive".into());
        }
        if !self.out.is_multiple_of(self.heads) {
            return Err(format!("{} heads do not divide width {}", self.heads, self.out));
        }
        Ok(())
    }
}

/// Feature encoder plus graph layers: raw inputs to user embeddings.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub dims: Dims,
    pub features: FeatureEncoder,
    pub rgt: RgtEncoder,
}

/// Relations the encoder attends over, with or without list nodes.
pub fn encoder_relations(with_lists: bool) -> Vec<Relation> {
    Relation::ALL
        .into_iter()
        .filter(|r| with_lists || !r.touches_lists())
        .collect()
}

impl Encoder {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        dims: &Dims,
        with_lists: bool,
        rng: &mut R,
    ) -> Result<Self> {
        dims.check().map_err(SegaError::Config)?;
        let features = FeatureEncoder::register(store, dims, with_lists, rng)?;
        let rgt = RgtEncoder::register(store, &encoder_relations(with_lists), dims, rng)?;
        Ok(Self {
            dims: *dims,
            features,
            rgt,
        })
    }

    pub fn index(&self, graph: &HeteroGraph) -> Result<GraphIndex> {
        GraphIndex::build(graph, &self.rgt.relations)
    }

    /// `[users, d_u]` user embeddings.
    pub fn user_embeddings<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &NodeInputs<T>,
        index: &GraphIndex,
        dropout: f64,
    ) -> Result<Var> {
        if inputs.num_nodes() != index.nodes() {
            return Err(SegaError::Invalid(format!(
                "{} encoded nodes for a graph of {}",
                inputs.num_nodes(),
                index.nodes()
            )));
        }
        let x = self.features.forward(tape, store, inputs, dropout)?;
        let nodes = self.rgt.forward(tape, store, x, index, dropout)?;
        self.rgt.encode_users(tape, store, nodes, index, dropout)
    }
}
