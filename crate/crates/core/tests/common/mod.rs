#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sega_autodiff::Tensor;
use sega_core::config::RunConfig;
use sega_core::embed::{EmbeddingProvider, Role};
use sega_core::features::{encode_inputs, KindInputs, NodeInputs, NormStats};
use sega_core::graph::{Edge, HeteroGraph, Label, ListRecord, NodeAttrs, Relation, Split, UserRecord};
use sega_core::model::Dims;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/twelve")
}

/// Narrow layers over the full text width of the stub provider.
pub fn small_dims() -> Dims {
    Dims {
        hidden: 4,
        out: 16,
        user: 8,
        align: 8,
        heads: 2,
        layers: 2,
        semantic: 6,
        ..Dims::default()
    }
}

pub fn quick_config(seed: u64) -> RunConfig {
    let mut c = RunConfig {
        seed,
        dims: small_dims(),
        ..RunConfig::default()
    };
    c.pretrain.epochs = 3;
    c.pretrain.k_neg = 5;
    c.finetune.epochs = 4;
    c
}

pub fn user(id: &str, label: Label, split: Split, rng: &mut ChaCha8Rng) -> UserRecord {
    UserRecord {
        id: id.into(),
        attrs: NodeAttrs {
            indicators: (0..3).map(|_| rng.random_bool(0.5)).collect(),
            numericals: (0..5).map(|_| rng.random_range(-3.0..3.0)).collect(),
            description: format!("about {id} {}", rng.random_range(0..4)),
            tweets: (0..rng.random_range(0..4)).map(|k| format!("{id} tweet {k}")).collect(),
        },
        label: Some(label),
        split: Some(split),
    }
}

pub fn list(id: &str, rng: &mut ChaCha8Rng) -> ListRecord {
    ListRecord {
        id: id.into(),
        attrs: NodeAttrs {
            indicators: vec![rng.random_bool(0.5)],
            numericals: (0..4).map(|_| rng.random_range(-3.0..3.0)).collect(),
            description: format!("list {id}"),
            tweets: vec![format!("{id} pinned")],
        },
    }
}

/// Random valid graph where every relation has a few edges.
pub fn random_graph(users: usize, lists: usize, edges: usize, seed: u64) -> HeteroGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<UserRecord> = (0..users)
        .map(|i| {
            let label = Label::ALL[i % 3];
            let split = Split::ALL[(i / 3) % 3];
            user(&format!("u{i}"), label, split, &mut rng)
        })
        .collect();
    let l: Vec<ListRecord> = (0..lists).map(|i| list(&format!("l{i}"), &mut rng)).collect();
    let mut e = std::collections::BTreeSet::new();
    for _ in 0..edges {
        let rel = Relation::ALL[rng.random_range(0..5)];
        let a = format!("u{}", rng.random_range(0..users));
        let b = format!("u{}", rng.random_range(0..users));
        let edge = match rel {
            Relation::Following | Relation::Followers if a != b => Edge::new(a, rel, b),
            Relation::Membership if lists > 0 => Edge::new(format!("l{}", rng.random_range(0..lists)), rel, a),
            Relation::Followed | Relation::Own if lists > 0 => Edge::new(a, rel, format!("l{}", rng.random_range(0..lists))),
            _ => continue,
        };
        e.insert(edge);
    }
    let g = HeteroGraph::new(u, l, e.into_iter().collect());
    g.validate().expect("random graph is valid");
    g
}

pub fn stub_text() -> EmbeddingProvider {
    EmbeddingProvider::stub(Role::Text, 0x7e47)
}

pub fn inputs_for(graph: &HeteroGraph) -> NodeInputs<f32> {
    let stats = NormStats::fit(graph).unwrap();
    encode_inputs(graph, &stats, &stub_text()).unwrap()
}

/// Reorders the rows of every input tensor: new row `i` is old row `order[i]`.
pub fn permute_rows<T: sega_autodiff::Scalar>(t: &Tensor<T>, order: &[usize]) -> Tensor<T> {
    let w = t.shape()[1];
    let data = order.iter().flat_map(|&r| t.data()[r * w..(r + 1) * w].iter().copied()).collect();
    Tensor::new(vec![order.len(), w], data).unwrap()
}

pub fn permute_kind<T: sega_autodiff::Scalar>(k: &KindInputs<T>, order: &[usize]) -> KindInputs<T> {
    KindInputs {
        ind: permute_rows(&k.ind, order),
        num: permute_rows(&k.num, order),
        des: permute_rows(&k.des, order),
        twe: permute_rows(&k.twe, order),
    }
}
