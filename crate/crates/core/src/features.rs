//! Raw node features to initial node embeddings.
//!
//! Each node kind has four feature groups (indicators, z-scored numericals,
//! description embedding, mean tweet embedding). Every group gets its own
//! affine map and leaky-ReLU to `hidden`, the four results are concatenated
//! and mixed by one more affine map and leaky-ReLU.

use rand::Rng;
use sega_autodiff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var, LEAKY_RELU_SLOPE};

use crate::embed::EmbeddingProvider;
use crate::error::{Result, SegaError};
use crate::graph::{HeteroGraph, NodeAttrs, NodeKind, Split};
use crate::model::Dims;

pub fn encode_indicators(attrs: &NodeAttrs, kind: NodeKind) -> Result<Vec<f64>> {
    if attrs.indicators.len() != kind.indicator_count() {
        return Err(SegaError::Invalid(format!(
            "{} has {} indicators, expected {}",
            kind.as_str(),
            attrs.indicators.len(),
            kind.indicator_count()
        )));
    }
    Ok(attrs.indicators.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
}

impl FeatureStats {
    pub fn degenerate(&self) -> bool {
        self.std == 0.0
    }
}

/// Per-feature mean and population standard deviation.
pub fn fit_stats(rows: &[&[f64]], width: usize) -> Result<Vec<FeatureStats>> {
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(SegaError::Invalid(format!("expected {width} numericals, found {}", r.len())));
    }
    if rows.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(SegaError::Invalid("non-finite numerical feature".into()));
    }
    let n = rows.len() as f64;
    Ok((0..width)
        .map(|j| {
            if rows.is_empty() {
                return FeatureStats { mean: 0.0, std: 0.0 };
            }
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            FeatureStats { mean, std: var.sqrt() }
        })
        .collect())
}

/// `(v - mean) / std`, with degenerate features mapped to 0.
pub fn zscore(values: &[f64], stats: &[FeatureStats]) -> Result<Vec<f64>> {
    if values.len() != stats.len() {
        return Err(SegaError::Invalid(format!(
            "expected {} numericals, found {}",
            stats.len(),
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SegaError::Invalid("non-finite numerical feature".into()));
    }
    Ok(values
        .iter()
        .zip(stats)
        .map(|(v, s)| if s.degenerate() { 0.0 } else { (v - s.mean) / s.std })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub user: Vec<FeatureStats>,
    pub list: Vec<FeatureStats>,
}

impl NormStats {
    /// User statistics come from train-split users only. Lists carry no
    /// split, so all lists are used.
    pub fn fit(graph: &HeteroGraph) -> Result<Self> {
        let users: Vec<&[f64]> = graph
            .users()
            .iter()
            .filter(|u| u.split == Some(Split::Train))
            .map(|u| u.attrs.numericals.as_slice())
            .collect();
        let lists: Vec<&[f64]> = graph.lists().iter().map(|l| l.attrs.numericals.as_slice()).collect();
        Ok(Self {
            user: fit_stats(&users, NodeKind::User.numerical_count())?,
            list: fit_stats(&lists, NodeKind::List.numerical_count())?,
        })
    }

    pub fn for_kind(&self, kind: NodeKind) -> &[FeatureStats] {
        match kind {
            NodeKind::User => &self.user,
            NodeKind::List => &self.list,
        }
    }
}

/// Description embedding and mean tweet embedding (zero without tweets).
pub fn encode_texts(attrs: &NodeAttrs, provider: &EmbeddingProvider) -> Result<(Vec<f32>, Vec<f32>)> {
    let des = provider.embed_text(&attrs.description)?;
    let twe = mean_rows(&provider.embed_batch(&attrs.tweets)?, des.len());
    Ok((des, twe))
}

fn mean_rows(rows: &[Vec<f32>], width: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; width];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += f64::from(*v);
        }
    }
    let n = rows.len().max(1) as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

/// Feature matrices for all nodes of one kind, one row per node.
#[derive(Clone, Debug, PartialEq)]
pub struct KindInputs<T> {
    pub ind: Tensor<T>,
    pub num: Tensor<T>,
    pub des: Tensor<T>,
    pub twe: Tensor<T>,
}

impl<T: Scalar> KindInputs<T> {
    pub fn rows(&self) -> usize {
        self.ind.shape()[0]
    }

    pub fn cast<U: Scalar>(&self) -> KindInputs<U> {
        KindInputs {
            ind: self.ind.cast(),
            num: self.num.cast(),
            des: self.des.cast(),
            twe: self.twe.cast(),
        }
    }
}

/// Encoded inputs in graph order; `lists` is `None` when the graph has none.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeInputs<T> {
    pub users: KindInputs<T>,
    pub lists: Option<KindInputs<T>>,
}

impl<T: Scalar> NodeInputs<T> {
    pub fn cast<U: Scalar>(&self) -> NodeInputs<U> {
        NodeInputs {
            users: self.users.cast(),
            lists: self.lists.as_ref().map(KindInputs::cast),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.users.rows() + self.lists.as_ref().map_or(0, KindInputs::rows)
    }
}

fn encode_kind(
    nodes: &[&NodeAttrs],
    kind: NodeKind,
    stats: &NormStats,
    provider: &EmbeddingProvider,
) -> Result<KindInputs<f32>> {
    let n = nodes.len();
    let mut ind = Vec::new();
    let mut num = Vec::new();
    for a in nodes {
        ind.extend(encode_indicators(a, kind)?.into_iter().map(|v| v as f32));
        num.extend(zscore(&a.numericals, stats.for_kind(kind))?.into_iter().map(|v| v as f32));
    }
    let descriptions: Vec<&str> = nodes.iter().map(|a| a.description.as_str()).collect();
    let des_rows = provider.embed_batch(&descriptions)?;
    let width = des_rows.first().map_or(0, Vec::len);

    let all_tweets: Vec<&str> = nodes.iter().flat_map(|a| a.tweets.iter().map(String::as_str)).collect();
    let tweet_rows = provider.embed_batch(&all_tweets)?;
    let mut twe = Vec::with_capacity(n * width);
    let mut offset = 0;
    for a in nodes {
        let k = a.tweets.len();
        twe.extend(mean_rows(&tweet_rows[offset..offset + k], width));
        offset += k;
    }
    let des: Vec<f32> = des_rows.into_iter().flatten().collect();
    Ok(KindInputs {
        ind: Tensor::new(vec![n, kind.indicator_count()], ind)?,
        num: Tensor::new(vec![n, kind.numerical_count()], num)?,
        des: Tensor::new(vec![n, width], des)?,
        twe: Tensor::new(vec![n, width], twe)?,
    })
}

pub fn encode_inputs(graph: &HeteroGraph, stats: &NormStats, provider: &EmbeddingProvider) -> Result<NodeInputs<f32>> {
    let users: Vec<&NodeAttrs> = graph.users().iter().map(|u| &u.attrs).collect();
    let lists: Vec<&NodeAttrs> = graph.lists().iter().map(|l| &l.attrs).collect();
    Ok(NodeInputs {
        users: encode_kind(&users, NodeKind::User, stats, provider)?,
        lists: if lists.is_empty() {
            None
        } else {
            Some(encode_kind(&lists, NodeKind::List, stats, provider)?)
        },
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add_weight(format!("{name}.w"), fan_in, fan_out, LEAKY_RELU_SLOPE, rng)?,
            b: store.add_zeros(format!("{name}.b"), &[fan_out])?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        Ok(tape.affine(x, w, b)?)
    }

    /// Affine map followed by leaky-ReLU.
    pub fn forward_act<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.forward(tape, store, x)?;
        Ok(tape.leaky_relu(y, T::from_f64_lossy(LEAKY_RELU_SLOPE))?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct KindEncoder {
    pub ind: Affine,
    pub num: Affine,
    pub des: Affine,
    pub twe: Affine,
    pub mix: Affine,
}

impl KindEncoder {
    fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        kind: NodeKind,
        dims: &Dims,
        rng: &mut R,
    ) -> Result<Self> {
        let p = format!("feat.{}", kind.as_str());
        Ok(Self {
            ind: Affine::register(store, &format!("{p}.ind"), kind.indicator_count(), dims.hidden, rng)?,
            num: Affine::register(store, &format!("{p}.num"), kind.numerical_count(), dims.hidden, rng)?,
            des: Affine::register(store, &format!("{p}.des"), dims.text, dims.hidden, rng)?,
            twe: Affine::register(store, &format!("{p}.twe"), dims.text, dims.hidden, rng)?,
            mix: Affine::register(store, &format!("{p}.mix"), dims.node_input(), dims.node_input(), rng)?,
        })
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &KindInputs<T>,
        dropout: f64,
    ) -> Result<Var> {
        let mut parts = Vec::with_capacity(4);
        for (map, x) in [
            (&self.ind, &inputs.ind),
            (&self.num, &inputs.num),
            (&self.des, &inputs.des),
            (&self.twe, &inputs.twe),
        ] {
            let x = tape.constant(x.clone())?;
            let h = map.forward_act(tape, store, x)?;
            parts.push(tape.dropout(h, dropout)?);
        }
        let cat = tape.concat_cols(&parts)?;
        self.mix.forward_act(tape, store, cat)
    }
}

/// Separate parameters per node kind and per feature group.
#[derive(Clone, Copy, Debug)]
pub struct FeatureEncoder {
    pub user: KindEncoder,
    pub list: Option<KindEncoder>,
}

impl FeatureEncoder {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        dims: &Dims,
        with_lists: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let user = KindEncoder::register(store, NodeKind::User, dims, rng)?;
        let list = if with_lists {
            Some(KindEncoder::register(store, NodeKind::List, dims, rng)?)
        } else {
            None
        };
        Ok(Self { user, list })
    }

    /// Initial embeddings of all nodes: users first, then lists.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &NodeInputs<T>,
        dropout: f64,
    ) -> Result<Var> {
        let users = self.user.forward(tape, store, &inputs.users, dropout)?;
        match (&self.list, &inputs.lists) {
            (Some(enc), Some(lists)) => {
                let lists = enc.forward(tape, store, lists, dropout)?;
                Ok(tape.concat_rows(&[users, lists])?)
            }
            (None, Some(_)) => Err(SegaError::Invalid("list inputs given to an encoder without list parameters".into())),
            _ => Ok(users),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Role;
    use crate::graph::fixture::twelve_nodes;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn indicators() {
        let mut a = NodeAttrs {
            indicators: vec![true, false, true],
            ..Default::default()
        };
        assert_eq!(encode_indicators(&a, NodeKind::User).unwrap(), vec![1.0, 0.0, 1.0]);
        a.indicators = vec![false];
        assert_eq!(encode_indicators(&a, NodeKind::List).unwrap(), vec![0.0]);
        a.indicators = vec![true, true];
        assert!(encode_indicators(&a, NodeKind::User).is_err());
    }

    #[test]
    fn zscore_uses_population_std() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]];
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let stats = fit_stats(&refs, 2).unwrap();
        assert!(stats[1].degenerate());
        let z: Vec<f64> = rows.iter().map(|r| zscore(r, &stats).unwrap()[0]).collect();
        let expected = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((z[0] + expected).abs() < 1e-12 && z[1].abs() < 1e-12 && (z[2] - expected).abs() < 1e-12);
        assert!(rows.iter().all(|r| zscore(r, &stats).unwrap()[1] == 0.0));
        assert!(zscore(&[f64::NAN, 1.0], &stats).is_err());
    }

    #[test]
    fn tweet_mean_rules() {
        let p = EmbeddingProvider::stub(Role::Text, 0);
        let mut a = NodeAttrs::default();
        let (_, twe) = encode_texts(&a, &p).unwrap();
        assert!(twe.iter().all(|x| *x == 0.0));
        a.tweets = vec!["one".into()];
        assert_eq!(encode_texts(&a, &p).unwrap().1, p.embed_text("one").unwrap());
        a.tweets.push("two".into());
        let (x, y) = (p.embed_text("one").unwrap(), p.embed_text("two").unwrap());
        let twe = encode_texts(&a, &p).unwrap().1;
        for i in 0..x.len() {
            assert!((twe[i] - (x[i] + y[i]) / 2.0).abs() < 1e-7);
        }
    }

    #[test]
    fn encoder_output_width_and_registry() {
        let g = twelve_nodes();
        let stats = NormStats::fit(&g).unwrap();
        let p = EmbeddingProvider::stub(Role::Text, 0);
        let inputs = encode_inputs(&g, &stats, &p).unwrap();
        let dims = Dims::default();
        let mut store = ParamStore::<f32>::new();
        let enc = FeatureEncoder::register(&mut store, &dims, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let per_group: Vec<&String> = store.names().iter().filter(|n| n.ends_with(".w")).collect();
        assert_eq!(per_group.len(), 10);
        let mut tape = Tape::eval();
        let z = enc.forward(&mut tape, &store, &inputs, 0.3).unwrap();
        assert_eq!(tape.value(z).shape(), &[12, 128]);
    }
}
