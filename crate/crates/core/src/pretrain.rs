//! Label-free pre-training against pseudo-label prompts.
//!
//! The contrastive objective pulls each user's projected embedding toward
//! the projected embedding of its own pseudo-label and away from sampled
//! pseudo-labels with different text. The multi-label alternative predicts
//! the user's set of topic–emotion pairs directly.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sega_autodiff::{AdamWConfig, AdamWState, Checkpoint, ParamStore, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingProvider;
use crate::error::{Result, SegaError};
use crate::features::{Affine, NodeInputs};
use crate::graph::HeteroGraph;
use crate::model::{Dims, Encoder};
use crate::prefs::{pseudo_labels, PreferenceCache, PreferenceProfile, TemplateKind, PAIR_SPACE};
use crate::rgt::GraphIndex;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Contrastive,
    Multilabel,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Contrastive => "contrastive",
            Objective::Multilabel => "multilabel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Objective::Contrastive, Objective::Multilabel]
            .into_iter()
            .find(|o| o.as_str() == s)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub tau: f64,
    pub k_neg: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub template: TemplateKind,
    pub objective: Objective,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            k_neg: 100,
            epochs: 100,
            batch_size: 2048,
            lr: 1e-3,
            dropout: 0.3,
            template: TemplateKind::Default,
            objective: Objective::Contrastive,
        }
    }
}

impl PretrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(SegaError::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(SegaError::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SegaError::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.lr >= 0.0) {
            return Err(SegaError::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Projections of user and prompt embeddings into the shared space.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveHead {
    pub user: Affine,
    pub prompt: Affine,
}

impl ContrastiveHead {
    pub fn register<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, dims: &Dims, rng: &mut R) -> Result<Self> {
        Ok(Self {
            user: Affine::register(store, "head.contrast.user", dims.user, dims.align, rng)?,
            prompt: Affine::register(store, "head.contrast.prompt", dims.text, dims.align, rng)?,
        })
    }

    /// Pure affine maps, no activation.
    pub fn project<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        users: Var,
        prompts: Var,
    ) -> Result<(Var, Var)> {
        Ok((
            self.user.forward(tape, store, users)?,
            self.prompt.forward(tape, store, prompts)?,
        ))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MultilabelHead {
    pub map: Affine,
}

impl MultilabelHead {
    pub fn register<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, dims: &Dims, rng: &mut R) -> Result<Self> {
        Ok(Self {
            map: Affine::register(store, "head.multilabel", dims.user, PAIR_SPACE, rng)?,
        })
    }
}

/// One anchor's candidates: rows of the projected anchor and prompt matrices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastiveTerm {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Sum over terms of `-log(e^{s+/t} / (e^{s+/t} + sum e^{s-/t}))` with cosine `s`.
pub fn infonce_loss<T: Scalar>(tape: &mut Tape<T>, z: Var, p: Var, terms: &[ContrastiveTerm], tau: f64) -> Result<Var> {
    if terms.is_empty() {
        return Err(SegaError::Invalid("contrastive loss needs at least one anchor".into()));
    }
    let mut pair_anchor = Vec::new();
    let mut pair_prompt = Vec::new();
    let mut segment = Vec::new();
    let mut positive_rows = Vec::with_capacity(terms.len());
    for (k, t) in terms.iter().enumerate() {
        positive_rows.push(pair_anchor.len());
        for &label in std::iter::once(&t.positive).chain(&t.negatives) {
            pair_anchor.push(t.anchor);
            pair_prompt.push(label);
            segment.push(k);
        }
    }
    let za = tape.gather_rows(z, pair_anchor.into())?;
    let pa = tape.gather_rows(p, pair_prompt.into())?;
    let sims = tape.cosine_rows(za, pa)?;
    let logits = tape.scale(sims, T::from_f64_lossy(1.0 / tau))?;
    let probs = tape.segment_softmax(logits, Arc::from(segment), terms.len())?;
    let pos = tape.gather_rows(probs, positive_rows.into())?;
    let log = tape.log(pos)?;
    let total = tape.sum(log)?;
    Ok(tape.scale(total, -T::one())?)
}

/// Binary cross-entropy with logits over `[rows, 153]` multi-hot targets, averaged.
pub fn multilabel_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[T]) -> Result<Var> {
    Ok(tape.bce_with_logits(logits, targets)?)
}

/// Up to `k` distinct prompt indices other than `positive`, uniformly
/// without replacement. `None` when no other prompt exists.
pub fn sample_negatives<R: Rng + ?Sized>(positive: usize, pool_size: usize, k: usize, rng: &mut R) -> Option<Vec<usize>> {
    let eligible = pool_size.saturating_sub(usize::from(positive < pool_size));
    if eligible == 0 {
        return None;
    }
    let picks = index::sample(rng, eligible, k.min(eligible));
    Some(
        picks
            .into_iter()
            .map(|i| if i >= positive { i + 1 } else { i })
            .collect(),
    )
}

/// Distinct pseudo-label texts and which users carry each.
#[derive(Clone, Debug)]
pub struct PromptPool {
    pub texts: Vec<String>,
    /// `(user row, prompt index)` for every anchor, in user order.
    pub anchors: Vec<(usize, usize)>,
}

impl PromptPool {
    pub fn build(graph: &HeteroGraph, cache: &PreferenceCache, template: TemplateKind) -> Self {
        let labels = pseudo_labels(cache, template);
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        for l in labels.values() {
            index.insert(l.text.as_str(), 0);
        }
        let texts: Vec<String> = index.keys().map(|s| s.to_string()).collect();
        for (i, t) in texts.iter().enumerate() {
            index.insert(t.as_str(), i);
        }
        let anchors = graph
            .users()
            .iter()
            .enumerate()
            .filter_map(|(row, u)| labels.get(&u.id).map(|l| (row, index[l.text.as_str()])))
            .collect();
        Self { texts, anchors }
    }

    pub fn embed(&self, provider: &EmbeddingProvider) -> Result<Tensor<f32>> {
        let rows = provider.embed_batch(&self.texts)?;
        let width = rows.first().map_or(0, Vec::len);
        Ok(Tensor::new(vec![rows.len(), width], rows.into_iter().flatten().collect())?)
    }
}

/// Everything one pre-training run reads. Class labels are not part of it.
pub struct PretrainSetup<'a> {
    pub dims: Dims,
    pub with_lists: bool,
    pub inputs: &'a NodeInputs<f32>,
    pub index: &'a GraphIndex,
    pub objective: PretrainTargets,
}

pub enum PretrainTargets {
    /// Prompt embeddings `[P, text]` and `(user row, prompt)` anchors.
    Contrastive {
        prompts: Tensor<f32>,
        anchors: Vec<(usize, usize)>,
    },
    /// `(user row, 153-wide multi-hot)` targets.
    Multilabel { targets: Vec<(usize, Vec<f32>)> },
}

impl PretrainTargets {
    pub fn multilabel(graph: &HeteroGraph, cache: &PreferenceCache) -> Self {
        let targets = graph
            .users()
            .iter()
            .enumerate()
            .filter_map(|(row, u)| {
                let p = PreferenceProfile::from_pairs(&u.id, cache.get(&u.id)?);
                (!p.is_empty()).then(|| (row, p.multi_hot()))
            })
            .collect();
        PretrainTargets::Multilabel { targets }
    }

    fn anchor_count(&self) -> usize {
        match self {
            PretrainTargets::Contrastive { anchors, .. } => anchors.len(),
            PretrainTargets::Multilabel { targets } => targets.len(),
        }
    }

    pub fn objective(&self) -> Objective {
        match self {
            PretrainTargets::Contrastive { .. } => Objective::Contrastive,
            PretrainTargets::Multilabel { .. } => Objective::Multilabel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub objective: Objective,
    /// Mean loss per anchor over the epoch.
    pub loss: f64,
}

pub fn write_loss_log(path: &Path, log: &[EpochLoss]) -> Result<()> {
    let mut out = String::from("epoch,objective,loss\n");
    for e in log {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.objective, e.loss));
    }
    let mut f = std::fs::File::create(path).map_err(|e| SegaError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| SegaError::io(path, e))
}

/// Stream for one epoch, derived from the run seed alone.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trainable state of a pre-training run.
pub struct Pretrainer {
    pub encoder: Encoder,
    contrastive: Option<ContrastiveHead>,
    multilabel: Option<MultilabelHead>,
    pub state: Checkpoint<f32>,
}

impl Pretrainer {
    /// Fresh parameters; the encoder is registered first so its
    /// initialization matches a fine-tuning run with the same seed.
    pub fn new(setup: &PretrainSetup, config: &PretrainConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::register(&mut store, &setup.dims, setup.with_lists, &mut rng)?;
        let (contrastive, multilabel) = match setup.objective {
            PretrainTargets::Contrastive { .. } => (Some(ContrastiveHead::register(&mut store, &setup.dims, &mut rng)?), None),
            PretrainTargets::Multilabel { .. } => (None, Some(MultilabelHead::register(&mut store, &setup.dims, &mut rng)?)),
        };
        let optimizer = AdamWState::new(adamw(config), &store);
        Ok(Self {
            encoder,
            contrastive,
            multilabel,
            state: Checkpoint {
                params: store,
                optimizer: Some(optimizer),
            },
        })
    }

    /// Replaces parameters and optimizer state with a saved checkpoint.
    pub fn restore(&mut self, checkpoint: Checkpoint<f32>) -> Result<()> {
        if checkpoint.params.names() != self.state.params.names() {
            return Err(SegaError::Config("checkpoint does not match the pre-training model".into()));
        }
        self.state = checkpoint;
        Ok(())
    }

    fn loss(
        &self,
        tape: &mut Tape<f32>,
        setup: &PretrainSetup,
        config: &PretrainConfig,
        batch: &[usize],
        negatives: &[Vec<usize>],
    ) -> Result<Var> {
        let store = &self.state.params;
        let z = self.encoder.user_embeddings(tape, store, setup.inputs, setup.index, config.dropout)?;
        match &setup.objective {
            PretrainTargets::Contrastive { prompts, anchors } => {
                let head = self.contrastive.as_ref().expect("contrastive head");
                let rows: Vec<usize> = batch.iter().map(|&a| anchors[a].0).collect();
                let zb = tape.gather_rows(z, rows.into())?;
                let p = tape.constant(prompts.clone())?;
                let (zt, pt) = head.project(tape, store, zb, p)?;
                let terms: Vec<ContrastiveTerm> = batch
                    .iter()
                    .enumerate()
                    .map(|(k, &a)| ContrastiveTerm {
                        anchor: k,
                        positive: anchors[a].1,
                        negatives: negatives[a].clone(),
                    })
                    .collect();
                infonce_loss(tape, zt, pt, &terms, config.tau)
            }
            PretrainTargets::Multilabel { targets } => {
                let head = self.multilabel.as_ref().expect("multilabel head");
                let rows: Vec<usize> = batch.iter().map(|&a| targets[a].0).collect();
                let zb = tape.gather_rows(z, rows.into())?;
                let logits = head.map.forward(tape, store, zb)?;
                let flat: Vec<f32> = batch.iter().flat_map(|&a| targets[a].1.iter().copied()).collect();
                multilabel_loss(tape, logits, &flat)
            }
        }
    }

    /// Runs epochs `start..end` (zero-based) and returns their losses.
    pub fn run_epochs(
        &mut self,
        setup: &PretrainSetup,
        config: &PretrainConfig,
        seed: u64,
        start: usize,
        end: usize,
    ) -> Result<Vec<EpochLoss>> {
        config.check()?;
        let n = setup.objective.anchor_count();
        if n == 0 {
            return Err(SegaError::Invalid("no users with pseudo-labels to pre-train on".into()));
        }
        let pool = match &setup.objective {
            PretrainTargets::Contrastive { prompts, .. } => prompts.shape()[0],
            PretrainTargets::Multilabel { .. } => 0,
        };
        let mut log = Vec::new();
        for epoch in start..end {
            let mut rng = epoch_rng(seed, epoch);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut negatives = vec![Vec::new(); n];
            if let PretrainTargets::Contrastive { anchors, .. } = &setup.objective {
                let mut skipped = 0;
                for a in 0..n {
                    match sample_negatives(anchors[a].1, pool, config.k_neg, &mut rng) {
                        Some(neg) => negatives[a] = neg,
                        None => skipped += 1,
                    }
                }
                if skipped == n {
                    return Err(SegaError::Invalid("every anchor shares one pseudo-label; no negatives exist".into()));
                }
                if skipped > 0 {
                    log::info!("epoch {epoch}: {skipped} anchors without negatives skipped");
                    order.retain(|&a| !negatives[a].is_empty());
                }
            }
            let mut total = 0.0;
            for batch in order.chunks(config.batch_size) {
                let mut tape = Tape::train(rng.random());
                let loss = self.loss(&mut tape, setup, config, batch, &negatives)?;
                let value = f64::from(tape.value(loss).item().unwrap_or(f32::NAN));
                total += match setup.objective {
                    PretrainTargets::Contrastive { .. } => value,
                    PretrainTargets::Multilabel { .. } => value * batch.len() as f64,
                };
                let grads = tape.backward(loss)?;
                let grads: Vec<_> = grads.param_grads(&self.state.params).into_iter().map(Some).collect();
                self.state
                    .optimizer
                    .as_mut()
                    .expect("optimizer state")
                    .step(&mut self.state.params, &grads)?;
            }
            let loss = total / order.len() as f64;
            log::debug!("pretrain epoch {epoch}: {loss:.6}");
            log.push(EpochLoss {
                epoch: epoch + 1,
                objective: setup.objective.objective(),
                loss,
            });
        }
        Ok(log)
    }
}

fn adamw(config: &PretrainConfig) -> AdamWConfig {
    AdamWConfig {
        lr: config.lr,
        ..AdamWConfig::default()
    }
}

/// Full run from fresh parameters.
pub fn pretrain(setup: &PretrainSetup, config: &PretrainConfig, seed: u64) -> Result<(Checkpoint<f32>, Vec<EpochLoss>)> {
    let mut trainer = Pretrainer::new(setup, config, seed)?;
    let log = trainer.run_epochs(setup, config, seed, 0, config.epochs)?;
    Ok((trainer.state, log))
}
