//! Three-class detection: classifier head, fine-tuning and macro metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sega_autodiff::{AdamWConfig, AdamWState, ParamStore, Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegaError};
use crate::features::{Affine, NodeInputs};
use crate::graph::{HeteroGraph, Label, Split};
use crate::model::{Dims, Encoder};
use crate::pretrain::epoch_rng;
use crate::rgt::GraphIndex;

pub const CLASSES: usize = 3;

#[derive(Clone, Copy, Debug)]
pub struct Classifier {
    pub map: Affine,
}

impl Classifier {
    pub fn register<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, dims: &Dims, rng: &mut R) -> Result<Self> {
        Ok(Self {
            map: Affine::register(store, "head.cls", dims.user, CLASSES, rng)?,
        })
    }

    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        self.map.forward(tape, store, z)
    }

    /// Class probabilities ordered normal, bot, troll.
    pub fn classify<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let l = self.logits(tape, store, z)?;
        Ok(tape.row_softmax(l)?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<String, ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; CLASSES]; CLASSES],
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and macro precision/recall/F1. Undefined ratios count as 0.
pub fn evaluate(predictions: &[Label], labels: &[Label]) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(SegaError::Invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = [[0usize; CLASSES]; CLASSES];
    for (p, y) in predictions.iter().zip(labels) {
        confusion[y.index()][p.index()] += 1;
    }
    let mut per_class = BTreeMap::new();
    let mut sums = [0.0; 3];
    for c in Label::ALL {
        let i = c.index();
        let tp = confusion[i][i];
        let predicted: usize = (0..CLASSES).map(|t| confusion[t][i]).sum();
        let actual: usize = confusion[i].iter().sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, actual);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        sums[0] += precision;
        sums[1] += recall;
        sums[2] += f1;
        per_class.insert(
            c.as_str().to_string(),
            ClassMetrics {
                precision,
                recall,
                f1,
                support: actual,
            },
        );
    }
    let k = CLASSES as f64;
    Ok(MetricsReport {
        per_class,
        macro_avg: MacroMetrics {
            precision: sums[0] / k,
            recall: sums[1] / k,
            f1: sums[2] / k,
        },
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub dropout: f64,
    pub batch_size: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            lr: 1e-3,
            lambda: 3e-5,
            dropout: 0.3,
            batch_size: 2048,
        }
    }
}

impl FinetuneConfig {
    pub fn check(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SegaError::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SegaError::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.lr >= 0.0) || !(self.lambda >= 0.0) {
            return Err(SegaError::Config("learning rate and lambda must be non-negative".into()));
        }
        Ok(())
    }
}

/// Rows and labels of the users in one split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitRows {
    pub rows: Vec<usize>,
    pub labels: Vec<Label>,
}

impl SplitRows {
    pub fn of(graph: &HeteroGraph, split: Split) -> Result<Self> {
        let mut out = SplitRows::default();
        for (row, u) in graph.users().iter().enumerate() {
            if u.split == Some(split) {
                let label = u
                    .label
                    .ok_or_else(|| SegaError::Invalid(format!("user `{}` in {} split has no label", u.id, split.as_str())))?;
                out.rows.push(row);
                out.labels.push(label);
            }
        }
        Ok(out)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub struct FinetuneSetup<'a> {
    pub dims: Dims,
    pub with_lists: bool,
    pub inputs: &'a NodeInputs<f32>,
    pub index: &'a GraphIndex,
    pub train: SplitRows,
    pub valid: SplitRows,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub valid_macro_f1: f64,
}

pub fn write_epoch_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,loss,valid_macro_f1\n");
    for e in log {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.valid_macro_f1));
    }
    let mut f = std::fs::File::create(path).map_err(|e| SegaError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| SegaError::io(path, e))
}

/// Encoder plus classifier with its parameters.
#[derive(Clone, Debug)]
pub struct Detector {
    pub encoder: Encoder,
    pub classifier: Classifier,
    pub params: ParamStore<f32>,
}

impl Detector {
    /// Fresh parameters from `seed`; the encoder is registered first.
    pub fn new(dims: &Dims, with_lists: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::register(&mut params, dims, with_lists, &mut rng)?;
        let classifier = Classifier::register(&mut params, dims, &mut rng)?;
        Ok(Self {
            encoder,
            classifier,
            params,
        })
    }

    /// Copies every same-named parameter from `init`; returns the names copied.
    pub fn load_encoder(&mut self, init: &ParamStore<f32>) -> Result<Vec<String>> {
        let copied = self.params.load_matching(init)?;
        if !copied.iter().any(|n| n.starts_with("rgt.")) {
            return Err(SegaError::Config("checkpoint holds no encoder parameters for this model".into()));
        }
        Ok(copied)
    }

    /// Class probabilities `[users, 3]` in eval mode.
    pub fn probabilities(&self, inputs: &NodeInputs<f32>, index: &GraphIndex) -> Result<Vec<[f64; CLASSES]>> {
        let mut tape = Tape::eval();
        let z = self.encoder.user_embeddings(&mut tape, &self.params, inputs, index, 0.0)?;
        let p = self.classifier.classify(&mut tape, &self.params, z)?;
        Ok(tape
            .value(p)
            .data()
            .chunks_exact(CLASSES)
            .map(|r| [f64::from(r[0]), f64::from(r[1]), f64::from(r[2])])
            .collect())
    }

    /// User embeddings `[users, d_u]` in eval mode.
    pub fn user_embeddings(&self, inputs: &NodeInputs<f32>, index: &GraphIndex) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::eval();
        let z = self.encoder.user_embeddings(&mut tape, &self.params, inputs, index, 0.0)?;
        let v = tape.value(z);
        let width = v.shape()[1];
        Ok(v.data().chunks_exact(width).map(<[f32]>::to_vec).collect())
    }

    pub fn predict(&self, inputs: &NodeInputs<f32>, index: &GraphIndex) -> Result<Vec<Label>> {
        Ok(self.probabilities(inputs, index)?.iter().map(argmax).collect())
    }

    pub fn evaluate_split(&self, inputs: &NodeInputs<f32>, index: &GraphIndex, split: &SplitRows) -> Result<MetricsReport> {
        let all = self.predict(inputs, index)?;
        let preds: Vec<Label> = split.rows.iter().map(|&r| all[r]).collect();
        evaluate(&preds, &split.labels)
    }
}

/// First index of the maximum; ties go to the lower class.
pub fn argmax(p: &[f64; CLASSES]) -> Label {
    let mut best = 0;
    for i in 1..CLASSES {
        if p[i] > p[best] {
            best = i;
        }
    }
    Label::from_index(best).expect("class index")
}

/// `sum CE + lambda * sum w^2` over one batch.
#[allow(clippy::too_many_arguments)]
pub fn finetune_loss<T: Scalar>(
    tape: &mut Tape<T>,
    detector_encoder: &Encoder,
    classifier: &Classifier,
    store: &ParamStore<T>,
    inputs: &NodeInputs<T>,
    index: &GraphIndex,
    rows: &[usize],
    labels: &[usize],
    lambda: f64,
    dropout: f64,
) -> Result<Var> {
    let z = detector_encoder.user_embeddings(tape, store, inputs, index, dropout)?;
    let zb = tape.gather_rows(z, rows.to_vec().into())?;
    let logits = classifier.logits(tape, store, zb)?;
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    let mut squares = Vec::with_capacity(store.len());
    for id in store.ids() {
        let w = tape.param(store, id)?;
        let sq = tape.mul(w, w)?;
        squares.push(tape.sum(sq)?);
    }
    let mut l2 = squares[0];
    for &s in &squares[1..] {
        l2 = tape.add(l2, s)?;
    }
    let l2 = tape.scale(l2, T::from_f64_lossy(lambda))?;
    Ok(tape.add(ce, l2)?)
}

pub struct FinetuneOutput {
    /// Parameters of the epoch with the best validation macro-F1.
    pub detector: Detector,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

pub fn finetune(setup: &FinetuneSetup, config: &FinetuneConfig, seed: u64, init: Option<&ParamStore<f32>>) -> Result<FinetuneOutput> {
    config.check()?;
    if setup.train.is_empty() {
        return Err(SegaError::Invalid("train split is empty".into()));
    }
    let mut det = Detector::new(&setup.dims, setup.with_lists, seed)?;
    if let Some(init) = init {
        let copied = det.load_encoder(init)?;
        log::info!("initialized {} parameter tensors from checkpoint", copied.len());
    }
    let mut opt = AdamWState::new(
        AdamWConfig {
            lr: config.lr,
            ..AdamWConfig::default()
        },
        &det.params,
    );
    let labels: Vec<usize> = setup.train.labels.iter().map(|l| l.index()).collect();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = epoch_rng(seed ^ 0x5eed_f17e, epoch);
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let rows: Vec<usize> = batch.iter().map(|&k| setup.train.rows[k]).collect();
            let ys: Vec<usize> = batch.iter().map(|&k| labels[k]).collect();
            let mut tape = Tape::train(rng.random());
            let loss = finetune_loss(
                &mut tape,
                &det.encoder,
                &det.classifier,
                &det.params,
                setup.inputs,
                setup.index,
                &rows,
                &ys,
                config.lambda,
                config.dropout,
            )?;
            total += f64::from(tape.value(loss).item().unwrap_or(f32::NAN));
            let grads = tape.backward(loss)?;
            let grads: Vec<_> = grads.param_grads(&det.params).into_iter().map(Some).collect();
            opt.step(&mut det.params, &grads)?;
        }
        let valid_f1 = if setup.valid.is_empty() {
            0.0
        } else {
            det.evaluate_split(setup.inputs, setup.index, &setup.valid)?.macro_avg.f1
        };
        log::debug!("finetune epoch {epoch}: loss {total:.6}, valid macro-F1 {valid_f1:.4}");
        log.push(EpochRecord {
            epoch: epoch + 1,
            loss: total / labels.len() as f64,
            valid_macro_f1: valid_f1,
        });
        let better = match &best {
            None => true,
            Some((f, _, _)) => valid_f1 > *f || setup.valid.is_empty(),
        };
        if better {
            best = Some((valid_f1, epoch + 1, det.params.clone()));
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            det.params = params;
            epoch
        }
        None => 0,
    };
    Ok(FinetuneOutput {
        detector: det,
        best_epoch,
        log,
    })
}
