//! Stage drivers shared by the command line and the end-to-end tests.

use std::fs;
use std::path::{Path, PathBuf};

use sega_autodiff::{AdamWConfig, AutodiffError, Checkpoint, ParamStore};

use crate::config::RunConfig;
use crate::dataset::load_dataset;
use crate::detect::{finetune, Detector, FinetuneOutput, FinetuneSetup, MetricsReport, SplitRows, write_epoch_log};
use crate::embed::{EmbeddingProvider, Role};
use crate::error::{Result, SegaError};
use crate::features::{encode_inputs, NodeInputs, NormStats};
use crate::graph::{HeteroGraph, Split};
use crate::model::{encoder_relations, Dims};
use crate::prefs::{recent_posts, Extractor, LlmBackend, PreferenceCache};
use crate::pretrain::{pretrain, write_loss_log, EpochLoss, Objective, PretrainSetup, PretrainTargets, PromptPool};
use crate::rgt::GraphIndex;
use crate::synth::PREFS_FILE;

pub const CONFIG_FILE: &str = "config.json";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_loss.csv";
pub const DETECTOR_CKPT: &str = "detector.ckpt";
pub const FINETUNE_LOG: &str = "finetune_log.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const RUN_LOG: &str = "run.log";

/// Encoded inputs for one graph under one configuration.
pub struct Prepared {
    /// The graph actually encoded; lists are gone under `no_list`.
    pub graph: HeteroGraph,
    pub dims: Dims,
    pub with_lists: bool,
    pub inputs: NodeInputs<f32>,
    pub index: GraphIndex,
}

impl Prepared {
    pub fn new(graph: &HeteroGraph, config: &RunConfig) -> Result<Self> {
        let text = EmbeddingProvider::new(Role::Text, &config.text_provider)?;
        let out = Self::with_provider(graph, config, &text)?;
        text.flush_cache()?;
        Ok(out)
    }

    pub fn with_provider(graph: &HeteroGraph, config: &RunConfig, text: &EmbeddingProvider) -> Result<Self> {
        let with_lists = config.with_lists();
        let graph = if with_lists { graph.clone() } else { graph.without_lists() };
        let stats = NormStats::fit(&graph)?;
        let inputs = encode_inputs(&graph, &stats, text)?;
        if inputs.users.des.shape()[1] != config.dims.text {
            return Err(SegaError::Config(format!(
                "text embeddings are {} wide, model expects {}",
                inputs.users.des.shape()[1],
                config.dims.text
            )));
        }
        let index = GraphIndex::build(&graph, &encoder_relations(with_lists))?;
        Ok(Self {
            graph,
            dims: config.dims,
            with_lists,
            inputs,
            index,
        })
    }

    pub fn split(&self, split: Split) -> Result<SplitRows> {
        SplitRows::of(&self.graph, split)
    }
}

/// Pre-training on a prepared graph.
pub fn run_pretrain(prep: &Prepared, prefs: &PreferenceCache, config: &RunConfig) -> Result<(Checkpoint<f32>, Vec<EpochLoss>)> {
    let objective = match config.pretrain.objective {
        Objective::Contrastive => {
            let pool = PromptPool::build(&prep.graph, prefs, config.pretrain.template);
            let provider = EmbeddingProvider::new(Role::Prompt, &config.prompt_provider)?;
            let prompts = pool.embed(&provider)?;
            provider.flush_cache()?;
            if !pool.texts.is_empty() && prompts.shape()[1] != config.dims.text {
                return Err(SegaError::Config(format!(
                    "prompt embeddings are {} wide, model expects {}",
                    prompts.shape()[1],
                    config.dims.text
                )));
            }
            PretrainTargets::Contrastive {
                prompts,
                anchors: pool.anchors,
            }
        }
        Objective::Multilabel => PretrainTargets::multilabel(&prep.graph, prefs),
    };
    let setup = PretrainSetup {
        dims: prep.dims,
        with_lists: prep.with_lists,
        inputs: &prep.inputs,
        index: &prep.index,
        objective,
    };
    pretrain(&setup, &config.pretrain, config.seed)
}

pub fn run_finetune(prep: &Prepared, config: &RunConfig, init: Option<&ParamStore<f32>>) -> Result<FinetuneOutput> {
    let setup = FinetuneSetup {
        dims: prep.dims,
        with_lists: prep.with_lists,
        inputs: &prep.inputs,
        index: &prep.index,
        train: prep.split(Split::Train)?,
        valid: prep.split(Split::Valid)?,
    };
    finetune(&setup, &config.finetune, config.seed, init)
}

pub struct TrainReport {
    pub pretrain: Option<(Checkpoint<f32>, Vec<EpochLoss>)>,
    pub finetune: FinetuneOutput,
    pub test: MetricsReport,
    /// One line per stage, as written to the run log.
    pub stages: Vec<String>,
}

/// Pre-training (unless disabled) followed by fine-tuning and test evaluation.
pub fn train(graph: &HeteroGraph, prefs: Option<&PreferenceCache>, config: &RunConfig) -> Result<TrainReport> {
    config.check()?;
    let prep = Prepared::new(graph, config)?;
    train_prepared(&prep, prefs, config)
}

pub fn train_prepared(prep: &Prepared, prefs: Option<&PreferenceCache>, config: &RunConfig) -> Result<TrainReport> {
    config.check()?;
    let mut stages = Vec::new();
    let pretrained = if config.ablation.no_pretrain {
        stages.push("pretrain: skipped (no_pretrain)".to_string());
        None
    } else {
        let prefs = prefs.ok_or_else(|| SegaError::Config("pre-training needs a preference cache".into()))?;
        let (ckpt, log) = run_pretrain(prep, prefs, config)?;
        stages.push(format!(
            "pretrain: {} epochs, objective {}, template {}, final loss {}",
            log.len(),
            config.pretrain.objective,
            config.pretrain.template,
            log.last().map_or(f64::NAN, |e| e.loss)
        ));
        Some((ckpt, log))
    };
    let ft = run_finetune(prep, config, pretrained.as_ref().map(|(c, _)| &c.params))?;
    stages.push(format!(
        "finetune: {} epochs, best epoch {}, lists {}",
        ft.log.len(),
        ft.best_epoch,
        if prep.with_lists { "on" } else { "off" }
    ));
    let test = ft.detector.evaluate_split(&prep.inputs, &prep.index, &prep.split(Split::Test)?)?;
    stages.push(format!("test: macro-F1 {}", test.macro_avg.f1));
    Ok(TrainReport {
        pretrain: pretrained,
        finetune: ft,
        test,
        stages,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| SegaError::io(path, e))
}

pub fn write_metrics(path: &Path, metrics: &MetricsReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(metrics).expect("metrics serialize");
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn write_pretrain_outputs(dir: &Path, ckpt: &Checkpoint<f32>, log: &[EpochLoss]) -> Result<()> {
    save_checkpoint(ckpt, &dir.join(PRETRAIN_CKPT))?;
    write_loss_log(&dir.join(PRETRAIN_LOG), log)
}

pub fn write_detector(dir: &Path, detector: &Detector) -> Result<()> {
    let ckpt = Checkpoint {
        params: detector.params.clone(),
        optimizer: None,
    };
    save_checkpoint(&ckpt, &dir.join(DETECTOR_CKPT))
}

pub fn save_checkpoint(ckpt: &Checkpoint<f32>, path: &Path) -> Result<()> {
    ckpt.save(path).map_err(|e| match e {
        AutodiffError::Io(io) => SegaError::io(path, io),
        other => other.into(),
    })
}

/// Writes every artifact of a training run into `dir`.
pub fn write_train_outputs(dir: &Path, config: &RunConfig, report: &TrainReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SegaError::io(dir, e))?;
    write_file(&dir.join(CONFIG_FILE), config.to_json().as_bytes())?;
    if let Some((ckpt, log)) = &report.pretrain {
        write_pretrain_outputs(dir, ckpt, log)?;
    }
    write_detector(dir, &report.finetune.detector)?;
    write_epoch_log(&dir.join(FINETUNE_LOG), &report.finetune.log)?;
    write_metrics(&dir.join(METRICS_FILE), &report.test)?;
    let mut log = report.stages.join("\n");
    log.push('\n');
    write_file(&dir.join(RUN_LOG), log.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    Checkpoint::load(path, AdamWConfig::default()).map_err(|e| match e {
        AutodiffError::Io(io) => SegaError::io(path, io),
        other => SegaError::Config(format!("{}: {other}", path.display())),
    })
}

/// A detector rebuilt from a saved run directory.
pub fn load_detector(model_dir: &Path) -> Result<(RunConfig, Detector)> {
    let config = RunConfig::load(&model_dir.join(CONFIG_FILE))?;
    let mut detector = Detector::new(&config.dims, config.with_lists(), config.seed)?;
    let ckpt = load_checkpoint(&model_dir.join(DETECTOR_CKPT))?;
    if ckpt.params.names() != detector.params.names() {
        return Err(SegaError::Config(format!(
            "{} does not match the configured model",
            model_dir.join(DETECTOR_CKPT).display()
        )));
    }
    detector.params = ckpt.params;
    Ok((config, detector))
}

/// Metrics of a saved detector on one split of `graph`.
pub fn evaluate_saved(model_dir: &Path, graph: &HeteroGraph, split: Split) -> Result<MetricsReport> {
    let (config, detector) = load_detector(model_dir)?;
    let prep = Prepared::new(graph, &config)?;
    detector.evaluate_split(&prep.inputs, &prep.index, &prep.split(split)?)
}

pub fn prefs_path(dataset: &Path) -> PathBuf {
    dataset.join(PREFS_FILE)
}

pub fn load_prefs(dataset: &Path) -> Result<PreferenceCache> {
    PreferenceCache::load(&prefs_path(dataset))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrefsReport {
    pub cached: usize,
    pub extracted: usize,
    pub written: bool,
}

/// Completes the preference cache of a dataset directory. Users already
/// cached are never re-queried; the file is rewritten only if it changed.
pub fn complete_prefs(dataset: &Path, backend: Option<&dyn LlmBackend>) -> Result<PrefsReport> {
    let graph = load_dataset(dataset)?;
    let path = prefs_path(dataset);
    let cache = PreferenceCache::load_or_empty(&path)?;
    let missing: Vec<&str> = graph
        .users()
        .iter()
        .filter(|u| !recent_posts(&u.attrs.tweets).is_empty() && !cache.contains(&u.id))
        .map(|u| u.id.as_str())
        .collect();
    let cached = graph.users().len() - missing.len();
    if missing.is_empty() {
        let written = !path.exists();
        if written {
            cache.save(&path)?;
        }
        return Ok(PrefsReport {
            cached,
            extracted: 0,
            written,
        });
    }
    if backend.is_none() {
        const SHOWN: usize = 20;
        let mut ids = missing[..missing.len().min(SHOWN)].join(", ");
        if missing.len() > SHOWN {
            ids.push_str(&format!(", ... ({} more)", missing.len() - SHOWN));
        }
        return Err(SegaError::Llm(format!(
            "{} users have no cached preferences and no model endpoint is configured: {ids}",
            missing.len()
        )));
    }
    let mut extractor = Extractor::new(cache, backend);
    for id in &missing {
        let user = graph.user(id).expect("user from graph");
        extractor.extract(id, &user.attrs.tweets)?;
        // keep progress if a later request fails
        if extractor.calls().is_multiple_of(50) {
            extractor.cache.save(&path)?;
        }
    }
    extractor.cache.save(&path)?;
    Ok(PrefsReport {
        cached,
        extracted: missing.len(),
        written: true,
    })
}
