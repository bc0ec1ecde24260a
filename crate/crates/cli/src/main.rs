//! `sega`: dataset synthesis, preference extraction, training, evaluation and export.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sega_core::config::RunConfig;
use sega_core::dataset::load_dataset;
use sega_core::export::{export_rows, write_embeddings_csv, write_pca_csv, ExportFilter};
use sega_core::graph::Split;
use sega_core::pipeline::{
    complete_prefs, load_checkpoint, load_detector, load_prefs, prefs_path, run_finetune, run_pretrain, train,
    write_metrics, write_pretrain_outputs, write_train_outputs, Prepared, TrainReport, CONFIG_FILE, METRICS_FILE,
};
use sega_core::prefs::{HttpLlm, LlmBackend, PreferenceCache, TemplateKind};
use sega_core::pretrain::Objective;
use sega_core::synth::{synth_to_dir, SynthConfig};
use sega_core::SegaError;

const EMBEDDINGS_FILE: &str = "embeddings.csv";
const PCA_FILE: &str = "embeddings_pca2.csv";

#[derive(Parser)]
#[command(name = "sega", version, about = "Bot and troll detection on user/list graphs")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for training and for `synth`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted preferences.
    Synth {
        /// Preset where list membership carries most of the class signal.
        #[arg(long)]
        list_routed: bool,
    },
    /// Fill in missing entries of a dataset's preference cache.
    Prefs {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Sampling temperature sent to the model endpoint.
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
    },
    /// Pre-training only.
    Pretrain(StageArgs),
    /// Fine-tuning only, optionally from a pre-trained checkpoint.
    Finetune {
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Pre-training followed by fine-tuning and test evaluation.
    Train(StageArgs),
    /// Evaluate a saved detector.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Export user embeddings of a saved detector as CSV.
    ExportEmb {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// `label=..`, `split=..`, `topic=..` or `emotion=..`.
        #[arg(long)]
        filter: Option<String>,
        /// Also write a two-component PCA projection.
        #[arg(long)]
        pca2: bool,
    },
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    ablation: Vec<AblationFlag>,
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    objective: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationFlag {
    NoList,
    NoPretrain,
}

enum Failure {
    Usage(String),
    Run(SegaError),
}

impl From<SegaError> for Failure {
    fn from(e: SegaError) -> Self {
        Failure::Run(e)
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn base_config(cli: &Cli) -> Outcome<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.synth.seed = seed;
    }
    Ok(config)
}

fn apply_stage(config: &mut RunConfig, args: &StageArgs) -> Outcome {
    if let Some(d) = &args.dataset {
        config.dataset = Some(d.clone());
    }
    for a in &args.ablation {
        match a {
            AblationFlag::NoList => config.ablation.no_list = true,
            AblationFlag::NoPretrain => config.ablation.no_pretrain = true,
        }
    }
    if let Some(t) = &args.template {
        config.pretrain.template =
            TemplateKind::parse(t).ok_or_else(|| usage(format!("unknown template `{t}`; expected default, short, topic, emotion or tandem")))?;
    }
    if let Some(o) = &args.objective {
        config.pretrain.objective =
            Objective::parse(o).ok_or_else(|| usage(format!("unknown objective `{o}`; expected contrastive or multilabel")))?;
    }
    Ok(())
}

fn dataset_of(config: &RunConfig) -> Outcome<PathBuf> {
    config
        .dataset
        .clone()
        .ok_or_else(|| usage("no dataset: pass --dataset or set `dataset` in the config file"))
}

fn out_dir(cli: &Cli) -> Outcome<&Path> {
    let dir = cli.out.as_deref().ok_or_else(|| usage("this command writes files and needs --out <dir>"))?;
    fs::create_dir_all(dir).map_err(|e| SegaError::io(dir, e))?;
    Ok(dir)
}

/// Preferences are only read when pre-training will run.
fn prefs_for(config: &RunConfig, dataset: &Path) -> Outcome<Option<PreferenceCache>> {
    if config.ablation.no_pretrain {
        return Ok(None);
    }
    if !prefs_path(dataset).exists() {
        return Err(SegaError::Config(format!(
            "{} is missing; run `sega prefs --dataset {}` first",
            prefs_path(dataset).display(),
            dataset.display()
        ))
        .into());
    }
    Ok(Some(load_prefs(dataset)?))
}

fn write_config(dir: &Path, config: &RunConfig) -> Outcome {
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, config.to_json()).map_err(|e| SegaError::io(&path, e))?;
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    let mut config = base_config(cli)?;
    match &cli.command {
        Command::Synth { list_routed } => {
            let out = out_dir(cli)?;
            let synth = if *list_routed { SynthConfig::list_routed(config.synth.seed) } else { config.synth.clone() };
            let data = synth_to_dir(&synth, out)?;
            let s = data.graph.stats();
            println!("{} users, {} lists, {} edges written to {}", s.users, s.lists, s.edges, out.display());
        }
        Command::Prefs { dataset, temperature } => {
            if let Some(d) = dataset {
                config.dataset = Some(d.clone());
            }
            let dataset = dataset_of(&config)?;
            let http = HttpLlm::from_env(*temperature);
            let r = complete_prefs(&dataset, http.as_ref().map(|b| b as &dyn LlmBackend))?;
            println!("{} cached, {} extracted, file {}", r.cached, r.extracted, if r.written { "written" } else { "unchanged" });
        }
        Command::Pretrain(args) => {
            apply_stage(&mut config, args)?;
            if config.ablation.no_pretrain {
                return Err(usage("--ablation no-pretrain makes `pretrain` a no-op"));
            }
            config.check()?;
            let dataset = dataset_of(&config)?;
            let out = out_dir(cli)?;
            let graph = load_dataset(&dataset)?;
            let prefs = prefs_for(&config, &dataset)?.expect("pre-training reads preferences");
            let prep = Prepared::new(&graph, &config)?;
            let (ckpt, log) = run_pretrain(&prep, &prefs, &config)?;
            write_config(out, &config)?;
            write_pretrain_outputs(out, &ckpt, &log)?;
            println!("pretrain: {} epochs, final loss {}", log.len(), log.last().map_or(f64::NAN, |e| e.loss));
        }
        Command::Finetune { stage, init } => {
            apply_stage(&mut config, stage)?;
            if let Some(p) = init {
                config.init_checkpoint = Some(p.clone());
            }
            if config.init_checkpoint.is_none() {
                config.ablation.no_pretrain = true;
            }
            config.check()?;
            let dataset = dataset_of(&config)?;
            let out = out_dir(cli)?;
            let graph = load_dataset(&dataset)?;
            let prep = Prepared::new(&graph, &config)?;
            let init = config.init_checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let finetune = run_finetune(&prep, &config, init.as_ref().map(|c| &c.params))?;
            let test = finetune.detector.evaluate_split(&prep.inputs, &prep.index, &prep.split(Split::Test)?)?;
            let stages = vec![
                format!("finetune: {} epochs, best epoch {}", finetune.log.len(), finetune.best_epoch),
                format!("test: macro-F1 {}", test.macro_avg.f1),
            ];
            let report = TrainReport {
                pretrain: None,
                finetune,
                test,
                stages,
            };
            write_train_outputs(out, &config, &report)?;
            report.stages.iter().for_each(|s| println!("{s}"));
        }
        Command::Train(args) => {
            apply_stage(&mut config, args)?;
            config.check()?;
            let dataset = dataset_of(&config)?;
            let out = out_dir(cli)?;
            let graph = load_dataset(&dataset)?;
            let prefs = prefs_for(&config, &dataset)?;
            let report = train(&graph, prefs.as_ref(), &config)?;
            write_train_outputs(out, &config, &report)?;
            report.stages.iter().for_each(|s| println!("{s}"));
        }
        Command::Eval { model, dataset, split } => {
            let split = Split::parse(split).ok_or_else(|| usage(format!("unknown split `{split}`")))?;
            let (saved, detector) = load_detector(model)?;
            let dataset = dataset.clone().or(saved.dataset.clone()).ok_or_else(|| usage("no dataset: pass --dataset"))?;
            let graph = load_dataset(&dataset)?;
            let prep = Prepared::new(&graph, &saved)?;
            let metrics = detector.evaluate_split(&prep.inputs, &prep.index, &prep.split(split)?)?;
            println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
            if cli.out.is_some() {
                write_metrics(&out_dir(cli)?.join(METRICS_FILE), &metrics)?;
            }
        }
        Command::ExportEmb {
            model,
            dataset,
            filter,
            pca2,
        } => {
            let filter = match filter {
                Some(f) => ExportFilter::parse(f).map_err(|e| usage(e.to_string()))?,
                None => ExportFilter::All,
            };
            let (saved, detector) = load_detector(model)?;
            let dataset = dataset.clone().or(saved.dataset.clone()).ok_or_else(|| usage("no dataset: pass --dataset"))?;
            let out = out_dir(cli)?;
            let graph = load_dataset(&dataset)?;
            let prefs = if prefs_path(&dataset).exists() { Some(load_prefs(&dataset)?) } else { None };
            let prep = Prepared::new(&graph, &saved)?;
            let rows = export_rows(&detector, &prep, prefs.as_ref(), filter)?;
            write_embeddings_csv(&out.join(EMBEDDINGS_FILE), &rows)?;
            if *pca2 {
                write_pca_csv(&out.join(PCA_FILE), &rows)?;
            }
            println!("{} users exported to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `sega --help` for usage.");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
