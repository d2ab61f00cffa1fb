//! End-to-end runs: split, normalize, embed, train, evaluate, persist.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{dataset_seq_len, split_dataset, DatasetSplit, Normalizer, Sample};
use crate::embedding::{EmbeddingProvider, FileCacheProvider, SyntheticProvider, DEFAULT_LAYER_OFFSET};
use crate::encoding::PromptTemplates;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::pipeline::{PipelineConfig, PreparedSample, Preparer};
use crate::seed::derive_seed;
use crate::train::{evaluate, mean_baseline, train, EpochLog, Metrics, TrainConfig, TrainReport};
use crate::variant::VariantRegistry;

pub const PARAMS_FILE: &str = "params.ckpt";
pub const RUN_FILE: &str = "run.json";
pub const LOG_FILE: &str = "epochs.ndjson";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    #[default]
    Synthetic,
    FileCache,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// `S` for the synthetic provider.
    pub tokens: usize,
    pub cache_dir: Option<PathBuf>,
    /// On a cache miss, use the synthetic provider instead of failing.
    pub fallback: bool,
    pub layer_offset: u16,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Synthetic,
            tokens: 32,
            cache_dir: None,
            fallback: false,
            layer_offset: DEFAULT_LAYER_OFFSET,
        }
    }
}

impl ProviderConfig {
    pub fn synthetic(&self, root_seed: u64, width: usize) -> SyntheticProvider {
        SyntheticProvider {
            tokens: self.tokens,
            width,
            seed: derive_seed(root_seed, "embedding"),
        }
    }

    pub fn build(&self, root_seed: u64, width: usize) -> Result<Box<dyn EmbeddingProvider>> {
        if self.tokens == 0 {
            return Err(Error::InvalidConfig("embedding tokens must be at least 1".into()));
        }
        Ok(match self.kind {
            ProviderKind::Synthetic => Box::new(self.synthetic(root_seed, width)),
            ProviderKind::FileCache => {
                let dir = self
                    .cache_dir
                    .clone()
                    .ok_or_else(|| Error::InvalidConfig("file-cache provider needs cache_dir".into()))?;
                Box::new(FileCacheProvider {
                    dir,
                    fallback: self.fallback.then(|| self.synthetic(root_seed, width)),
                })
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub variant: String,
    pub model: ModelConfig,
    pub embedding: ProviderConfig,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            variant: "full".into(),
            model: ModelConfig::default(),
            embedding: ProviderConfig::default(),
            pipeline: PipelineConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Learning rate `1e-5`, batch 8, three layers in every stack.
    pub fn paper_mode(mut self) -> Self {
        self.train.learning_rate = 1e-5;
        self.train.batch_size = 8;
        self.model.extractor_layers = 3;
        self.model.temporal_layers = 3;
        self.model.variable_layers = 3;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.train.validate()?;
        if self.model.n_vars != 0 {
            self.model.validate()?;
        }
        Ok(())
    }
}

/// Dataset-level facts fixed before training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataContext {
    pub n_vars: usize,
    pub seq_len: usize,
    pub normalizer: Normalizer,
}

impl DataContext {
    pub fn fit(samples: &[Sample], split: &DatasetSplit, cap: Option<usize>) -> Result<Self> {
        let n_vars = samples
            .first()
            .map(Sample::n_vars)
            .ok_or(Error::TooFewSamples { required: 1, got: 0 })?;
        let seq_len = dataset_seq_len(samples, cap).max(1);
        Ok(Self {
            n_vars,
            seq_len,
            normalizer: Normalizer::fit(&split.train, n_vars),
        })
    }
}

pub struct PreparedSplits {
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
}

impl PreparedSplits {
    pub fn get(&self, split: &str) -> Result<&[PreparedSample]> {
        match split {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

/// Splits `samples`, fits the normalizer and prepares every split for `config.variant`.
pub fn prepare_experiment(
    config: &ExperimentConfig,
    samples: Vec<Sample>,
    registry: &VariantRegistry,
    templates: &PromptTemplates,
) -> Result<(DataContext, PreparedSplits)> {
    config.validate()?;
    let all = samples.clone();
    let split = split_dataset(samples, config.seed)?;
    let ctx = DataContext::fit(&all, &split, config.pipeline.seq_len_cap)?;
    let variant = registry.get(&config.variant)?;
    let width = config.model.embed_width;
    let provider = config.embedding.build(config.seed, width)?;
    let prep = Preparer::new(&config.pipeline, templates, &ctx.normalizer, ctx.seq_len)?;
    let prepared = PreparedSplits {
        train: prep.prepare_all(&split.train, variant.as_ref(), provider.as_ref(), width)?,
        val: prep.prepare_all(&split.val, variant.as_ref(), provider.as_ref(), width)?,
        test: prep.prepare_all(&split.test, variant.as_ref(), provider.as_ref(), width)?,
    };
    Ok((ctx, prepared))
}

pub fn build_model(config: &ExperimentConfig, ctx: &DataContext, registry: &VariantRegistry) -> Result<Model> {
    let mut model_cfg = config.model.clone();
    model_cfg.n_vars = ctx.n_vars;
    Model::new(model_cfg, registry.get(&config.variant)?, config.seed)
}

pub struct TrainedRun {
    pub model: Model,
    pub context: DataContext,
    pub report: TrainReport,
    pub test: Metrics,
    pub baseline: Metrics,
    pub splits: PreparedSplits,
}

pub fn run_experiment(
    config: &ExperimentConfig,
    samples: Vec<Sample>,
    registry: &VariantRegistry,
    templates: &PromptTemplates,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainedRun> {
    let (context, splits) = prepare_experiment(config, samples, registry, templates)?;
    let mut model = build_model(config, &context, registry)?;
    let report = train(&mut model, &splits.train, &splits.val, &config.train, config.seed, on_epoch)?;
    let test = evaluate(&model, &splits.test, "test")?;
    let baseline = mean_baseline(&splits.test, "test")?;
    Ok(TrainedRun {
        model,
        context,
        report,
        test,
        baseline,
        splits,
    })
}

/// Everything needed to rebuild a trained model next to its parameter file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub context: DataContext,
    pub best_epoch: usize,
    pub best_score: f64,
}

pub fn save_run(dir: impl AsRef<Path>, config: &ExperimentConfig, run: &TrainedRun) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    run.model.store.save(dir.join(PARAMS_FILE))?;
    let record = RunRecord {
        config: config.clone(),
        context: run.context.clone(),
        best_epoch: run.report.best_epoch,
        best_score: run.report.best_score,
    };
    fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(&record)? + "\n")?;
    let mut log = fs::File::create(dir.join(LOG_FILE))?;
    for e in &run.report.log {
        writeln!(log, "{}", serde_json::to_string(e)?)?;
    }
    Ok(())
}

pub fn load_run(dir: impl AsRef<Path>, registry: &VariantRegistry) -> Result<(RunRecord, Model)> {
    let dir = dir.as_ref();
    let run_path = dir.join(RUN_FILE);
    let text = fs::read_to_string(&run_path).map_err(|e| Error::NotFound(format!("{}: {e}", run_path.display())))?;
    let record: RunRecord = serde_json::from_str(&text)?;
    let mut model = build_model(&record.config, &record.context, registry)?;
    let params = dir.join(PARAMS_FILE);
    if !params.exists() {
        return Err(Error::NotFound(params.display().to_string()));
    }
    model.store.load_values(params)?;
    Ok((record, model))
}

/// Prepares one split of `samples` exactly as the recorded run did.
pub fn prepare_split_for_run(
    record: &RunRecord,
    samples: Vec<Sample>,
    split: &str,
    registry: &VariantRegistry,
    templates: &PromptTemplates,
) -> Result<Vec<PreparedSample>> {
    let parts = split_dataset(samples, record.config.seed)?;
    let chosen = match split {
        "train" => parts.train,
        "val" => parts.val,
        "test" => parts.test,
        other => return Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
    };
    let cfg = &record.config;
    let variant = registry.get(&cfg.variant)?;
    let provider = cfg.embedding.build(cfg.seed, cfg.model.embed_width)?;
    let prep = Preparer::new(&cfg.pipeline, templates, &record.context.normalizer, record.context.seq_len)?;
    prep.prepare_all(&chosen, variant.as_ref(), provider.as_ref(), cfg.model.embed_width)
}
