//! Run configuration: built-in defaults, then the TOML file, then
//! `--paper-mode`, then individual flags. `MM_ISTS_CACHE` fills the cache
//! directory only when neither the file nor `--cache-dir` sets it.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use mmists_core::data::SynthConfig;
use mmists_core::experiment::{ExperimentConfig, ProviderConfig, ProviderKind};
use mmists_core::model::ModelConfig;
use mmists_core::pipeline::{ImageValues, PipelineConfig};
use mmists_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CACHE_ENV: &str = "MM_ISTS_CACHE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: String,
    pub paper_mode: bool,
    pub model: ModelConfig,
    pub embedding: ProviderConfig,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub synthetic: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            seed: e.seed,
            variant: e.variant,
            paper_mode: false,
            model: e.model,
            embedding: e.embedding,
            pipeline: e.pipeline,
            train: e.train,
            synthetic: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            variant: self.variant.clone(),
            model: self.model.clone(),
            embedding: self.embedding.clone(),
            pipeline: self.pipeline.clone(),
            train: self.train.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProviderArg {
    Synthetic,
    FileCache,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ImageValuesArg {
    Raw,
    Normalized,
}

/// One flag per config key.
#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Model variant: full, without-text, without-image, without-qbe, without-align.
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Learning rate 1e-5, batch 8, three layers per stack; flags still win.
    #[arg(long, global = true)]
    pub paper_mode: bool,

    #[arg(long, global = true, help_heading = "Model")]
    pub model_n_vars: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub dim: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub heads: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub temporal_layers: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub variable_layers: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub extractor_layers: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub extractor_heads: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub embed_width: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub fusion_residual: Option<bool>,
    #[arg(long, global = true, help_heading = "Model")]
    pub predictor_hidden: Option<usize>,

    #[arg(long, global = true, value_enum, help_heading = "Embedding")]
    pub provider: Option<ProviderArg>,
    #[arg(long, global = true, help_heading = "Embedding")]
    pub tokens: Option<usize>,
    /// Embedding cache directory [env: MM_ISTS_CACHE].
    #[arg(long, global = true, help_heading = "Embedding")]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "Embedding")]
    pub cache_fallback: Option<bool>,
    #[arg(long, global = true, help_heading = "Embedding")]
    pub layer_offset: Option<u16>,

    #[arg(long, global = true, help_heading = "Pipeline")]
    pub seq_len_cap: Option<usize>,
    #[arg(long, global = true, help_heading = "Pipeline")]
    pub tau: Option<f64>,
    #[arg(long, global = true, help_heading = "Pipeline")]
    pub image_height: Option<usize>,
    #[arg(long, global = true, help_heading = "Pipeline")]
    pub image_width: Option<usize>,
    #[arg(long, global = true, value_enum, help_heading = "Pipeline")]
    pub image_values: Option<ImageValuesArg>,
    #[arg(long, global = true, help_heading = "Pipeline")]
    pub include_unobserved_queries: Option<bool>,
    #[arg(long, global = true, help_heading = "Pipeline")]
    pub dataset_name: Option<String>,

    #[arg(long, global = true, help_heading = "Training")]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true, help_heading = "Training")]
    pub batch_size: Option<usize>,
    #[arg(long, global = true, help_heading = "Training")]
    pub epochs: Option<usize>,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[arg(long, global = true, help_heading = "Training")]
    pub patience: Option<usize>,
    #[arg(long, global = true, help_heading = "Training")]
    pub beta1: Option<f64>,
    #[arg(long, global = true, help_heading = "Training")]
    pub beta2: Option<f64>,
    #[arg(long, global = true, help_heading = "Training")]
    pub adam_eps: Option<f64>,

    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub n_vars: Option<usize>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub l_max: Option<usize>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub samples: Option<usize>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub obs_rate: Option<f64>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub noise: Option<f64>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub horizon: Option<usize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub fn load_file(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::MissingInput(format!("config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::ConfigInvalid(format!("{}: {}", path.display(), e.message())))
}

impl Overrides {
    pub fn resolve(&self, env_cache: Option<PathBuf>) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => load_file(p)?,
            None => RunConfig::default(),
        };
        if self.paper_mode || c.paper_mode {
            c.paper_mode = true;
            let e = c.experiment().paper_mode();
            c.model = e.model;
            c.train = e.train;
        }
        set(&mut c.seed, self.seed);
        set(&mut c.variant, self.variant.clone());

        let m = &mut c.model;
        set(&mut m.n_vars, self.model_n_vars);
        set(&mut m.dim, self.dim);
        set(&mut m.heads, self.heads);
        set(&mut m.temporal_layers, self.temporal_layers);
        set(&mut m.variable_layers, self.variable_layers);
        set(&mut m.extractor_layers, self.extractor_layers);
        set(&mut m.extractor_heads, self.extractor_heads);
        set(&mut m.embed_width, self.embed_width);
        set(&mut m.fusion_residual, self.fusion_residual);
        if self.predictor_hidden.is_some() {
            m.predictor_hidden = self.predictor_hidden;
        }

        let e = &mut c.embedding;
        set(
            &mut e.kind,
            self.provider.map(|p| match p {
                ProviderArg::Synthetic => ProviderKind::Synthetic,
                ProviderArg::FileCache => ProviderKind::FileCache,
            }),
        );
        set(&mut e.tokens, self.tokens);
        if self.cache_dir.is_some() {
            e.cache_dir = self.cache_dir.clone();
        }
        if e.cache_dir.is_none() {
            e.cache_dir = env_cache;
        }
        set(&mut e.fallback, self.cache_fallback);
        set(&mut e.layer_offset, self.layer_offset);

        let p = &mut c.pipeline;
        if self.seq_len_cap.is_some() {
            p.seq_len_cap = self.seq_len_cap;
        }
        set(&mut p.tau, self.tau);
        if self.image_height.is_some() {
            p.image_height = self.image_height;
        }
        if self.image_width.is_some() {
            p.image_width = self.image_width;
        }
        set(
            &mut p.image_values,
            self.image_values.map(|v| match v {
                ImageValuesArg::Raw => ImageValues::Raw,
                ImageValuesArg::Normalized => ImageValues::Normalized,
            }),
        );
        set(&mut p.include_unobserved_queries, self.include_unobserved_queries);
        set(&mut p.dataset_name, self.dataset_name.clone());

        let t = &mut c.train;
        set(&mut t.learning_rate, self.learning_rate);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.epochs, self.epochs);
        if let Some(p) = self.patience {
            t.patience = (p > 0).then_some(p);
        }
        set(&mut t.beta1, self.beta1);
        set(&mut t.beta2, self.beta2);
        set(&mut t.adam_eps, self.adam_eps);

        let s = &mut c.synthetic;
        set(&mut s.n_vars, self.n_vars);
        set(&mut s.l_max, self.l_max);
        set(&mut s.samples, self.samples);
        set(&mut s.obs_rate, self.obs_rate);
        set(&mut s.noise, self.noise);
        set(&mut s.horizon, self.horizon);

        c.experiment().validate()?;
        c.synthetic.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\ndepth = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("colour = 1\n").is_err());
    }

    #[test]
    fn flags_override_file_and_env_fills_cache() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 3\n[train]\nepochs = 5\nlearning_rate = 0.01\n").unwrap();
        let o = Overrides {
            config: Some(path),
            epochs: Some(9),
            patience: Some(0),
            ..Default::default()
        };
        let c = o.resolve(Some("/env/cache".into())).unwrap();
        assert_eq!((c.seed, c.train.epochs, c.train.learning_rate), (3, 9, 0.01));
        assert_eq!(c.train.patience, None);
        assert_eq!(c.embedding.cache_dir, Some(PathBuf::from("/env/cache")));
    }

    #[test]
    fn paper_mode_applies_before_flags() {
        let o = Overrides {
            paper_mode: true,
            batch_size: Some(2),
            ..Default::default()
        };
        let c = o.resolve(None).unwrap();
        assert_eq!((c.train.learning_rate, c.train.batch_size), (1e-5, 2));
    }

    #[test]
    fn invalid_values_fail_validation() {
        let o = Overrides {
            tau: Some(1.5),
            ..Default::default()
        };
        assert!(o.resolve(None).is_err());
    }
}
