//! Per-sample preparation: canonical form, image, statistics, prompt and
//! embedding, bundled into what the model consumes.

use mmists_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{canonicalize, CanonicalSample, Normalizer, Sample};
use crate::embedding::{get_embedding, EmbeddingProvider, EmbeddingRequest};
use crate::encoding::{
    assemble_prompt, build_image, compute_stats, resize_normalize, IrregularityImage, Prompt, PromptTemplates,
    ResizedImage, VariableStats, DEFAULT_TAU,
};
use crate::error::{Error, Result};
use crate::predictor::QueryPoint;
use crate::variant::Variant;

/// Which values populate the image's value channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageValues {
    #[default]
    Raw,
    Normalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Cap on per-variable history length; longer rows lose their oldest points.
    pub seq_len_cap: Option<usize>,
    pub tau: f64,
    /// Resized image height; `None` keeps `N`.
    pub image_height: Option<usize>,
    /// Resized image width; `None` keeps `L`.
    pub image_width: Option<usize>,
    pub image_values: ImageValues,
    /// Keep queries on variables with no history.
    pub include_unobserved_queries: bool,
    pub dataset_name: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seq_len_cap: None,
            tau: DEFAULT_TAU,
            image_height: None,
            image_width: None,
            image_values: ImageValues::Raw,
            include_unobserved_queries: true,
            dataset_name: "synthetic".into(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.image_height == Some(0) || self.image_width == Some(0) || self.seq_len_cap == Some(0) {
            return Err(Error::InvalidConfig("image size and sequence cap must be positive".into()));
        }
        Ok(())
    }
}

/// Everything derived from one raw sample before it reaches a provider.
#[derive(Clone, Debug)]
pub struct SampleViews {
    pub raw: CanonicalSample,
    pub image: IrregularityImage,
    pub resized: ResizedImage,
    pub stats: Vec<VariableStats>,
    pub prompt: Prompt,
}

/// The model's view of a sample. Values and targets are normalized.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub canonical: CanonicalSample,
    /// `[mean, std, missing_rate, density]` per variable, from raw values.
    pub stats: Vec<[f64; 4]>,
    /// `S x d_m` provider output.
    pub tokens: Tensor,
    pub queries: Vec<QueryPoint>,
}

/// Shared settings for turning raw samples into prepared ones.
pub struct Preparer<'a> {
    pub config: &'a PipelineConfig,
    pub templates: PromptTemplates,
    pub normalizer: &'a Normalizer,
    pub seq_len: usize,
}

impl<'a> Preparer<'a> {
    pub fn new(config: &'a PipelineConfig, templates: &PromptTemplates, normalizer: &'a Normalizer, seq_len: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            templates: templates.with_dataset_name(&config.dataset_name),
            normalizer,
            seq_len,
        })
    }

    fn fit(&self, sample: &Sample) -> Sample {
        if sample.max_len() > self.seq_len {
            sample.truncate_oldest(self.seq_len)
        } else {
            sample.clone()
        }
    }

    pub fn views(&self, sample: &Sample) -> Result<SampleViews> {
        let sample = self.fit(sample);
        let raw = canonicalize(&sample, self.seq_len)?;
        let image = match self.config.image_values {
            ImageValues::Raw => build_image(&raw),
            ImageValues::Normalized => build_image(&canonicalize(&self.normalizer.normalize_sample(&sample), self.seq_len)?),
        };
        let resized = resize_normalize(
            &image,
            self.config.image_height.unwrap_or(raw.n_vars),
            self.config.image_width.unwrap_or(raw.len),
        )?;
        let stats = compute_stats(&raw);
        let prompt = assemble_prompt(&stats, self.config.tau, &self.templates)?;
        Ok(SampleViews {
            raw,
            image,
            resized,
            stats,
            prompt,
        })
    }

    pub fn prepare(&self, sample: &Sample, variant: &dyn Variant, provider: &dyn EmbeddingProvider, width: usize) -> Result<PreparedSample> {
        let views = self.views(sample)?;
        let (image, prompt) = variant.provider_inputs(views.resized, views.prompt);
        let tokens = get_embedding(
            provider,
            &EmbeddingRequest {
                sample_id: &sample.id,
                image: &image,
                prompt: &prompt,
                stats: &views.stats,
            },
            width,
        )?
        .to_tensor();
        let normalized = self.normalizer.normalize_sample(&self.fit(sample));
        let canonical = canonicalize(&normalized, self.seq_len)?;
        let queries = normalized
            .queries
            .iter()
            .filter(|q| self.config.include_unobserved_queries || canonical.observed_count(q.var_index) > 0)
            .filter_map(|q| {
                q.target.map(|target| QueryPoint {
                    var: q.var_index,
                    q: q.q,
                    target,
                })
            })
            .collect();
        Ok(PreparedSample {
            id: sample.id.clone(),
            canonical,
            stats: views.stats.iter().map(|s| s.vector()).collect(),
            tokens,
            queries,
        })
    }

    pub fn prepare_all(
        &self,
        samples: &[Sample],
        variant: &dyn Variant,
        provider: &dyn EmbeddingProvider,
        width: usize,
    ) -> Result<Vec<PreparedSample>> {
        samples.iter().map(|s| self.prepare(s, variant, provider, width)).collect()
    }
}
